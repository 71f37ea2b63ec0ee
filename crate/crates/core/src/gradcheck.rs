//! Central-difference gradient checking on a float64 shadow tape.
//!
//! The function under test is written once against a generic [`Tape`] and
//! evaluated here in `f64`. Coordinates whose ±h probes flip the sign of any
//! relu input straddle a kink, where the function is not differentiable; those
//! coordinates are counted and skipped instead of compared.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Base points closer than this to a relu kink are rejected outright.
pub const KINK_MARGIN: f64 = 1e-6;
/// At most this fraction of coordinates may be skipped as kink crossings.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks a scalar function of one tensor.
pub fn gradcheck<G>(f: G, point: &Tensor<f64>, step: f64, tol: f64) -> Result<GradcheckReport>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    gradcheck_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        step,
        tol,
    )
}

/// Checks a scalar function of several tensors, perturbing every coordinate
/// of every input.
pub fn gradcheck_many<G>(
    f: G,
    points: &[Tensor<f64>],
    step: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let out_value = tape.get(out)?;
    if !out_value.is_scalar() {
        return Err(Error::NotScalar(out_value.dims().to_vec()));
    }
    if tape.relu_margin() < KINK_MARGIN {
        return Err(Error::KinkPoint {
            margin: tape.relu_margin(),
        });
    }
    let base_signature = tape.relu_signature();
    let mut grads = tape.backward(out)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.get(out)?.item(), tape.relu_signature()))
    };

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        tolerance: tol,
        pass: false,
    };
    let mut probe = points.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(points[i].dims()));
        for j in 0..points[i].len() {
            let original = points[i].data()[j];
            probe[i].data_mut()[j] = original + step;
            let (plus, sig_plus) = eval(&probe)?;
            probe[i].data_mut()[j] = original - step;
            let (minus, sig_minus) = eval(&probe)?;
            probe[i].data_mut()[j] = original;
            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.data()[j], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j));
            }
        }
    }
    let total = report.checked + report.skipped_kinks;
    report.pass = report.checked > 0
        && report.max_rel_err <= tol
        && (report.skipped_kinks as f64) <= MAX_SKIPPED_FRACTION * total as f64;
    Ok(report)
}
