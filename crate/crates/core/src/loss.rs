//! Hybrid loss, slice-weighted totals and the contrastive pair losses.
//!
//! The hybrid loss of a target `Y` and prediction `P` (both `B×C×H×W`) is
//!
//! ```text
//! -(1/N) Σ_c Σ_n [ y log max(p, 1e-7) + y·p / (y² + p²) ]
//! ```
//!
//! with `N` the number of pixels (not pixels × classes) and `0/0 := 0` in the
//! ratio. Losses are therefore negative near a good fit: a perfect one-hot
//! prediction scores `-0.5` per pixel.
//!
//! Pair losses feed each model's output to the other as a detached target.
//! Negative pairs use the complement target, i.e. the peer output with its two
//! channels swapped.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::unetpp::{ProbMap, CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Positive,
    Negative,
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        })
    }
}

/// Target values `Y` for the hybrid loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTarget<F: Scalar = f32> {
    values: Tensor<F>,
    hard: bool,
}

impl<F: Scalar> PseudoTarget<F> {
    /// Soft target taken from a probability map.
    pub fn from_probs(probs: &ProbMap) -> Self {
        Self {
            values: probs.tensor().cast(),
            hard: false,
        }
    }

    /// One-hot target from per-pixel class indices (`B×H×W` row-major).
    pub fn one_hot(dims: [usize; 4], classes: &[usize]) -> Result<Self> {
        let [b, c, h, w] = dims;
        if classes.len() != b * h * w {
            return Err(Error::shape(
                "one_hot",
                format!("{} labels for {b}×{h}×{w} pixels", classes.len()),
            ));
        }
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(Error::InvalidArgument(format!("class {bad} outside 0..{c}")));
        }
        let hw = h * w;
        let values = Tensor::from_fn(&dims, |i| {
            let (bi, rest) = (i / (c * hw), i % (c * hw));
            let (ci, pix) = (rest / hw, rest % hw);
            if classes[bi * hw + pix] == ci {
                F::one()
            } else {
                F::zero()
            }
        });
        Ok(Self { values, hard: true })
    }

    pub fn from_tensor(values: Tensor<F>, hard: bool) -> Self {
        Self { values, hard }
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn is_hard(&self) -> bool {
        self.hard
    }
}

/// Per-slice marker probabilities `η_i ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceWeight(Vec<f64>);

impl SliceWeight {
    pub fn new(etas: Vec<f64>) -> Result<Self> {
        if etas.is_empty() {
            return Err(Error::InvalidArgument("slice weights need d >= 1".into()));
        }
        if let Some(bad) = etas.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::InvalidArgument(format!("eta {bad} outside [0, 1]")));
        }
        Ok(Self(etas))
    }

    pub fn uniform(d: usize, eta: f64) -> Result<Self> {
        Self::new(vec![eta; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Hybrid loss on the tape; differentiable in both arguments.
pub fn hybrid_loss<F: Scalar>(tape: &mut Tape<F>, target: Var, pred: Var) -> Result<Var> {
    tape.hybrid_loss(target, pred)
}

/// Evaluates the hybrid loss of two concrete tensors.
pub fn hybrid_loss_value<F: Scalar>(target: &PseudoTarget<F>, pred: &Tensor<F>) -> Result<F> {
    let mut tape = Tape::<F>::new();
    let y = tape.constant(target.values().clone());
    let p = tape.constant(pred.clone());
    let loss = tape.hybrid_loss(y, p)?;
    Ok(tape.value(loss).item())
}

/// `Σ_i η_i · loss_i`.
pub fn total_loss<F: Scalar>(tape: &mut Tape<F>, losses: &[Var], weights: &SliceWeight) -> Result<Var> {
    if losses.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} losses for {} slice weights",
            losses.len(),
            weights.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&loss, &eta) in losses.iter().zip(weights.as_slice()) {
        if !tape.get(loss)?.is_scalar() {
            return Err(Error::NotScalar(tape.value(loss).dims().to_vec()));
        }
        let term = tape.scale(loss, F::from_f64(eta))?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("non-empty weights"))
}

fn check_pair<F: Scalar>(tape: &Tape<F>, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (da, db) = (tape.get(a)?.dims(), tape.get(b)?.dims());
    if da != db {
        return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
    }
    Ok(())
}

/// `½ [h(sg(A), B) + h(sg(B), A)]`.
pub fn positive_pair_loss<F: Scalar>(tape: &mut Tape<F>, a: Var, b: Var) -> Result<Var> {
    check_pair(tape, a, b, "positive_pair_loss")?;
    let ta = tape.detach(a)?;
    let tb = tape.detach(b)?;
    symmetric_half(tape, ta, b, tb, a)
}

/// `½ [h(swap(sg(A)), B) + h(swap(sg(B)), A)]`; two classes only.
pub fn negative_pair_loss<F: Scalar>(tape: &mut Tape<F>, a: Var, b: Var) -> Result<Var> {
    check_pair(tape, a, b, "negative_pair_loss")?;
    let classes = tape.value(a).dims().get(1).copied().unwrap_or(0);
    if classes != CLASSES {
        return Err(Error::shape(
            "negative_pair_loss",
            format!("complement needs {CLASSES} channels, got {classes}"),
        ));
    }
    let da = tape.detach(a)?;
    let ta = tape.swap_channels(da)?;
    let db = tape.detach(b)?;
    let tb = tape.swap_channels(db)?;
    symmetric_half(tape, ta, b, tb, a)
}

/// Joint variant without detaching: both branches receive gradient through
/// the target as well. Used only when `stop_gradient` is switched off.
pub fn pair_loss_joint<F: Scalar>(tape: &mut Tape<F>, polarity: Polarity, a: Var, b: Var) -> Result<Var> {
    check_pair(tape, a, b, "pair_loss_joint")?;
    let (ta, tb) = match polarity {
        Polarity::Positive => (a, b),
        Polarity::Negative => (tape.swap_channels(a)?, tape.swap_channels(b)?),
    };
    symmetric_half(tape, ta, b, tb, a)
}

pub fn pair_loss<F: Scalar>(tape: &mut Tape<F>, polarity: Polarity, a: Var, b: Var) -> Result<Var> {
    match polarity {
        Polarity::Positive => positive_pair_loss(tape, a, b),
        Polarity::Negative => negative_pair_loss(tape, a, b),
    }
}

fn symmetric_half<F: Scalar>(tape: &mut Tape<F>, ya: Var, pb: Var, yb: Var, pa: Var) -> Result<Var> {
    let first = tape.hybrid_loss(ya, pb)?;
    let second = tape.hybrid_loss(yb, pa)?;
    let both = tape.add(first, second)?;
    tape.scale(both, F::from_f64(0.5))
}
