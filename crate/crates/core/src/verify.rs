//! Finite-difference verification suite over the tape ops, the losses and a
//! small full model. Shared by the `gradcheck` subcommand and the tests.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_many, relative_error, GradcheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::loss::{pair_loss_joint, Polarity};
use crate::seed;
use crate::tensor::Tensor;
use crate::trainer::pair_objective;
use crate::unetpp::{BoundModel, ModelGraph, UnetPPConfig};

/// Seeds each case runs on by default.
pub const REFERENCE_SEEDS: usize = 20;
/// Fresh draws tried when a base point lands on a relu kink or a flat spot.
const KINK_REDRAWS: u64 = 64;
/// Smallest relu pre-activation magnitude accepted for a model base point.
/// Probes of size `DEFAULT_STEP` rarely move a unit further than this.
const MODEL_MARGIN: f64 = 2e-3;
/// Allowed disagreement between the training gradient and the surrogate's.
const SURROGATE_AGREEMENT: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Tensor,
    Loss,
    Model,
    All,
}

impl FromStr for Module {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tensor" => Ok(Module::Tensor),
            "loss" => Ok(Module::Loss),
            "model" => Ok(Module::Model),
            "all" => Ok(Module::All),
            _ => Err(format!("unknown module `{s}` (tensor|loss|model|all)")),
        }
    }
}

impl Module {
    fn includes(self, m: Module) -> bool {
        self == Module::All || self == m
    }
}

type CaseFn = fn(&mut CaseRng) -> Result<GradcheckReport>;

struct Case {
    module: Module,
    name: &'static str,
    run: CaseFn,
}

struct CaseRng(seed::Rng);

impl CaseRng {
    fn uniform(&mut self, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| self.0.random_range(lo..hi))
    }

    fn signed(&mut self, dims: &[usize]) -> Tensor<f64> {
        self.uniform(dims, -1.0, 1.0)
    }

    fn scaled(&mut self, dims: &[usize]) -> Tensor<f64> {
        self.uniform(dims, -2.0, 2.0)
    }

    /// Channel-normalized random probabilities bounded away from 0 and 1.
    fn probs(&mut self, dims: [usize; 4]) -> Tensor<f64> {
        let [b, c, h, w] = dims;
        let mut t = self.uniform(&dims, 0.2, 1.0);
        let hw = h * w;
        for bi in 0..b {
            for px in 0..hw {
                let total: f64 = (0..c).map(|ci| t.data()[(bi * c + ci) * hw + px]).sum();
                for ci in 0..c {
                    t.data_mut()[(bi * c + ci) * hw + px] /= total;
                }
            }
        }
        t
    }
}

fn check(points: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<GradcheckReport> {
    gradcheck_many(f, points, DEFAULT_STEP, DEFAULT_TOLERANCE)
}

/// `Σ out ⊙ r` for a fixed random `r`, turning any op into a scalar.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

fn unary(rng: &mut CaseRng, dims: &[usize], op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<GradcheckReport> {
    let x = rng.signed(dims);
    let probe = {
        let mut t = Tape::<f64>::new();
        let v = t.constant(x.clone());
        let out = op(&mut t, v)?;
        t.value(out).dims().to_vec()
    };
    let r = rng.signed(&probe);
    check(&[x], |t, v| {
        let out = op(t, v[0])?;
        project(t, out, &r)
    })
}

fn binary(rng: &mut CaseRng, dims: &[usize], op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<GradcheckReport> {
    let (a, b, r) = (rng.signed(dims), rng.signed(dims), rng.signed(dims));
    check(&[a, b], |t, v| {
        let out = op(t, v[0], v[1])?;
        project(t, out, &r)
    })
}

fn conv_case(rng: &mut CaseRng, x: [usize; 4], w: [usize; 4], bias: bool, stride: usize) -> Result<GradcheckReport> {
    let pad = w[2] / 2;
    let side = (x[2] + 2 * pad - w[2]) / stride + 1;
    let mut points = vec![rng.signed(&x), rng.signed(&w)];
    if bias {
        points.push(rng.signed(&[w[0]]));
    }
    let r = rng.signed(&[x[0], w[0], side, side]);
    check(&points, |t, v| {
        let out = t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)?;
        project(t, out, &r)
    })
}

fn case_conv3(rng: &mut CaseRng) -> Result<GradcheckReport> {
    conv_case(rng, [2, 2, 5, 5], [3, 2, 3, 3], true, 1)
}

fn case_conv3_stride2(rng: &mut CaseRng) -> Result<GradcheckReport> {
    conv_case(rng, [1, 2, 6, 6], [2, 2, 3, 3], true, 2)
}

fn case_conv5_no_bias(rng: &mut CaseRng) -> Result<GradcheckReport> {
    conv_case(rng, [1, 1, 7, 7], [2, 1, 5, 5], false, 1)
}

fn case_conv1x1(rng: &mut CaseRng) -> Result<GradcheckReport> {
    conv_case(rng, [2, 3, 3, 3], [2, 3, 1, 1], true, 1)
}

fn case_upsample(rng: &mut CaseRng) -> Result<GradcheckReport> {
    unary(rng, &[1, 2, 3, 3], |t, x| t.upsample_bilinear2x(x))
}

fn case_relu(rng: &mut CaseRng) -> Result<GradcheckReport> {
    unary(rng, &[1, 2, 4, 4], |t, x| t.relu(x))
}

fn case_softmax(rng: &mut CaseRng) -> Result<GradcheckReport> {
    unary(rng, &[2, 3, 3, 3], |t, x| t.softmax_channels(x))
}

fn case_swap(rng: &mut CaseRng) -> Result<GradcheckReport> {
    unary(rng, &[1, 2, 3, 3], |t, x| t.swap_channels(x))
}

fn case_scale(rng: &mut CaseRng) -> Result<GradcheckReport> {
    unary(rng, &[1, 2, 3, 3], |t, x| t.scale(x, -1.7))
}

fn case_add_scalar(rng: &mut CaseRng) -> Result<GradcheckReport> {
    unary(rng, &[1, 2, 3, 3], |t, x| {
        let y = t.add_scalar(x, 0.3)?;
        t.mul(y, y)
    })
}

fn case_sum(rng: &mut CaseRng) -> Result<GradcheckReport> {
    let x = rng.signed(&[1, 2, 3, 3]);
    check(&[x], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.sum(sq)
    })
}

fn case_mean(rng: &mut CaseRng) -> Result<GradcheckReport> {
    let x = rng.signed(&[2, 2, 3, 3]);
    check(&[x], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.mean(sq)
    })
}

fn case_add(rng: &mut CaseRng) -> Result<GradcheckReport> {
    binary(rng, &[1, 2, 3, 3], |t, a, b| t.add(a, b))
}

fn case_sub(rng: &mut CaseRng) -> Result<GradcheckReport> {
    binary(rng, &[1, 2, 3, 3], |t, a, b| t.sub(a, b))
}

fn case_mul(rng: &mut CaseRng) -> Result<GradcheckReport> {
    binary(rng, &[1, 2, 3, 3], |t, a, b| t.mul(a, b))
}

fn case_concat(rng: &mut CaseRng) -> Result<GradcheckReport> {
    let (a, b) = (rng.signed(&[2, 1, 3, 3]), rng.signed(&[2, 2, 3, 3]));
    let r = rng.signed(&[2, 3, 3, 3]);
    check(&[a, b], |t, v| {
        let out = t.concat_channels(&[v[0], v[1]])?;
        project(t, out, &r)
    })
}

/// Rejects points the default step cannot resolve. Central differences at
/// `h` and `2h` differ by three times the `h` truncation error, so that
/// estimate must stay under half the tolerance relative to the slope.
/// Only the numeric side is consulted.
fn require_resolvable(points: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<()> {
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vars)?;
        Ok(t.get(out)?.item())
    };
    let mut probe = points.to_vec();
    for i in 0..points.len() {
        for j in 0..points[i].len() {
            let x = points[i].data()[j];
            let mut central = |h: f64| -> Result<f64> {
                probe[i].data_mut()[j] = x + h;
                let plus = eval(&probe)?;
                probe[i].data_mut()[j] = x - h;
                let minus = eval(&probe)?;
                probe[i].data_mut()[j] = x;
                Ok((plus - minus) / (2.0 * h))
            };
            let (fine, coarse) = (central(DEFAULT_STEP)?, central(2.0 * DEFAULT_STEP)?);
            let truncation = (coarse - fine).abs() / 3.0;
            if truncation > 0.5 * DEFAULT_TOLERANCE * fine.abs().max(1e-8) {
                return Err(Error::FlatPoint { slope: fine });
            }
        }
    }
    Ok(())
}

// The target-side derivative crosses zero inside the unit interval.
fn case_hybrid(rng: &mut CaseRng) -> Result<GradcheckReport> {
    let (y, p) = (rng.probs([1, 2, 3, 3]), rng.probs([1, 2, 3, 3]));
    let f = |t: &mut Tape<f64>, v: &[Var]| t.hybrid_loss(v[0], v[1]);
    require_resolvable(&[y.clone(), p.clone()], f)?;
    check(&[y, p], f)
}

fn case_hybrid_softmax_hard(rng: &mut CaseRng) -> Result<GradcheckReport> {
    let logits = rng.signed(&[2, 2, 4, 4]);
    let hard: Vec<f64> = (0..32).map(|_| if rng.0.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    // complementary channel so each pixel is one-hot
    let mut y = Tensor::zeros(&[2, 2, 4, 4]);
    for b in 0..2 {
        for px in 0..16 {
            let v = hard[b * 16 + px];
            y.data_mut()[b * 32 + px] = v;
            y.data_mut()[b * 32 + 16 + px] = 1.0 - v;
        }
    }
    check(&[logits], |t, v| {
        let p = t.softmax_channels(v[0])?;
        let y = t.constant(y.clone());
        t.hybrid_loss(y, p)
    })
}

fn case_hybrid_softmax_soft(rng: &mut CaseRng) -> Result<GradcheckReport> {
    let (a, b) = (rng.signed(&[1, 2, 4, 4]), rng.signed(&[1, 2, 4, 4]));
    check(&[a, b], |t, v| {
        let y = t.softmax_channels(v[0])?;
        let p = t.softmax_channels(v[1])?;
        t.hybrid_loss(y, p)
    })
}

fn pair_case(rng: &mut CaseRng, polarity: Polarity) -> Result<GradcheckReport> {
    let (a, b) = (rng.scaled(&[1, 2, 4, 4]), rng.scaled(&[1, 2, 4, 4]));
    check(&[a, b], |t, v| {
        let pa = t.softmax_channels(v[0])?;
        let pb = t.softmax_channels(v[1])?;
        pair_loss_joint(t, polarity, pa, pb)
    })
}

fn case_positive_pair(rng: &mut CaseRng) -> Result<GradcheckReport> {
    pair_case(rng, Polarity::Positive)
}

fn case_negative_pair(rng: &mut CaseRng) -> Result<GradcheckReport> {
    pair_case(rng, Polarity::Negative)
}

fn case_weighted_total(rng: &mut CaseRng) -> Result<GradcheckReport> {
    let logits: Vec<Tensor<f64>> = (0..3).map(|_| rng.signed(&[1, 2, 3, 3])).collect();
    let targets: Vec<Tensor<f64>> = (0..3).map(|_| rng.probs([1, 2, 3, 3])).collect();
    let etas: Vec<f64> = (0..3).map(|_| rng.0.random_range(0.0..1.0)).collect();
    let weights = crate::loss::SliceWeight::new(etas)?;
    check(&logits, |t, v| {
        let mut losses = Vec::new();
        for (x, y) in v.iter().zip(&targets) {
            let p = t.softmax_channels(*x)?;
            let y = t.constant(y.clone());
            losses.push(t.hybrid_loss(y, p)?);
        }
        crate::loss::total_loss(t, &losses, &weights)
    })
}

fn small_model(rng: &mut CaseRng) -> Result<ModelGraph> {
    let cfg = UnetPPConfig::with_levels(2, 8, 2);
    let mut graph = ModelGraph::build(&cfg, rng.0.random())?;
    // nonzero biases keep pre-activations off the relu kink
    graph.for_each_parameter_mut(|name, t| {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                let m = rng.0.random_range(0.2f32..0.8);
                *v = if rng.0.random_bool(0.5) { m } else { -m };
            }
        }
    });
    Ok(graph)
}

fn params_f64(graph: &ModelGraph) -> Vec<Tensor<f64>> {
    graph.parameters().into_iter().map(|(_, t)| t.cast()).collect()
}

fn bound(graph: &ModelGraph, vars: &[Var]) -> Result<BoundModel> {
    graph.bind_vars(vars)
}

fn require_margin(graph: &ModelGraph, input: &Tensor<f64>) -> Result<()> {
    let mut t = Tape::<f64>::new();
    let b = graph.bind(&mut t, false);
    let x = t.constant(input.clone());
    graph.forward_heads(&mut t, &b, x, graph.config().deepest_head(), None)?;
    if t.relu_margin() < MODEL_MARGIN {
        return Err(Error::KinkPoint { margin: t.relu_margin() });
    }
    Ok(())
}

/// Full 2-level model on an 8×8 input: gradient with respect to every
/// parameter and the input, through the deep-supervision heads.
fn case_model(rng: &mut CaseRng) -> Result<GradcheckReport> {
    let graph = small_model(rng)?;
    let mut points = params_f64(&graph);
    let n = points.len();
    points.push(rng.uniform(&[1, 1, 8, 8], 0.0, 1.0));
    require_margin(&graph, &points[n])?;
    let target = rng.probs([1, 2, 8, 8]);
    let depth = graph.config().deepest_head();
    check(&points, |t, v| {
        let b = bound(&graph, &v[..n])?;
        let heads = graph.forward_heads(t, &b, v[n], depth, None)?;
        let y = t.constant(target.clone());
        let mut acc: Option<Var> = None;
        for p in heads.values() {
            let l = t.hybrid_loss(y, *p)?;
            acc = Some(match acc {
                None => l,
                Some(a) => t.add(a, l)?,
            });
        }
        Ok(acc.expect("at least one head"))
    })
}

/// Single-pair training objective on a 2-level model. With stop-gradient the
/// target side is a constant, so the gradient with respect to one model
/// equals that of `η · mean_heads ½ h(target, P(θ))` with the peer's output
/// frozen. The training gradient must match that surrogate's gradient, and
/// the surrogate is checked against central differences.
fn train_pair_case(rng: &mut CaseRng, polarity: Polarity) -> Result<GradcheckReport> {
    let graph_a = small_model(rng)?;
    let graph_b = small_model(rng)?;
    let xa = rng.uniform(&[1, 1, 8, 8], 0.0, 1.0);
    let xb = rng.uniform(&[1, 1, 8, 8], 0.0, 1.0);
    require_margin(&graph_a, &xa)?;
    require_margin(&graph_b, &xb)?;
    let eta = rng.0.random_range(0.2..1.0);
    let train = TrainConfig::default();
    let depth = graph_a.config().deepest_head();

    let mut tape = Tape::<f64>::new();
    let ba = graph_a.bind(&mut tape, true);
    let bb = graph_b.bind(&mut tape, true);
    let va = tape.constant(xa.clone());
    let vb = tape.constant(xb.clone());
    let (_, weighted) = pair_objective(&mut tape, &train, &graph_a, &ba, &bb, va, vb, polarity, eta)?;
    let mut grads = tape.backward(weighted)?;
    let train_grads: Vec<Tensor<f64>> = ba
        .vars()
        .iter()
        .map(|v| grads.take(*v).expect("leaf gradient"))
        .collect();

    // frozen peer heads
    let peer: Vec<Tensor<f64>> = {
        let mut t = Tape::<f64>::new();
        let b = graph_b.bind(&mut t, false);
        let x = t.constant(xb);
        let heads = graph_b.forward_heads(&mut t, &b, x, depth, None)?;
        heads.values().map(|v| t.value(*v).clone()).collect()
    };
    let surrogate = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let b = bound(&graph_a, v)?;
        let x = t.constant(xa.clone());
        let heads = graph_a.forward_heads(t, &b, x, depth, None)?;
        let mut acc: Option<Var> = None;
        for (p, y) in heads.values().zip(&peer) {
            let mut y = t.constant(y.clone());
            if polarity == Polarity::Negative {
                y = t.swap_channels(y)?;
            }
            let l = t.hybrid_loss(y, *p)?;
            acc = Some(match acc {
                None => l,
                Some(a) => t.add(a, l)?,
            });
        }
        let k = 0.5 * eta / peer.len() as f64;
        t.scale(acc.expect("at least one head"), k)
    };

    let points = params_f64(&graph_a);
    let mut t = Tape::<f64>::new();
    let vars: Vec<Var> = points.iter().map(|p| t.leaf(p.clone(), true)).collect();
    let out = surrogate(&mut t, &vars)?;
    let mut sg = t.backward(out)?;
    let worst = vars
        .iter()
        .zip(&train_grads)
        .flat_map(|(v, g)| {
            let s = sg.take(*v).expect("leaf gradient");
            s.data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| relative_error(*a, *b))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    if worst > SURROGATE_AGREEMENT {
        return Err(Error::GradcheckFailed(format!(
            "training gradient departs from the frozen-peer surrogate (rel err {worst:e})"
        )));
    }
    check(&points, surrogate)
}

fn case_train_positive(rng: &mut CaseRng) -> Result<GradcheckReport> {
    train_pair_case(rng, Polarity::Positive)
}

fn case_train_negative(rng: &mut CaseRng) -> Result<GradcheckReport> {
    train_pair_case(rng, Polarity::Negative)
}

const CASES: &[Case] = &[
    Case { module: Module::Tensor, name: "conv2d_3x3", run: case_conv3 },
    Case { module: Module::Tensor, name: "conv2d_3x3_stride2", run: case_conv3_stride2 },
    Case { module: Module::Tensor, name: "conv2d_5x5_nobias", run: case_conv5_no_bias },
    Case { module: Module::Tensor, name: "conv2d_1x1", run: case_conv1x1 },
    Case { module: Module::Tensor, name: "upsample_bilinear2x", run: case_upsample },
    Case { module: Module::Tensor, name: "relu", run: case_relu },
    Case { module: Module::Tensor, name: "softmax_channels", run: case_softmax },
    Case { module: Module::Tensor, name: "concat_channels", run: case_concat },
    Case { module: Module::Tensor, name: "swap_channels", run: case_swap },
    Case { module: Module::Tensor, name: "add", run: case_add },
    Case { module: Module::Tensor, name: "sub", run: case_sub },
    Case { module: Module::Tensor, name: "mul", run: case_mul },
    Case { module: Module::Tensor, name: "scale", run: case_scale },
    Case { module: Module::Tensor, name: "add_scalar", run: case_add_scalar },
    Case { module: Module::Tensor, name: "sum", run: case_sum },
    Case { module: Module::Tensor, name: "mean", run: case_mean },
    Case { module: Module::Tensor, name: "hybrid_loss", run: case_hybrid },
    Case { module: Module::Loss, name: "hybrid_softmax_onehot", run: case_hybrid_softmax_hard },
    Case { module: Module::Loss, name: "hybrid_softmax_soft", run: case_hybrid_softmax_soft },
    Case { module: Module::Loss, name: "positive_pair", run: case_positive_pair },
    Case { module: Module::Loss, name: "negative_pair", run: case_negative_pair },
    Case { module: Module::Loss, name: "eta_weighted_total", run: case_weighted_total },
    Case { module: Module::Model, name: "unetpp_l2_8x8", run: case_model },
    Case { module: Module::Model, name: "train_pair_positive", run: case_train_positive },
    Case { module: Module::Model, name: "train_pair_negative", run: case_train_negative },
];

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub module: Module,
    pub name: &'static str,
    pub seed: u64,
    /// Draw attempts used; above 1 means earlier draws hit a kink or flat spot.
    pub draws: u64,
    pub report: GradcheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub results: Vec<CaseResult>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(|r| r.report.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.results.iter().filter(|r| !r.report.pass)
    }

    /// One line per case: worst relative error over seeds.
    pub fn case_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for case in CASES {
            let runs: Vec<&CaseResult> = self.results.iter().filter(|r| r.name == case.name).collect();
            if runs.is_empty() {
                continue;
            }
            let worst = runs.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
            let ok = runs.iter().all(|r| r.report.pass);
            let skipped: usize = runs.iter().map(|r| r.report.skipped_kinks).sum();
            lines.push(format!(
                "{:<6} {:<24} seeds {:>3}  max rel err {:.2e}  kinks skipped {}",
                if ok { "ok" } else { "FAIL" },
                case.name,
                runs.len(),
                worst,
                skipped
            ));
        }
        lines
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Tensor => "tensor",
            Module::Loss => "loss",
            Module::Model => "model",
            Module::All => "all",
        })
    }
}

fn run_case(case: &Case, seed: u64) -> Result<CaseResult> {
    for draw in 0..KINK_REDRAWS {
        let mut rng = CaseRng(seed::rng(seed, &format!("verify/{}/{draw}", case.name)));
        match (case.run)(&mut rng) {
            Ok(report) => {
                return Ok(CaseResult {
                    module: case.module,
                    name: case.name,
                    seed,
                    draws: draw + 1,
                    report,
                })
            }
            Err(Error::KinkPoint { .. } | Error::FlatPoint { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::GradcheckFailed(format!(
        "{} seed {seed}: every draw landed on a relu kink or a flat spot",
        case.name
    )))
}

/// Runs every case of `module` over seeds `0..seeds`.
pub fn run_suite(module: Module, seeds: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    for case in CASES.iter().filter(|c| module.includes(c.module)) {
        for s in 0..seeds as u64 {
            results.push(run_case(case, s)?);
        }
    }
    Ok(SuiteReport {
        results,
        elapsed: start.elapsed(),
    })
}

pub fn case_names(module: Module) -> Vec<&'static str> {
    CASES.iter().filter(|c| module.includes(c.module)).map(|c| c.name).collect()
}
