//! Dual-model contrastive training, checkpoint state and tiled inference.
//!
//! Two architecture-identical models start from the same seeded weights. Each
//! pair's slices go through model_a and model_b respectively; the pair loss
//! (averaged over supervision heads) is weighted by the pair's η and summed
//! over the batch. Per-pair passes run in parallel and their gradients are
//! reduced in pair order, so a step is bit-deterministic.
//!
//! Every random draw is a function of `train.seed` and the step index, so the
//! step counter is the whole RNG state.
//!
//! The network's two output channels carry no built-in meaning: which one
//! ends up marking lesions depends on the run. After training, the channel
//! whose mean probability is higher on positive-labeled training images than
//! on negative ones is recorded as the marker channel. This uses image-level
//! labels only.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::augment::{make_pairs, untile, LabeledImage, PairSample, TileCoord};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{OptimizerConfig, OptimizerKind, RunConfig, TrainConfig};
use crate::data::{guard_training_path, Label, Manifest, Split};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::loss::{pair_loss, pair_loss_joint, Polarity};
use crate::seed;
use crate::tensor::{Scalar, Tensor};
use crate::unetpp::{BoundModel, ModelGraph, ProbMap};

pub const LOG_HEADER: &str = "# step\ttotal_loss\tpos_loss_mean\tneg_loss_mean\tgrad_norm";

/// `w ← w − lr·g`.
pub fn sgd_step(w: &mut Tensor<f32>, g: &Tensor<f32>, lr: f64) -> Result<()> {
    if !w.same_dims(g) {
        return Err(Error::shape("sgd_step", format!("{:?} vs {:?}", w.dims(), g.dims())));
    }
    for (w, &g) in w.data_mut().iter_mut().zip(g.data()) {
        *w = (*w as f64 - lr * g as f64) as f32;
    }
    Ok(())
}

/// One bias-corrected adam update at 1-based step `t`.
pub fn adam_step(
    w: &mut Tensor<f32>,
    g: &Tensor<f32>,
    m: &mut Tensor<f32>,
    v: &mut Tensor<f32>,
    t: u64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if !(w.same_dims(g) && w.same_dims(m) && w.same_dims(v)) {
        return Err(Error::shape("adam_step", format!("{:?} vs {:?}", w.dims(), g.dims())));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let iter = w
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut().iter_mut().zip(v.data_mut()));
    for ((w, &g), (m, v)) in iter {
        let g = g as f64;
        let mn = cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g;
        let vn = cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g;
        *m = mn as f32;
        *v = vn as f32;
        let update = cfg.lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
        *w = (*w as f64 - update) as f32;
    }
    Ok(())
}

/// Adam moments per parameter name; empty under sgd.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptState {
    pub moments: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl OptState {
    pub fn for_graph(graph: &ModelGraph, kind: OptimizerKind) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => BTreeMap::new(),
            OptimizerKind::Adam => graph
                .parameters()
                .into_iter()
                .map(|(n, t)| (n, (Tensor::zeros(t.dims()), Tensor::zeros(t.dims()))))
                .collect(),
        };
        Self { moments }
    }
}

/// Applies one update to every parameter of `graph`; `grads` is in canonical
/// parameter order.
pub fn optimizer_step(
    graph: &mut ModelGraph,
    grads: &[Tensor<f32>],
    opt: &mut OptState,
    t: u64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let mut grads = grads.iter();
    let mut result = Ok(());
    graph.for_each_parameter_mut(|name, w| {
        if result.is_err() {
            return;
        }
        let Some(g) = grads.next() else {
            result = Err(Error::shape("optimizer_step", "fewer gradients than parameters"));
            return;
        };
        result = match cfg.kind {
            OptimizerKind::Sgd => sgd_step(w, g, cfg.lr),
            OptimizerKind::Adam => match opt.moments.get_mut(name) {
                Some((m, v)) => adam_step(w, g, m, v, t, cfg),
                None => Err(Error::MissingParameter(format!("adam moments for {name}"))),
            },
        };
    });
    result?;
    if grads.next().is_some() {
        return Err(Error::shape("optimizer_step", "more gradients than parameters"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub model_a: ModelGraph,
    pub model_b: ModelGraph,
    pub opt_a: OptState,
    pub opt_b: OptState,
    pub step: u64,
    pub marker_channel: usize,
}

fn parse_state<T: std::str::FromStr>(state: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = state
        .get(key)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks state.{key}")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("bad state.{key} `{raw}`")))
}

fn collect_prefixed(ck: &Checkpoint, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
    ck.with_prefix(prefix).map(|(n, t)| (n.to_string(), t.clone())).collect()
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model_a = ModelGraph::build(&config.model, seed::derive(config.train.seed, "init"))?;
        let model_b = model_a.clone();
        let opt_a = OptState::for_graph(&model_a, config.optim.kind);
        let opt_b = opt_a.clone();
        Ok(Self {
            config,
            model_a,
            model_b,
            opt_a,
            opt_b,
            step: 0,
            marker_channel: 1,
        })
    }

    fn header(&self, pruned: Option<usize>) -> String {
        let mut text = self.config.to_text();
        text.push_str(&format!("state.step = {}\n", self.step));
        text.push_str(&format!("state.marker_channel = {}\n", self.marker_channel));
        text.push_str(&format!(
            "state.pruned_depth = {}\n",
            pruned.map_or("none".to_string(), |d| d.to_string())
        ));
        text
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (tag, graph) in [("model_a", &self.model_a), ("model_b", &self.model_b)] {
            for (name, t) in graph.parameters() {
                tensors.push((format!("{tag}.{name}"), t.clone()));
            }
        }
        for (tag, opt, graph) in [("model_a", &self.opt_a, &self.model_a), ("model_b", &self.opt_b, &self.model_b)] {
            for name in graph.parameter_names() {
                if let Some((m, v)) = opt.moments.get(&name) {
                    tensors.push((format!("opt.m.{tag}.{name}"), m.clone()));
                    tensors.push((format!("opt.v.{tag}.{name}"), v.clone()));
                }
            }
        }
        Checkpoint {
            config_text: self.header(None),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (config, state) = RunConfig::parse_with_state(&ck.config_text)?;
        if state.get("pruned_depth").is_some_and(|v| v != "none") {
            return Err(Error::Config("cannot resume training from a pruned checkpoint".into()));
        }
        let mut model_a = ModelGraph::skeleton(&config.model, None)?;
        let mut model_b = model_a.clone();
        model_a.load_parameters(collect_prefixed(ck, "model_a."))?;
        model_b.load_parameters(collect_prefixed(ck, "model_b."))?;
        let load_opt = |tag: &str, graph: &ModelGraph| -> Result<OptState> {
            let mut opt = OptState::for_graph(graph, config.optim.kind);
            for (name, (m, v)) in opt.moments.iter_mut() {
                for (kind, slot) in [("m", m), ("v", v)] {
                    let key = format!("opt.{kind}.{tag}.{name}");
                    let t = ck.get(&key).ok_or_else(|| Error::MissingParameter(key.clone()))?;
                    if !t.same_dims(slot) {
                        return Err(Error::shape("checkpoint", format!("{key}: {:?}", t.dims())));
                    }
                    *slot = t.clone();
                }
            }
            Ok(opt)
        };
        let opt_a = load_opt("model_a", &model_a)?;
        let opt_b = load_opt("model_b", &model_b)?;
        let expected =
            2 * model_a.parameter_names().len() + 2 * (opt_a.moments.len() + opt_b.moments.len());
        if ck.tensors.len() != expected {
            let known = |n: &str| n.starts_with("model_a.") || n.starts_with("model_b.") || n.starts_with("opt.");
            let stray = ck.tensors.iter().find(|(n, _)| !known(n)).map(|(n, _)| n.clone());
            return Err(Error::UnknownParameter(stray.unwrap_or_else(|| "extra tensors".into())));
        }
        Ok(Self {
            config,
            model_a,
            model_b,
            opt_a,
            opt_b,
            step: parse_state(&state, "step")?,
            marker_channel: parse_state(&state, "marker_channel")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub total_loss: f64,
    pub pos_loss_mean: Option<f64>,
    pub neg_loss_mean: Option<f64>,
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| v.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.step,
            self.total_loss,
            opt(self.pos_loss_mean),
            opt(self.neg_loss_mean),
            self.grad_norm
        )
    }
}

/// Per-pair loss on a tape: the polarity's pair loss averaged over the
/// supervised heads. Returns `(pair loss, η · pair loss)`.
pub fn pair_objective<F: Scalar>(
    tape: &mut Tape<F>,
    train: &TrainConfig,
    graph: &ModelGraph,
    bound_a: &BoundModel,
    bound_b: &BoundModel,
    slice_a: Var,
    slice_b: Var,
    polarity: Polarity,
    eta: f64,
) -> Result<(Var, Var)> {
    let depth = graph.config().deepest_head();
    let heads_a = graph.forward_heads(tape, bound_a, slice_a, depth, None)?;
    let heads_b = graph.forward_heads(tape, bound_b, slice_b, depth, None)?;
    let used: Vec<usize> = if train.deep_supervision {
        heads_a.keys().copied().collect()
    } else {
        vec![depth]
    };
    let mut acc: Option<Var> = None;
    for d in &used {
        let (pa, pb) = (heads_a[d], heads_b[d]);
        let l = if train.stop_gradient {
            pair_loss(tape, polarity, pa, pb)?
        } else {
            pair_loss_joint(tape, polarity, pa, pb)?
        };
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    let sum = acc.expect("at least one head");
    let mean = tape.scale(sum, F::from_f64(1.0 / used.len() as f64))?;
    let weighted = tape.scale(mean, F::from_f64(eta))?;
    Ok((mean, weighted))
}

/// Result of one pair's forward/backward pass.
#[derive(Clone, Debug)]
pub struct PairOutcome {
    pub loss: f64,
    pub weighted: f64,
    pub grads_a: Vec<Tensor<f32>>,
    /// Empty under weight sharing; everything lands in `grads_a`.
    pub grads_b: Vec<Tensor<f32>>,
}

fn slice_tensor(img: &Image) -> Tensor<f32> {
    img.as_tensor()
}

fn grads_for(grads: &mut crate::autodiff::Gradients<f32>, graph: &ModelGraph, bound: &BoundModel) -> Vec<Tensor<f32>> {
    bound
        .vars()
        .iter()
        .zip(graph.parameters())
        .map(|(v, (_, t))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.dims())))
        .collect()
}

pub fn pair_gradients(state: &TrainState, pair: &PairSample) -> Result<PairOutcome> {
    let train = &state.config.train;
    let mut tape = Tape::<f32>::new();
    let bound_a = state.model_a.bind(&mut tape, true);
    let bound_b = if train.weight_sharing {
        bound_a.clone()
    } else {
        state.model_b.bind(&mut tape, true)
    };
    let xa = tape.constant(slice_tensor(&pair.slice_a));
    let xb = tape.constant(slice_tensor(&pair.slice_b));
    let (loss, weighted) = pair_objective(
        &mut tape,
        train,
        &state.model_a,
        &bound_a,
        &bound_b,
        xa,
        xb,
        pair.polarity,
        pair.eta,
    )?;
    let loss_value = tape.value(loss).item() as f64;
    let weighted_value = tape.value(weighted).item() as f64;
    let non_finite = || Error::NonFiniteLoss {
        step: state.step + 1,
        provenance: pair.provenance.to_string(),
    };
    if !loss_value.is_finite() {
        return Err(non_finite());
    }
    let mut grads = tape.backward(weighted)?;
    let grads_a = grads_for(&mut grads, &state.model_a, &bound_a);
    let grads_b = if train.weight_sharing {
        Vec::new()
    } else {
        grads_for(&mut grads, &state.model_b, &bound_b)
    };
    if grads_a.iter().chain(&grads_b).any(|g| !g.all_finite()) {
        return Err(non_finite());
    }
    Ok(PairOutcome {
        loss: loss_value,
        weighted: weighted_value,
        grads_a,
        grads_b,
    })
}

fn accumulate(acc: &mut Option<Vec<Tensor<f32>>>, grads: Vec<Tensor<f32>>) {
    match acc {
        None => *acc = Some(grads),
        Some(sum) => {
            for (s, g) in sum.iter_mut().zip(grads) {
                for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }
}

fn squared_norm(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| v as f64 * v as f64)
        .sum()
}

/// Forward/backward over every pair, then one optimizer update per model.
pub fn train_step(state: &mut TrainState, pairs: &[PairSample]) -> Result<StepMetrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty pair batch".into()));
    }
    let outcomes: Vec<PairOutcome> = pairs
        .par_iter()
        .map(|p| pair_gradients(state, p))
        .collect::<Result<_>>()?;

    let mut total = 0.0;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let (mut ga, mut gb) = (None, None);
    for (pair, out) in pairs.iter().zip(outcomes) {
        total += out.weighted;
        match pair.polarity {
            Polarity::Positive => pos.push(out.loss),
            Polarity::Negative => neg.push(out.loss),
        }
        accumulate(&mut ga, out.grads_a);
        if !out.grads_b.is_empty() {
            accumulate(&mut gb, out.grads_b);
        }
    }
    let ga = ga.expect("non-empty batch");
    let mut norm2 = squared_norm(&ga);
    let t = state.step + 1;
    let optim = state.config.optim.clone();
    optimizer_step(&mut state.model_a, &ga, &mut state.opt_a, t, &optim)?;
    match gb {
        Some(gb) => {
            norm2 += squared_norm(&gb);
            optimizer_step(&mut state.model_b, &gb, &mut state.opt_b, t, &optim)?;
        }
        None => {
            state.model_b = state.model_a.clone();
            state.opt_b = state.opt_a.clone();
        }
    }
    state.step = t;
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(StepMetrics {
        step: t,
        total_loss: total,
        pos_loss_mean: mean(&pos),
        neg_loss_mean: mean(&neg),
        grad_norm: norm2.sqrt(),
    })
}

/// Labeled training images of one split. Every path is checked against the
/// hidden-mask guard before it is opened.
pub fn load_labeled_images(manifest: &Manifest, split: Split) -> Result<Vec<LabeledImage>> {
    manifest
        .split(split)
        .map(|rec| {
            let path = manifest.resolve(&rec.path);
            guard_training_path(&path)?;
            Ok(LabeledImage {
                id: rec.id(),
                image: Image::read_pgm(&path)?,
                label: rec.label,
                eta: rec.eta,
            })
        })
        .collect()
}

fn check_training_data(config: &RunConfig, images: &[LabeledImage]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Data("no training images in the manifest".into()));
    }
    let s = config.image_size;
    if let Some(bad) = images.iter().find(|i| i.image.width() != s || i.image.height() != s) {
        return Err(Error::Data(format!(
            "image {} is {}×{}, config expects {s}×{s} (data.image_size)",
            bad.id,
            bad.image.width(),
            bad.image.height()
        )));
    }
    let has = |l: Label| images.iter().any(|i| i.label == l);
    let p = &config.pairs;
    if (p.normal_pairs > 0 || p.negative_pairs > 0) && !has(Label::Negative) {
        return Err(Error::Data("the requested pairs need negative-labeled training images".into()));
    }
    if p.negative_pairs > 0 && !has(Label::Positive) {
        return Err(Error::Data(
            "negative pairs need positive-labeled training images; none found".into(),
        ));
    }
    Ok(())
}

/// Seed of the pair batch for 1-based step `t`.
pub fn batch_seed(master: u64, t: u64) -> u64 {
    seed::derive(master, &format!("batch/{t}"))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Path of the metrics log next to a checkpoint.
pub fn log_path_for(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_os_string();
    name.push(".metrics.tsv");
    PathBuf::from(name)
}

/// Trains from `state` (fresh or resumed) for `steps` more steps, writing
/// checkpoints every `train.checkpoint_every` steps and at the end, plus the
/// metrics log. Nothing is written if the data cannot be loaded.
pub fn run_training(data: &Path, mut state: TrainState, out: &Path, steps: u64) -> Result<TrainSummary> {
    let manifest = Manifest::load(data)?;
    let images = load_labeled_images(&manifest, Split::Train)?;
    check_training_data(&state.config, &images)?;
    let log = log_path_for(out);
    let mut log_text = format!("{LOG_HEADER}\n");
    let mut metrics = Vec::new();
    let every = state.config.train.checkpoint_every;
    let last = state.step + steps;
    while state.step < last {
        let pairs = make_pairs(
            &images,
            &state.config.pairs,
            batch_seed(state.config.train.seed, state.step + 1),
        )?;
        let m = train_step(&mut state, &pairs)?;
        log_text.push_str(&m.log_line());
        log_text.push('\n');
        metrics.push(m);
        if every > 0 && state.step.is_multiple_of(every) && state.step < last {
            state.to_checkpoint().write(out)?;
        }
    }
    if steps > 0 {
        state.marker_channel = calibrate_marker_channel(&state.model_a, &images, state.config.pairs.tile_size)?;
    }
    state.to_checkpoint().write(out)?;
    fs::write(&log, log_text).map_err(|e| Error::io(&log, e))?;
    Ok(TrainSummary {
        metrics,
        checkpoint: out.to_path_buf(),
        log,
    })
}

/// Per-pixel probability planes of `class` over a full image, tile by tile.
pub fn class_probability(graph: &ModelGraph, image: &Image, tile: usize, depth: Option<usize>, class: usize) -> Result<Image> {
    let side = image.side()?;
    let tiles = crate::augment::tile(image, tile)?;
    let n = tiles.len();
    let mut data = Vec::with_capacity(n * tile * tile);
    for (_, t) in &tiles {
        data.extend_from_slice(t.pixels());
    }
    let batch = Tensor::new(vec![n, 1, tile, tile], data)?;
    let probs: ProbMap = graph.forward(&batch, depth)?;
    let planes: Vec<(TileCoord, Image)> = tiles
        .iter()
        .enumerate()
        .map(|(b, (at, _))| Ok((*at, Image::new(tile, tile, probs.class_plane(b, class).to_vec())?)))
        .collect::<Result<_>>()?;
    untile(&planes, side)
}

/// Picks the output channel whose mean probability is higher on positive
/// images than on negative ones. Falls back to channel 1 when a label class
/// is missing.
pub fn calibrate_marker_channel(graph: &ModelGraph, images: &[LabeledImage], tile: usize) -> Result<usize> {
    let means: Vec<(Label, f64)> = images
        .par_iter()
        .map(|img| {
            let p = class_probability(graph, &img.image, tile, None, 1)?;
            let mean = p.pixels().iter().map(|&v| v as f64).sum::<f64>() / p.pixels().len() as f64;
            Ok((img.label, mean))
        })
        .collect::<Result<_>>()?;
    let avg = |l: Label| {
        let v: Vec<f64> = means.iter().filter(|(k, _)| *k == l).map(|(_, m)| *m).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(match (avg(Label::Positive), avg(Label::Negative)) {
        (Some(p), Some(n)) if p < n => 0,
        _ => 1,
    })
}

/// Inference-side view of a checkpoint: model_a plus its marker channel.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub config: RunConfig,
    pub graph: ModelGraph,
    pub marker_channel: usize,
    pub step: u64,
}

impl InferenceModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (config, state) = RunConfig::parse_with_state(&ck.config_text)?;
        let pruned = match state.get("pruned_depth").map(String::as_str) {
            None | Some("none") => None,
            Some(_) => Some(parse_state::<usize>(&state, "pruned_depth")?),
        };
        let mut graph = ModelGraph::skeleton(&config.model, pruned)?;
        graph.load_parameters(collect_prefixed(ck, "model_a."))?;
        let marker_channel: usize = parse_state(&state, "marker_channel")?;
        if marker_channel > 1 {
            return Err(Error::Config(format!("marker channel {marker_channel} out of range")));
        }
        Ok(Self {
            config,
            graph,
            marker_channel,
            step: parse_state(&state, "step")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    pub fn tile_size(&self) -> usize {
        self.config.pairs.tile_size
    }

    pub fn resolve_depth(&self, depth: Option<usize>) -> usize {
        depth
            .or(self.config.infer.depth.filter(|&d| d <= self.graph.depth_limit()))
            .unwrap_or(self.graph.depth_limit())
    }

    /// Stitched marker probabilities for a preprocessed `S×S` image.
    pub fn marker_probability(&self, image: &Image, depth: Option<usize>) -> Result<Image> {
        let side = image.side()?;
        if side % self.tile_size() != 0 {
            return Err(Error::InvalidArgument(format!(
                "tile size {} does not divide image side {side}",
                self.tile_size()
            )));
        }
        let d = self.resolve_depth(depth);
        class_probability(&self.graph, image, self.tile_size(), Some(d), self.marker_channel)
    }

    pub fn infer(&self, image: &Image, depth: Option<usize>, threshold: f64) -> Result<Mask> {
        let p = self.marker_probability(image, depth)?;
        Ok(Mask::threshold(&p, threshold as f32))
    }

    /// Checkpoint holding only model_a cut down to `depth`.
    pub fn pruned_checkpoint(&self, depth: usize) -> Result<Checkpoint> {
        let graph = self.graph.pruned(depth)?;
        let mut text = self.config.to_text();
        text.push_str(&format!("state.step = {}\n", self.step));
        text.push_str(&format!("state.marker_channel = {}\n", self.marker_channel));
        text.push_str(&format!("state.pruned_depth = {depth}\n"));
        let tensors = graph
            .parameters()
            .into_iter()
            .map(|(n, t)| (format!("model_a.{n}"), t.clone()))
            .collect();
        Ok(Checkpoint {
            config_text: text,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{PairKind, PairPolicy, Provenance, SliceSource};
    use crate::unetpp::UnetPPConfig;

    pub(crate) fn tiny_config(levels: usize, tile: usize, base: usize) -> RunConfig {
        let pairs = PairPolicy {
            tile_size: tile,
            augment_positives: 1,
            normal_pairs: 1,
            negative_pairs: 1,
            default_eta: 0.5,
        };
        RunConfig {
            model: UnetPPConfig::with_levels(levels, tile, base),
            pairs,
            image_size: tile * 2,
            ..RunConfig::default()
        }
    }

    fn pair(a: Image, b: Image, polarity: Polarity, eta: f64) -> PairSample {
        let src = SliceSource {
            image: "x".into(),
            tile: TileCoord { row: 0, col: 0 },
            augment: None,
        };
        PairSample {
            slice_a: a,
            slice_b: b,
            polarity,
            eta,
            provenance: Provenance {
                kind: PairKind::Augment,
                index: 0,
                a: src.clone(),
                b: src,
                twin: None,
            },
        }
    }

    fn ramp(side: usize, k: usize) -> Image {
        Image::new(side, side, (0..side * side).map(|i| ((i * k) % 97) as f32 / 96.0).collect()).unwrap()
    }

    #[test]
    fn sgd_and_adam_scalar_traces() {
        let mut w = Tensor::scalar(1.0f32);
        sgd_step(&mut w, &Tensor::scalar(0.5), 0.1).unwrap();
        assert!((w.item() - 0.95).abs() < 1e-7);

        let cfg = OptimizerConfig::default();
        let (mut w, mut m, mut v) = (Tensor::scalar(1.0f32), Tensor::scalar(0.0), Tensor::scalar(0.0));
        adam_step(&mut w, &Tensor::scalar(0.5), &mut m, &mut v, 1, &cfg).unwrap();
        // m̂ = 0.5, v̂ = 0.25 at t = 1: update = lr · 0.5 / (0.5 + eps)
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((w.item() as f64 - expected).abs() < 1e-7);
        assert!((w.item() - 0.999).abs() < 1e-6);

        let (mut w0, mut m0, mut v0) = (Tensor::scalar(1.0f32), Tensor::scalar(0.0), Tensor::scalar(0.0));
        adam_step(&mut w0, &Tensor::scalar(0.0), &mut m0, &mut v0, 1, &cfg).unwrap();
        assert_eq!(w0.item(), 1.0);
        let mut w1 = Tensor::scalar(1.0f32);
        sgd_step(&mut w1, &Tensor::scalar(0.0), 0.1).unwrap();
        assert_eq!(w1.item(), 1.0);
        assert!(sgd_step(&mut w1, &Tensor::zeros(&[2]), 0.1).is_err());
    }

    #[test]
    fn identical_positive_pair_has_zero_target_gradient() {
        let cfg = tiny_config(2, 8, 2);
        let state = TrainState::new(cfg).unwrap();
        let img = ramp(8, 5);
        let p = pair(img.clone(), img.clone(), Polarity::Positive, 1.0);
        // the two branches see identical weights and inputs
        let out = pair_gradients(&state, &p).unwrap();
        assert_eq!(out.grads_a.len(), out.grads_b.len());
        for (a, b) in out.grads_a.iter().zip(&out.grads_b) {
            assert_eq!(a.data(), b.data());
        }

        // only the prediction side of h(sg(P_A), P_B) reaches model_b
        let mut tape = Tape::<f32>::new();
        let ba = state.model_a.bind(&mut tape, true);
        let bb = state.model_b.bind(&mut tape, true);
        let xa = tape.constant(img.as_tensor());
        let xb = tape.constant(img.as_tensor());
        let d = state.model_a.config().deepest_head();
        let pa = state.model_a.forward_heads(&mut tape, &ba, xa, d, None).unwrap()[&d];
        let pb = state.model_b.forward_heads(&mut tape, &bb, xb, d, None).unwrap()[&d];
        let ta = tape.detach(pa).unwrap();
        let l = tape.hybrid_loss(ta, pb).unwrap();
        let mut g = tape.backward(l).unwrap();
        for v in ba.vars() {
            assert!(g.take(*v).unwrap().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_eta_batch_leaves_weights_untouched() {
        let cfg = tiny_config(2, 8, 2);
        let mut state = TrainState::new(cfg).unwrap();
        let before = state.clone();
        let pairs = vec![
            pair(ramp(8, 3), ramp(8, 7), Polarity::Negative, 0.0),
            pair(ramp(8, 11), ramp(8, 13), Polarity::Positive, 0.0),
        ];
        let m = train_step(&mut state, &pairs).unwrap();
        assert_eq!(m.grad_norm, 0.0);
        assert_eq!(m.total_loss, 0.0);
        assert_eq!(state.model_a, before.model_a);
        assert_eq!(state.model_b, before.model_b);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = tiny_config(2, 8, 2);
        let mut state = TrainState::new(cfg).unwrap();
        let pairs = vec![pair(ramp(8, 3), ramp(8, 7), Polarity::Negative, 0.7)];
        train_step(&mut state, &pairs).unwrap();
        let bytes = state.to_checkpoint().to_bytes();
        let back = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, state);
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn weight_sharing_keeps_models_equal() {
        let mut cfg = tiny_config(2, 8, 2);
        cfg.train.weight_sharing = true;
        let mut state = TrainState::new(cfg).unwrap();
        let pairs = vec![pair(ramp(8, 3), ramp(8, 7), Polarity::Negative, 1.0)];
        train_step(&mut state, &pairs).unwrap();
        assert_eq!(state.model_a, state.model_b);
        assert_ne!(state.model_a, TrainState::new(state.config.clone()).unwrap().model_a);
    }

    #[test]
    fn untrained_inference_is_never_saturated() {
        let cfg = tiny_config(2, 8, 2);
        let state = TrainState::new(cfg).unwrap();
        let ck = state.to_checkpoint();
        let model = InferenceModel::from_checkpoint(&ck).unwrap();
        let img = ramp(16, 9);
        let p = model.marker_probability(&img, None).unwrap();
        assert!(p.pixels().iter().all(|&v| v > 0.0 && v < 1.0));
        let m = model.infer(&img, None, 0.5).unwrap();
        assert_eq!((m.width(), m.height()), (16, 16));
        assert!(model.marker_probability(&ramp(12, 1), None).is_err());
    }

    #[test]
    fn pruned_checkpoint_matches_full_inference() {
        let cfg = tiny_config(3, 8, 2);
        let state = TrainState::new(cfg).unwrap();
        let model = InferenceModel::from_checkpoint(&state.to_checkpoint()).unwrap();
        let pruned = InferenceModel::from_checkpoint(&model.pruned_checkpoint(1).unwrap()).unwrap();
        let img = ramp(16, 17);
        let a = model.marker_probability(&img, Some(1)).unwrap();
        let b = pruned.marker_probability(&img, None).unwrap();
        assert_eq!(a, b);
        assert!(TrainState::from_checkpoint(&model.pruned_checkpoint(1).unwrap()).is_err());
    }
}
