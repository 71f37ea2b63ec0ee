//! Nested UNet++ lattice.
//!
//! Node `X^{i,j}` sits at encoder level `i` and skip stage `j`, for
//! `0 <= i + j <= L - 1`. Level `i` carries `base_channels * 2^i` channels at
//! side `input_size / 2^i`.
//!
//! Backbone nodes `X^{i,0}` hold two convolutions. The first (stride 1) produces
//! the level-`i` feature map that the nested nodes consume. The second has
//! stride 2 and produces the input of level `i + 1`; at the deepest level it
//! has stride 1 and its output is `X^{L-1,0}`. When level `i` is a repeat level
//! an extra block of two stride-1 convolutions runs between the two, so the
//! level holds two consecutive blocks of the same dimensions.
//!
//! Nested nodes `X^{i,j}`, `j >= 1`, apply two stride-1 convolutions to
//! `concat(X^{i,0}, ..., X^{i,j-1}, upsample(X^{i+1,j-1}))`, where upsampling
//! is bilinear 2x. A separate 1×1 head on `X^{0,j}` followed by a channel
//! softmax gives the class probabilities at supervision depth `j`. Head `d`
//! only depends on nodes with `i + j <= d`, which is what makes pruning exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

/// Output classes: 0 = background, 1 = marker (before orientation calibration).
pub const CLASSES: usize = 2;

const KERNEL_LADDER: [usize; 5] = [3, 3, 5, 5, 7];

/// Kernel sizes per level: `[3, 3, 5, 5, 7]` truncated, or extended with 7s.
pub fn default_kernel_schedule(levels: usize) -> Vec<usize> {
    (0..levels)
        .map(|i| KERNEL_LADDER[i.min(KERNEL_LADDER.len() - 1)])
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RepeatLevels {
    Fixed(BTreeSet<usize>),
    /// Each level is selected independently with probability 1/2, drawn from
    /// `repeat_seed`.
    Random,
}

impl Default for RepeatLevels {
    fn default() -> Self {
        RepeatLevels::Fixed(BTreeSet::new())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnetPPConfig {
    pub levels: usize,
    pub input_size: usize,
    pub base_channels: usize,
    pub kernel_schedule: Vec<usize>,
    pub repeat_levels: RepeatLevels,
    pub repeat_seed: u64,
    /// Supervision depths with a head, ascending.
    pub heads: Vec<usize>,
}

impl Default for UnetPPConfig {
    fn default() -> Self {
        Self::with_levels(5, 256, 16)
    }
}

impl UnetPPConfig {
    /// Config with the default kernel schedule and a head at every depth.
    pub fn with_levels(levels: usize, input_size: usize, base_channels: usize) -> Self {
        Self {
            levels,
            input_size,
            base_channels,
            kernel_schedule: default_kernel_schedule(levels),
            repeat_levels: RepeatLevels::default(),
            repeat_seed: 0,
            heads: (1..levels).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l < 2 {
            return Err(Error::Config(format!("levels must be at least 2, got {l}")));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        let factor = 1usize << (l - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^(levels-1) = {factor}",
                self.input_size
            )));
        }
        if self.kernel_schedule.len() != l {
            return Err(Error::Config(format!(
                "kernel_schedule has {} entries, expected {l}",
                self.kernel_schedule.len()
            )));
        }
        if let Some(k) = self.kernel_schedule.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("kernel size {k} is not odd")));
        }
        if self.kernel_schedule.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "kernel_schedule {:?} must be nondecreasing",
                self.kernel_schedule
            )));
        }
        if let RepeatLevels::Fixed(levels) = &self.repeat_levels {
            if let Some(bad) = levels.iter().find(|&&i| i >= l) {
                return Err(Error::Config(format!("repeat level {bad} outside 0..{l}")));
            }
        }
        if self.heads.is_empty() {
            return Err(Error::Config("at least one head is required".into()));
        }
        if self.heads.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("heads must be strictly ascending".into()));
        }
        if let Some(bad) = self.heads.iter().find(|&&d| d == 0 || d >= l) {
            return Err(Error::Config(format!("head depth {bad} outside 1..{l}")));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn side(&self, level: usize) -> usize {
        self.input_size >> level
    }

    pub fn kernel(&self, level: usize) -> usize {
        self.kernel_schedule[level]
    }

    pub fn deepest_head(&self) -> usize {
        *self.heads.last().expect("validated config has heads")
    }

    pub fn resolved_repeat_levels(&self) -> BTreeSet<usize> {
        match &self.repeat_levels {
            RepeatLevels::Fixed(levels) => levels.clone(),
            RepeatLevels::Random => {
                let mut rng = seed::rng(self.repeat_seed, "repeat_levels");
                (0..self.levels).filter(|_| rng.random_bool(0.5)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
}

impl Conv {
    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size() - 1) / 2
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub conv1: Conv,
    pub conv2: Conv,
}

/// Identifies one convolution of the graph; defines the canonical parameter
/// order and naming.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConvSlot {
    Node { level: usize, stage: usize, conv: u8 },
    Repeat { level: usize, conv: u8 },
    Head { depth: usize },
}

impl ConvSlot {
    pub fn name(&self) -> String {
        match *self {
            ConvSlot::Node { level, stage, conv } => format!("node_{level}_{stage}.conv{conv}"),
            ConvSlot::Repeat { level, conv } => format!("repeat_{level}.conv{conv}"),
            ConvSlot::Head { depth } => format!("head_{depth}"),
        }
    }
}

/// Spatial and channel shape of a node output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeShape {
    pub channels: usize,
    pub side: usize,
}

/// Per-pixel class probabilities, `B × CLASSES × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(pub Tensor<f32>);

impl ProbMap {
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    /// Probabilities of one class for batch item `b`, row-major.
    pub fn class_plane(&self, b: usize, class: usize) -> &[f32] {
        let d = self.0.dims();
        let hw = d[2] * d[3];
        &self.0.data()[(b * d[1] + class) * hw..][..hw]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    config: UnetPPConfig,
    repeat: BTreeSet<usize>,
    nodes: BTreeMap<(usize, usize), Block>,
    repeats: BTreeMap<usize, Block>,
    heads: BTreeMap<usize, Conv>,
    depth_limit: usize,
}

impl ModelGraph {
    /// Elaborates the lattice and draws He fan-in normal weights (zero
    /// biases) from a stream seeded by `init_seed`, in parameter order.
    pub fn build(config: &UnetPPConfig, init_seed: u64) -> Result<Self> {
        let mut rng = seed::rng(init_seed, "weights");
        Self::elaborate(config, |dims| {
            let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
            let std = (2.0 / fan_in).sqrt();
            Tensor::from_fn(dims, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * std) as f32
            })
        })
    }

    fn elaborate(config: &UnetPPConfig, mut init: impl FnMut(&[usize]) -> Tensor<f32>) -> Result<Self> {
        config.validate()?;
        let l = config.levels;
        let repeat = config.resolved_repeat_levels();
        let mut conv = |cin: usize, cout: usize, k: usize, stride: usize| Conv {
            weight: init(&[cout, cin, k, k]),
            bias: Tensor::zeros(&[cout]),
            stride,
        };
        let mut nodes = BTreeMap::new();
        let mut repeats = BTreeMap::new();
        for i in 0..l {
            let c = config.channels(i);
            let k = config.kernel(i);
            let cin = if i == 0 { 1 } else { c };
            let conv1 = conv(cin, c, k, 1);
            if repeat.contains(&i) {
                let extra = Block {
                    conv1: conv(c, c, k, 1),
                    conv2: conv(c, c, k, 1),
                };
                repeats.insert(i, extra);
            }
            let conv2 = if i + 1 < l {
                conv(c, config.channels(i + 1), k, 2)
            } else {
                conv(c, c, k, 1)
            };
            nodes.insert((i, 0), Block { conv1, conv2 });
        }
        for j in 1..l {
            for i in 0..l - j {
                let c = config.channels(i);
                let k = config.kernel(i);
                let cin = j * c + config.channels(i + 1);
                let block = Block {
                    conv1: conv(cin, c, k, 1),
                    conv2: conv(c, c, k, 1),
                };
                nodes.insert((i, j), block);
            }
        }
        let heads = config
            .heads
            .iter()
            .map(|&d| (d, conv(config.channels(0), CLASSES, 1, 1)))
            .collect();
        Ok(Self {
            config: config.clone(),
            repeat,
            nodes,
            repeats,
            heads,
            depth_limit: l - 1,
        })
    }

    pub fn config(&self) -> &UnetPPConfig {
        &self.config
    }

    pub fn repeat_levels(&self) -> &BTreeSet<usize> {
        &self.repeat
    }

    /// Deepest supervision depth this graph can evaluate.
    pub fn depth_limit(&self) -> usize {
        self.depth_limit
    }

    /// `Some(d)` if the graph was pruned to depth `d`.
    pub fn pruned_depth(&self) -> Option<usize> {
        (self.depth_limit < self.config.levels - 1).then_some(self.depth_limit)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn block_count(&self) -> usize {
        self.nodes.len() + self.repeats.len()
    }

    pub fn head_depths(&self) -> impl Iterator<Item = usize> + '_ {
        self.heads.keys().copied()
    }

    pub fn node(&self, level: usize, stage: usize) -> Option<&Block> {
        self.nodes.get(&(level, stage))
    }

    pub fn repeat_block(&self, level: usize) -> Option<&Block> {
        self.repeats.get(&level)
    }

    pub fn node_shape(&self, level: usize, _stage: usize) -> NodeShape {
        NodeShape {
            channels: self.config.channels(level),
            side: self.config.side(level),
        }
    }

    /// Shape table for all present nodes.
    pub fn shape_table(&self) -> BTreeMap<(usize, usize), NodeShape> {
        self.nodes
            .keys()
            .map(|&(i, j)| ((i, j), self.node_shape(i, j)))
            .collect()
    }

    /// Canonical conv order: lattice nodes by `(level, stage)`, then repeat
    /// blocks by level, then heads by depth.
    pub fn conv_slots(&self) -> Vec<ConvSlot> {
        let mut slots = Vec::new();
        for &(level, stage) in self.nodes.keys() {
            for conv in [1, 2] {
                slots.push(ConvSlot::Node { level, stage, conv });
            }
        }
        for &level in self.repeats.keys() {
            for conv in [1, 2] {
                slots.push(ConvSlot::Repeat { level, conv });
            }
        }
        slots.extend(self.heads.keys().map(|&depth| ConvSlot::Head { depth }));
        slots
    }

    pub fn conv(&self, slot: ConvSlot) -> &Conv {
        self.conv_lookup(slot).expect("slot from this graph")
    }

    fn conv_lookup(&self, slot: ConvSlot) -> Option<&Conv> {
        fn pick(b: &Block, c: u8) -> &Conv {
            if c == 1 { &b.conv1 } else { &b.conv2 }
        }
        match slot {
            ConvSlot::Node { level, stage, conv } => {
                self.nodes.get(&(level, stage)).map(|b| pick(b, conv))
            }
            ConvSlot::Repeat { level, conv } => self.repeats.get(&level).map(|b| pick(b, conv)),
            ConvSlot::Head { depth } => self.heads.get(&depth),
        }
    }

    fn conv_mut(&mut self, slot: ConvSlot) -> Option<&mut Conv> {
        fn pick(b: &mut Block, c: u8) -> &mut Conv {
            if c == 1 { &mut b.conv1 } else { &mut b.conv2 }
        }
        match slot {
            ConvSlot::Node { level, stage, conv } => {
                self.nodes.get_mut(&(level, stage)).map(|b| pick(b, conv))
            }
            ConvSlot::Repeat { level, conv } => {
                self.repeats.get_mut(&level).map(|b| pick(b, conv))
            }
            ConvSlot::Head { depth } => self.heads.get_mut(&depth),
        }
    }

    /// Named parameters in canonical order: `<slot>.weight`, `<slot>.bias`.
    pub fn parameters(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for slot in self.conv_slots() {
            let conv = self.conv(slot);
            let name = slot.name();
            out.push((format!("{name}.weight"), &conv.weight));
            out.push((format!("{name}.bias"), &conv.bias));
        }
        debug_assert!({
            let names: BTreeSet<_> = out.iter().map(|(n, _)| n.as_str()).collect();
            names.len() == out.len()
        });
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters().into_iter().map(|(n, _)| n).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Visits every parameter mutably, in canonical order.
    pub fn for_each_parameter_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<f32>)) {
        for slot in self.conv_slots() {
            let name = slot.name();
            let conv = self.conv_mut(slot).expect("slot from this graph");
            f(&format!("{name}.weight"), &mut conv.weight);
            f(&format!("{name}.bias"), &mut conv.bias);
        }
    }

    /// Replaces every parameter from a name → tensor map. The map must hold
    /// exactly this graph's parameter names with matching dims.
    pub fn load_parameters(&mut self, mut params: BTreeMap<String, Tensor<f32>>) -> Result<()> {
        let expected: BTreeSet<String> = self.parameter_names().into_iter().collect();
        if let Some(unknown) = params.keys().find(|k| !expected.contains(*k)) {
            return Err(Error::UnknownParameter(unknown.clone()));
        }
        let mut failure = None;
        self.for_each_parameter_mut(|name, slot| {
            if failure.is_some() {
                return;
            }
            match params.remove(name) {
                None => failure = Some(Error::MissingParameter(name.to_string())),
                Some(t) if t.dims() != slot.dims() => {
                    failure = Some(Error::shape(
                        "load_parameters",
                        format!("{name}: expected {:?}, got {:?}", slot.dims(), t.dims()),
                    ))
                }
                Some(t) => *slot = t,
            }
        });
        failure.map_or(Ok(()), Err)
    }

    /// Graph with the same config shape (optionally pruned) and zero weights,
    /// ready for [`ModelGraph::load_parameters`].
    pub fn skeleton(config: &UnetPPConfig, pruned_depth: Option<usize>) -> Result<Self> {
        let full = Self::elaborate(config, Tensor::zeros)?;
        match pruned_depth {
            Some(d) => full.pruned(d),
            None => Ok(full),
        }
    }

    /// Subgraph holding only what head `depth` needs: nodes with
    /// `i + j <= depth`, repeat blocks at those levels, and head `depth`.
    pub fn pruned(&self, depth: usize) -> Result<Self> {
        if !self.heads.contains_key(&depth) {
            return Err(Error::InvalidArgument(format!("no head at depth {depth}")));
        }
        let mut config = self.config.clone();
        config.heads = vec![depth];
        Ok(Self {
            config,
            repeat: self.repeat.clone(),
            nodes: self
                .nodes
                .iter()
                .filter(|(&(i, j), _)| i + j <= depth)
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
            repeats: self
                .repeats
                .iter()
                .filter(|(&i, _)| i <= depth)
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
            heads: BTreeMap::from([(depth, self.heads[&depth].clone())]),
            depth_limit: depth,
        })
    }

    /// Registers every parameter on `tape` as a leaf.
    pub fn bind<F: Scalar>(&self, tape: &mut Tape<F>, requires_grad: bool) -> BoundModel {
        let vars: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.cast(), requires_grad))
            .collect();
        self.bind_vars(&vars).expect("one var per parameter")
    }

    /// Interprets `vars` (one per parameter, canonical order) as this graph.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let slots = self.conv_slots();
        if vars.len() != 2 * slots.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter vars, got {}",
                2 * slots.len(),
                vars.len()
            )));
        }
        let convs = slots
            .iter()
            .zip(vars.chunks(2))
            .map(|(slot, pair)| {
                let conv = self.conv(*slot);
                let bound = BoundConv {
                    weight: pair[0],
                    bias: pair[1],
                    stride: conv.stride,
                    padding: conv.padding(),
                };
                (*slot, bound)
            })
            .collect();
        Ok(BoundModel {
            convs,
            vars: vars.to_vec(),
        })
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        match dims {
            [_, 1, h, w] if *h == s && *w == s => Ok(()),
            _ => Err(Error::shape(
                "unetpp forward",
                format!("expected B×1×{s}×{s}, got {dims:?}"),
            )),
        }
    }

    fn resolve_depth(&self, depth: Option<usize>) -> Result<usize> {
        let depth = depth.unwrap_or_else(|| self.config.deepest_head());
        if !self.heads.contains_key(&depth) {
            return Err(Error::InvalidArgument(format!(
                "unknown supervision depth {depth}; available {:?}",
                self.heads.keys().collect::<Vec<_>>()
            )));
        }
        Ok(depth)
    }

    /// Probabilities from every head up to `depth`, keyed by depth. Only nodes
    /// with `i + j <= depth` are evaluated; `trace` records them in order.
    pub fn forward_heads<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundModel,
        input: Var,
        depth: usize,
        mut trace: Option<&mut Vec<(usize, usize)>>,
    ) -> Result<BTreeMap<usize, Var>> {
        self.check_input(tape.get(input)?.dims())?;
        if depth > self.depth_limit || depth == 0 {
            return Err(Error::InvalidArgument(format!(
                "depth {depth} outside 1..={}",
                self.depth_limit
            )));
        }
        let last = self.config.levels - 1;
        let mut x: BTreeMap<(usize, usize), Var> = BTreeMap::new();
        let mut record = |id: (usize, usize)| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(id);
            }
        };

        let mut level_input = input;
        for i in 0..=depth {
            let slot1 = ConvSlot::Node { level: i, stage: 0, conv: 1 };
            let slot2 = ConvSlot::Node { level: i, stage: 0, conv: 2 };
            let mut h = bound.conv_relu(tape, slot1, level_input)?;
            if self.repeats.contains_key(&i) {
                h = bound.conv_relu(tape, ConvSlot::Repeat { level: i, conv: 1 }, h)?;
                h = bound.conv_relu(tape, ConvSlot::Repeat { level: i, conv: 2 }, h)?;
            }
            if i == last {
                h = bound.conv_relu(tape, slot2, h)?;
            } else if i < depth {
                level_input = bound.conv_relu(tape, slot2, h)?;
            }
            self.debug_check_shape(tape, h, i);
            x.insert((i, 0), h);
            record((i, 0));
        }
        for j in 1..=depth {
            for i in 0..=depth - j {
                let mut parts: Vec<Var> = (0..j).map(|s| x[&(i, s)]).collect();
                parts.push(tape.upsample_bilinear2x(x[&(i + 1, j - 1)])?);
                let cat = tape.concat_channels(&parts)?;
                let h = bound.conv_relu(tape, ConvSlot::Node { level: i, stage: j, conv: 1 }, cat)?;
                let h = bound.conv_relu(tape, ConvSlot::Node { level: i, stage: j, conv: 2 }, h)?;
                self.debug_check_shape(tape, h, i);
                x.insert((i, j), h);
                record((i, j));
            }
        }
        let mut out = BTreeMap::new();
        for &d in self.heads.keys().filter(|&&d| d <= depth) {
            let logits = bound.conv(tape, ConvSlot::Head { depth: d }, x[&(0, d)])?;
            out.insert(d, tape.softmax_channels(logits)?);
        }
        Ok(out)
    }

    fn debug_check_shape<F: Scalar>(&self, tape: &Tape<F>, v: Var, level: usize) {
        if cfg!(debug_assertions) {
            let d = tape.value(v).dims();
            let shape = self.node_shape(level, 0);
            debug_assert_eq!((d[1], d[2], d[3]), (shape.channels, shape.side, shape.side));
        }
    }

    /// Probabilities at `depth` (default: deepest head) for a `B×1×S×S` batch.
    pub fn forward(&self, image: &Tensor<f32>, depth: Option<usize>) -> Result<ProbMap> {
        self.forward_traced(image, depth).map(|(p, _)| p)
    }

    /// Like [`ModelGraph::forward`], also returning the evaluated nodes.
    pub fn forward_traced(
        &self,
        image: &Tensor<f32>,
        depth: Option<usize>,
    ) -> Result<(ProbMap, Vec<(usize, usize)>)> {
        let depth = self.resolve_depth(depth)?;
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let input = tape.constant(image.clone());
        let mut trace = Vec::new();
        let heads = self.forward_heads(&mut tape, &bound, input, depth, Some(&mut trace))?;
        let probs = tape.value(heads[&depth]).clone();
        Ok((ProbMap(probs), trace))
    }

    /// Text table of nodes, shapes, kernel sizes and parameter counts.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let _ = writeln!(
            out,
            "unet++ levels={} input={} base={} kernels={:?} repeat={:?} heads={:?}",
            c.levels,
            c.input_size,
            c.base_channels,
            c.kernel_schedule,
            self.repeat,
            self.heads.keys().collect::<Vec<_>>()
        );
        let _ = writeln!(out, "{:<12} {:>18} {:>7} {:>10}", "block", "output", "kernel", "params");
        let row = |out: &mut String, name: String, shape: NodeShape, block: &Block| {
            let _ = writeln!(
                out,
                "{:<12} {:>18} {:>7} {:>10}",
                name,
                format!("{}×{}×{}", shape.channels, shape.side, shape.side),
                format!("{0}×{0}", block.conv1.kernel_size()),
                block.conv1.parameter_count() + block.conv2.parameter_count()
            );
        };
        for (&(i, j), block) in &self.nodes {
            row(&mut out, format!("X^{{{i},{j}}}"), self.node_shape(i, j), block);
        }
        for (&i, block) in &self.repeats {
            row(&mut out, format!("repeat {i}"), self.node_shape(i, 0), block);
        }
        for (&d, head) in &self.heads {
            let _ = writeln!(
                out,
                "{:<12} {:>18} {:>7} {:>10}",
                format!("head {d}"),
                format!("{}×{}×{}", CLASSES, c.input_size, c.input_size),
                "1×1",
                head.parameter_count()
            );
        }
        let _ = writeln!(out, "total parameters: {}", self.parameter_count());
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundConv {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

/// A [`ModelGraph`]'s parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    convs: BTreeMap<ConvSlot, BoundConv>,
    vars: Vec<Var>,
}

impl BoundModel {
    /// Parameter vars in canonical order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv<F: Scalar>(&self, tape: &mut Tape<F>, slot: ConvSlot, x: Var) -> Result<Var> {
        let c = self
            .convs
            .get(&slot)
            .ok_or_else(|| Error::MissingParameter(slot.name()))?;
        tape.conv2d(x, c.weight, Some(c.bias), c.stride, c.padding)
    }

    fn conv_relu<F: Scalar>(&self, tape: &mut Tape<F>, slot: ConvSlot, x: Var) -> Result<Var> {
        let y = self.conv(tape, slot, x)?;
        tape.relu(y)
    }
}
