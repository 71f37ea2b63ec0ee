//! Run configuration: `key = value` lines, `#` comments.
//!
//! Every key has a default, listed in [`KEYS`]; unknown keys are rejected
//! with their line number. [`RunConfig::to_text`] writes every key in a fixed
//! order and parses back to the same value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::augment::PairPolicy;
use crate::error::{Error, Result};
use crate::unetpp::{default_kernel_schedule, RepeatLevels, UnetPPConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("optim.{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("optim.eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Detach the peer prediction used as target.
    pub stop_gradient: bool,
    /// Drive both branches with model_a's weights.
    pub weight_sharing: bool,
    /// Average the pair loss over every head instead of the deepest only.
    pub deep_supervision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            seed: 0,
            checkpoint_every: 50,
            stop_gradient: true,
            weight_sharing: false,
            deep_supervision: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub threshold: f64,
    /// Supervision depth; `None` means the deepest head.
    pub depth: Option<usize>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            depth: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `input_size` always equals `pairs.tile_size`: models train on tiles.
    pub model: UnetPPConfig,
    pub pairs: PairPolicy,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub image_size: usize,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pairs = PairPolicy::default();
        let model = UnetPPConfig::with_levels(5, pairs.tile_size, 16);
        Self {
            model,
            pairs,
            optim: OptimizerConfig::default(),
            train: TrainConfig::default(),
            image_size: 256,
            infer: InferConfig::default(),
        }
    }
}

pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

/// Every accepted key with its default.
pub const KEYS: &[KeyDoc] = &[
    KeyDoc { key: "model.levels", default: "5", doc: "encoder levels L (>= 2)" },
    KeyDoc { key: "model.base_channels", default: "16", doc: "channels at level 0; doubled per level" },
    KeyDoc { key: "model.kernel_schedule", default: "auto", doc: "comma list of L odd, nondecreasing kernel sizes; auto = 3,3,5,5,7 prefix" },
    KeyDoc { key: "model.repeat_levels", default: "none", doc: "levels holding an extra same-size block: none, random, or comma list" },
    KeyDoc { key: "model.repeat_seed", default: "0", doc: "seed for random repeat levels" },
    KeyDoc { key: "model.heads", default: "all", doc: "supervision depths with a head: all, or comma list in 1..L-1" },
    KeyDoc { key: "pairs.tile_size", default: "64", doc: "slice side T; also the model input size" },
    KeyDoc { key: "pairs.augment_positives", default: "4", doc: "slice/augmented-twin pairs per step" },
    KeyDoc { key: "pairs.normal_pairs", default: "4", doc: "pairs of slices from two negative images per step" },
    KeyDoc { key: "pairs.negative_pairs", default: "4", doc: "positive-image/negative-image slice pairs per step" },
    KeyDoc { key: "pairs.default_eta", default: "0.5", doc: "eta for negative pairs when the manifest gives none" },
    KeyDoc { key: "optim.kind", default: "adam", doc: "adam or sgd" },
    KeyDoc { key: "optim.lr", default: "0.001", doc: "learning rate" },
    KeyDoc { key: "optim.beta1", default: "0.9", doc: "adam first-moment decay" },
    KeyDoc { key: "optim.beta2", default: "0.999", doc: "adam second-moment decay" },
    KeyDoc { key: "optim.eps", default: "0.00000001", doc: "adam denominator offset" },
    KeyDoc { key: "train.steps", default: "200", doc: "optimizer steps" },
    KeyDoc { key: "train.seed", default: "0", doc: "master seed for init, pair draws and baselines" },
    KeyDoc { key: "train.checkpoint_every", default: "50", doc: "checkpoint interval in steps; 0 = end only" },
    KeyDoc { key: "train.stop_gradient", default: "true", doc: "detach the peer output used as target" },
    KeyDoc { key: "train.weight_sharing", default: "false", doc: "siamese mode: both branches use model_a" },
    KeyDoc { key: "train.deep_supervision", default: "true", doc: "average pair losses over all heads" },
    KeyDoc { key: "data.image_size", default: "256", doc: "preprocessed image side S; tile_size must divide it" },
    KeyDoc { key: "infer.threshold", default: "0.5", doc: "marker probability threshold" },
    KeyDoc { key: "infer.depth", default: "deepest", doc: "supervision depth used for inference" },
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got `{v}`")),
    }
}

fn parse_list(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn join(list: &[usize]) -> String {
    list.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Raw values before the model section is elaborated; `auto` entries depend
/// on `model.levels`, which may appear later in the file.
#[derive(Default)]
struct Pending {
    kernels: Option<Vec<usize>>,
    heads: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let (cfg, state) = Self::parse_with_state(text)?;
        if let Some(k) = state.keys().next() {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        Ok(cfg)
    }

    /// Also accepts `state.*` keys (checkpoint headers) and returns them.
    pub fn parse_with_state(text: &str) -> Result<(Self, BTreeMap<String, String>)> {
        let mut cfg = RunConfig::default();
        let mut pending = Pending::default();
        let mut state = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ConfigLine { line, msg };
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            if let Some(rest) = key.strip_prefix("state.") {
                state.insert(rest.to_string(), value.to_string());
                continue;
            }
            cfg.set(key, value, &mut pending).map_err(err)?;
        }
        let levels = cfg.model.levels;
        cfg.model.kernel_schedule = pending.kernels.unwrap_or_else(|| default_kernel_schedule(levels));
        cfg.model.heads = pending.heads.unwrap_or_else(|| (1..levels).collect());
        cfg.model.input_size = cfg.pairs.tile_size;
        cfg.validate()?;
        Ok((cfg, state))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::ConfigLine { line, msg } => Error::ConfigLine {
                line,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }

    fn set(&mut self, key: &str, v: &str, pending: &mut Pending) -> std::result::Result<(), String> {
        match key {
            "model.levels" => self.model.levels = parse_num(key, v)?,
            "model.base_channels" => self.model.base_channels = parse_num(key, v)?,
            "model.kernel_schedule" => pending.kernels = (v != "auto").then(|| parse_list(key, v)).transpose()?,
            "model.repeat_levels" => {
                self.model.repeat_levels = match v {
                    "none" => RepeatLevels::Fixed(BTreeSet::new()),
                    "random" => RepeatLevels::Random,
                    _ => RepeatLevels::Fixed(parse_list(key, v)?.into_iter().collect()),
                }
            }
            "model.repeat_seed" => self.model.repeat_seed = parse_num(key, v)?,
            "model.heads" => pending.heads = (v != "all").then(|| parse_list(key, v)).transpose()?,
            "pairs.tile_size" => self.pairs.tile_size = parse_num(key, v)?,
            "pairs.augment_positives" => self.pairs.augment_positives = parse_num(key, v)?,
            "pairs.normal_pairs" => self.pairs.normal_pairs = parse_num(key, v)?,
            "pairs.negative_pairs" => self.pairs.negative_pairs = parse_num(key, v)?,
            "pairs.default_eta" => self.pairs.default_eta = parse_num(key, v)?,
            "optim.kind" => {
                self.optim.kind = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(format!("{key}: expected adam or sgd, got `{v}`")),
                }
            }
            "optim.lr" => self.optim.lr = parse_num(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse_num(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse_num(key, v)?,
            "optim.eps" => self.optim.eps = parse_num(key, v)?,
            "train.steps" => self.train.steps = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, v)?,
            "train.stop_gradient" => self.train.stop_gradient = parse_bool(key, v)?,
            "train.weight_sharing" => self.train.weight_sharing = parse_bool(key, v)?,
            "train.deep_supervision" => self.train.deep_supervision = parse_bool(key, v)?,
            "data.image_size" => self.image_size = parse_num(key, v)?,
            "infer.threshold" => self.infer.threshold = parse_num(key, v)?,
            "infer.depth" => self.infer.depth = (v != "deepest").then(|| parse_num(key, v)).transpose()?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.input_size != self.pairs.tile_size {
            return Err(Error::Config("model input size must equal pairs.tile_size".into()));
        }
        self.model.validate()?;
        self.optim.validate()?;
        if self.pairs.total() == 0 {
            return Err(Error::Config("pair policy requests no pairs".into()));
        }
        if !(0.0..=1.0).contains(&self.pairs.default_eta) {
            return Err(Error::Config("pairs.default_eta must lie in [0, 1]".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.pairs.tile_size) {
            return Err(Error::Config(format!(
                "pairs.tile_size {} must divide data.image_size {}",
                self.pairs.tile_size, self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.infer.threshold) {
            return Err(Error::Config("infer.threshold must lie in [0, 1]".into()));
        }
        if let Some(d) = self.infer.depth {
            if !self.model.heads.contains(&d) {
                return Err(Error::Config(format!("infer.depth {d} has no head")));
            }
        }
        Ok(())
    }

    /// Canonical text with every key.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let repeat = match &m.repeat_levels {
            RepeatLevels::Random => "random".to_string(),
            RepeatLevels::Fixed(s) if s.is_empty() => "none".to_string(),
            RepeatLevels::Fixed(s) => join(&s.iter().copied().collect::<Vec<_>>()),
        };
        let bool_s = |b: bool| if b { "true" } else { "false" };
        let entries: Vec<(&str, String)> = vec![
            ("model.levels", m.levels.to_string()),
            ("model.base_channels", m.base_channels.to_string()),
            ("model.kernel_schedule", join(&m.kernel_schedule)),
            ("model.repeat_levels", repeat),
            ("model.repeat_seed", m.repeat_seed.to_string()),
            ("model.heads", join(&m.heads)),
            ("pairs.tile_size", self.pairs.tile_size.to_string()),
            ("pairs.augment_positives", self.pairs.augment_positives.to_string()),
            ("pairs.normal_pairs", self.pairs.normal_pairs.to_string()),
            ("pairs.negative_pairs", self.pairs.negative_pairs.to_string()),
            ("pairs.default_eta", self.pairs.default_eta.to_string()),
            (
                "optim.kind",
                match self.optim.kind {
                    OptimizerKind::Adam => "adam".into(),
                    OptimizerKind::Sgd => "sgd".into(),
                },
            ),
            ("optim.lr", self.optim.lr.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("train.stop_gradient", bool_s(self.train.stop_gradient).into()),
            ("train.weight_sharing", bool_s(self.train.weight_sharing).into()),
            ("train.deep_supervision", bool_s(self.train.deep_supervision).into()),
            ("data.image_size", self.image_size.to_string()),
            ("infer.threshold", self.infer.threshold.to_string()),
            (
                "infer.depth",
                self.infer.depth.map_or("deepest".into(), |d| d.to_string()),
            ),
        ];
        debug_assert_eq!(entries.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Help text listing every key, default and meaning.
    pub fn key_help() -> String {
        let mut out = String::from("Config keys (`key = value`, `#` comments):\n");
        for k in KEYS {
            let _ = writeln!(out, "  {:<26} default {:<11} {}", k.key, k.default, k.doc);
        }
        out
    }
}
