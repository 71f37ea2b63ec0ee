//! Synthetic phantoms, the dataset manifest, organ masks and preprocessing.
//!
//! A dataset directory looks like
//!
//! ```text
//! manifest.tsv      path  label  organ-mask  eta  split
//! images/           img_0000.pgm ...
//! organ_masks/      same basenames
//! eval_masks/       same basenames; hidden lesion masks, evaluation only
//! ```
//!
//! Manifest fields are tab-separated; `-` marks an absent optional field and
//! `#` starts a comment line. The split column may be omitted (defaults to
//! `train`). Paths are relative to the manifest's directory.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const IMAGES_DIR: &str = "images";
pub const ORGAN_MASKS_DIR: &str = "organ_masks";
/// Hidden lesion masks. Nothing reachable from training may read this.
pub const EVAL_MASKS_DIR: &str = "eval_masks";
pub const ETA_TABLE_FILE: &str = "eta_table.tsv";
pub const CROP_MARGIN: usize = 4;
/// Manifest header line marking a set written by preprocessing.
pub const PREPROCESSED_TAG: &str = "# preprocessed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Positive,
    Negative,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "pos",
            Label::Negative => "neg",
        })
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pos" | "positive" => Ok(Label::Positive),
            "neg" | "negative" => Ok(Label::Negative),
            _ => Err(format!("label must be pos or neg, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("split must be train, val or test, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl FromStr for Difficulty {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(format!("difficulty must be easy or hard, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub size: usize,
    pub background: f32,
    pub organ_intensity: f32,
    pub texture_amplitude: f32,
    pub lesion_intensity: f32,
    pub noise_std: f32,
    /// Lesion radius range as a fraction of the image side.
    pub lesion_radius: (f64, f64),
}

impl PhantomParams {
    pub fn new(size: usize, difficulty: Difficulty) -> Self {
        match difficulty {
            Difficulty::Easy => Self {
                size,
                background: 0.08,
                organ_intensity: 0.45,
                texture_amplitude: 0.04,
                lesion_intensity: 0.95,
                noise_std: 0.02,
                lesion_radius: (0.07, 0.11),
            },
            Difficulty::Hard => Self {
                size,
                background: 0.1,
                organ_intensity: 0.45,
                texture_amplitude: 0.06,
                lesion_intensity: 0.62,
                noise_std: 0.06,
                lesion_radius: (0.04, 0.07),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomImage {
    pub pixels: Image,
    pub label: Label,
    pub hidden_mask: Mask,
    pub organ_mask: Mask,
    pub organ: Ellipse,
    pub lesions: Vec<Lesion>,
    pub seed: u64,
}

fn disk_pixels(size: usize, l: &Lesion) -> impl Iterator<Item = (usize, usize)> + '_ {
    let lo = |c: f64| ((c - l.radius).floor().max(0.0)) as usize;
    let hi = |c: f64| ((c + l.radius).ceil().max(0.0) as usize).min(size);
    let (r0, r1, c0, c1) = (lo(l.cy), hi(l.cy), lo(l.cx), hi(l.cx));
    (r0..r1)
        .flat_map(move |r| (c0..c1).map(move |c| (r, c)))
        .filter(move |&(r, c)| {
            let (dy, dx) = (r as f64 + 0.5 - l.cy, c as f64 + 0.5 - l.cx);
            dy * dy + dx * dx <= l.radius * l.radius
        })
}

/// Draws one phantom. Positives carry 1–3 disk lesions entirely inside the
/// organ.
pub fn generate_phantom(params: &PhantomParams, label: Label, seed: u64) -> PhantomImage {
    let mut rng = seed::rng(seed, "phantom");
    let s = params.size;
    let sf = s as f64;
    let organ = Ellipse {
        cy: sf / 2.0 + rng.random_range(-0.06..0.06) * sf,
        cx: sf / 2.0 + rng.random_range(-0.06..0.06) * sf,
        ry: rng.random_range(0.25..0.36) * sf,
        rx: rng.random_range(0.25..0.36) * sf,
        theta: rng.random_range(0.0..PI),
    };
    let mut organ_mask = Mask::empty(s, s);
    for r in 0..s {
        for c in 0..s {
            organ_mask.set(r, c, organ.contains(r as f64 + 0.5, c as f64 + 0.5));
        }
    }

    let mut lesions = Vec::new();
    if label == Label::Positive {
        let count = rng.random_range(1..=3);
        for _ in 0..count {
            let mut radius = rng.random_range(params.lesion_radius.0..=params.lesion_radius.1) * sf;
            'place: loop {
                for _ in 0..200 {
                    let l = Lesion {
                        cy: organ.cy + rng.random_range(-1.0..1.0) * organ.ry,
                        cx: organ.cx + rng.random_range(-1.0..1.0) * organ.rx,
                        radius,
                    };
                    // one pixel of organ tissue all around the lesion
                    let grown = Lesion { radius: radius + 1.5, ..l };
                    if disk_pixels(s, &grown).all(|(r, c)| organ_mask.get(r, c))
                        && disk_pixels(s, &l).next().is_some()
                    {
                        lesions.push(l);
                        break 'place;
                    }
                }
                radius *= 0.8;
                if radius < 1.0 {
                    break;
                }
            }
        }
    }
    let mut hidden_mask = Mask::empty(s, s);
    for l in &lesions {
        for (r, c) in disk_pixels(s, l) {
            hidden_mask.set(r, c, true);
        }
    }

    let noise = Normal::new(0.0f32, params.noise_std).expect("finite std");
    let (f1, f2): (f64, f64) = (rng.random_range(2.0..5.0), rng.random_range(2.0..5.0));
    let (p1, p2): (f64, f64) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let mut pixels = Image::filled(s, s, 0.0);
    for r in 0..s {
        for c in 0..s {
            let base = if hidden_mask.get(r, c) {
                params.lesion_intensity
            } else if organ_mask.get(r, c) {
                let (y, x) = (r as f64 / sf, c as f64 / sf);
                let texture = (2.0 * PI * f1 * y + p1).sin() * (2.0 * PI * f2 * x + p2).cos();
                params.organ_intensity + params.texture_amplitude * texture as f32
            } else {
                params.background
            };
            pixels.set(r, c, (base + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    if lesions.is_empty() && label == Label::Positive {
        // unreachable for sane sizes: the organ always fits a 1-pixel disk
        debug_assert!(false, "positive phantom without lesions");
    }
    PhantomImage {
        pixels,
        label,
        hidden_mask,
        organ_mask,
        organ,
        lesions,
        seed,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: Label,
    pub mask: Option<PathBuf>,
    pub eta: Option<f64>,
    pub split: Split,
}

impl ManifestRecord {
    /// File stem, used as the image id.
    pub fn id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    /// Output side when the set was written by preprocessing.
    pub preprocessed: Option<usize>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            records: Vec::new(),
            preprocessed: None,
        }
    }

    /// Loads `<dir>/manifest.tsv`, or the file itself when given one, and
    /// checks that every referenced image and mask exists.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root).map_err(|(line, msg)| Error::Format {
            path: format!("{}:{line}", file.display()),
            msg,
        })?;
        for r in &manifest.records {
            for p in std::iter::once(&r.path).chain(r.mask.as_ref()) {
                let full = manifest.resolve(p);
                if !full.is_file() {
                    return Err(Error::Data(format!("{}: missing file {}", file.display(), full.display())));
                }
            }
        }
        Ok(manifest)
    }

    pub fn parse(text: &str, root: PathBuf) -> std::result::Result<Self, (usize, String)> {
        let mut records = Vec::new();
        let mut preprocessed = None;
        for (idx, line) in text.lines().enumerate() {
            let n = idx + 1;
            let trimmed = line.trim();
            if let Some(v) = trimmed.strip_prefix(PREPROCESSED_TAG) {
                let side = v.trim().parse().map_err(|_| (n, format!("bad preprocessed size `{}`", v.trim())))?;
                preprocessed = Some(side);
                continue;
            }
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if fields.len() < 2 || fields.len() > 5 {
                return Err((n, format!("expected 2 to 5 tab-separated fields, got {}", fields.len())));
            }
            let optional = |i: usize| fields.get(i).copied().filter(|f| !f.is_empty() && *f != "-");
            let label = fields[1].parse().map_err(|e| (n, e))?;
            let eta = optional(3)
                .map(|s| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| (0.0..=1.0).contains(v))
                        .ok_or_else(|| (n, format!("eta must be a decimal in [0, 1], got `{s}`")))
                })
                .transpose()?;
            let split = optional(4)
                .map(|s| s.parse().map_err(|e| (n, e)))
                .transpose()?
                .unwrap_or(Split::Train);
            records.push(ManifestRecord {
                path: PathBuf::from(fields[0]),
                label,
                mask: optional(2).map(PathBuf::from),
                eta,
                split,
            });
        }
        Ok(Self {
            root,
            records,
            preprocessed,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# path\tlabel\torgan_mask\teta\tsplit\n");
        if let Some(side) = self.preprocessed {
            out.push_str(&format!("{PREPROCESSED_TAG}\t{side}\n"));
        }
        for r in &self.records {
            let mask = r.mask.as_ref().map_or("-".to_string(), |m| m.display().to_string());
            let eta = r.eta.map_or("-".to_string(), |e| e.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.path.display(),
                r.label,
                mask,
                eta,
                r.split
            ));
        }
        out
    }

    pub fn write(&self) -> Result<()> {
        let file = self.root.join(MANIFEST_FILE);
        fs::write(&file, self.to_text()).map_err(|e| Error::io(&file, e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Hidden mask location for a record (evaluation only).
    pub fn eval_mask_path(&self, record: &ManifestRecord) -> PathBuf {
        let name = record.path.file_name().map(PathBuf::from).unwrap_or_default();
        self.root.join(EVAL_MASKS_DIR).join(name)
    }
}

/// Rejects paths inside a hidden-mask directory. Every file read on the
/// training side goes through this.
pub fn guard_training_path(path: &Path) -> Result<()> {
    if path
        .components()
        .any(|c| matches!(c, Component::Normal(s) if s == EVAL_MASKS_DIR))
    {
        return Err(Error::Data(format!(
            "training may not read hidden masks: {}",
            path.display()
        )));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `count` phantoms with their organ masks and hidden lesion masks,
/// plus the manifest. Labels and splits (about 70/10/20 per label) come from
/// seeded permutations, so the directory is a pure function of the arguments.
pub fn generate_phantoms(
    out: &Path,
    count: usize,
    positive_fraction: f64,
    master_seed: u64,
    params: &PhantomParams,
) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::InvalidArgument(format!(
            "positive fraction {positive_fraction} outside [0, 1]"
        )));
    }
    for dir in [IMAGES_DIR, ORGAN_MASKS_DIR, EVAL_MASKS_DIR] {
        create_dir(&out.join(dir))?;
    }
    let positives = (count as f64 * positive_fraction).round() as usize;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut seed::rng(master_seed, "labels"));
    let mut labels = vec![Label::Negative; count];
    for &i in &order[..positives] {
        labels[i] = Label::Positive;
    }
    let mut splits = vec![Split::Train; count];
    let mut split_rng = seed::rng(master_seed, "splits");
    for label in [Label::Positive, Label::Negative] {
        let mut members: Vec<usize> = (0..count).filter(|&i| labels[i] == label).collect();
        members.shuffle(&mut split_rng);
        let n = members.len();
        let train = (n as f64 * 0.7).round() as usize;
        let val = ((n as f64 * 0.8).round() as usize).max(train);
        for (rank, &i) in members.iter().enumerate() {
            splits[i] = if rank < train {
                Split::Train
            } else if rank < val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }

    (0..count).into_par_iter().try_for_each(|i| -> Result<()> {
        let name = format!("img_{i:04}.pgm");
        let phantom = generate_phantom(params, labels[i], seed::derive(master_seed, &format!("phantom/{i}")));
        phantom.pixels.write_pgm(&out.join(IMAGES_DIR).join(&name))?;
        phantom.organ_mask.write_pgm(&out.join(ORGAN_MASKS_DIR).join(&name))?;
        phantom.hidden_mask.write_pgm(&out.join(EVAL_MASKS_DIR).join(&name))
    })?;

    let mut manifest = Manifest::new(out);
    for i in 0..count {
        let name = format!("img_{i:04}.pgm");
        manifest.records.push(ManifestRecord {
            path: Path::new(IMAGES_DIR).join(&name),
            label: labels[i],
            mask: Some(Path::new(ORGAN_MASKS_DIR).join(&name)),
            eta: None,
            split: splits[i],
        });
    }
    manifest.write()?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Threshold,
    External,
}

impl FromStr for MaskMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "threshold" => Ok(MaskMode::Threshold),
            "external" => Ok(MaskMode::External),
            _ => Err(format!("mask mode must be threshold or external, got `{s}`")),
        }
    }
}

/// Otsu threshold over a 256-bin histogram of `[0, 1]`. Pixels strictly above
/// the returned level are foreground.
pub fn otsu_threshold(image: &Image) -> f32 {
    let mut hist = [0u64; 256];
    for &v in image.pixels() {
        hist[((v.clamp(0.0, 1.0) * 255.0).round()) as usize] += 1;
    }
    let total = image.pixels().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0usize);
    for (i, &h) in hist.iter().enumerate() {
        w0 += h as f64;
        sum0 += i as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    (best_bin as f32 + 0.5) / 255.0
}

/// Largest 4-connected component; ties go to the component found first in
/// raster order.
pub fn largest_component(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut label = vec![0u32; w * h];
    let (mut best, mut best_size, mut next) = (0u32, 0usize, 1u32);
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits()[start] || label[start] != 0 {
            continue;
        }
        let mut size = 0;
        label[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.bits()[q] && label[q] == 0 {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        if size > best_size {
            best_size = size;
            best = next;
        }
        next += 1;
    }
    Mask::new(w, h, label.iter().map(|&l| l != 0 && l == best).collect()).expect("same dims")
}

fn morph3x3(mask: &Mask, dilate: bool) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Mask::empty(w, h);
    for r in 0..h {
        for c in 0..w {
            let mut hit = !dilate;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    // outside the frame counts as background for dilation and
                    // foreground for erosion, so closing never eats the border
                    let v = if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        !dilate
                    } else {
                        mask.get(rr as usize, cc as usize)
                    };
                    if dilate {
                        hit |= v;
                    } else {
                        hit &= v;
                    }
                }
            }
            out.set(r, c, hit);
        }
    }
    out
}

/// 3×3 morphological closing, one pass.
pub fn close3x3(mask: &Mask) -> Mask {
    morph3x3(&morph3x3(mask, true), false)
}

/// Organ mask by Otsu threshold, largest component and closing, or the
/// external mask unchanged.
pub fn organ_mask(image: &Image, mode: MaskMode, external: Option<&Mask>) -> Result<Mask> {
    let mask = match mode {
        MaskMode::External => {
            let m = external
                .ok_or_else(|| Error::Data("external mask mode needs a mask path".into()))?
                .clone();
            if m.width() != image.width() || m.height() != image.height() {
                return Err(Error::Data(format!(
                    "mask {}×{} does not match image {}×{}",
                    m.width(),
                    m.height(),
                    image.width(),
                    image.height()
                )));
            }
            m
        }
        MaskMode::Threshold => {
            let t = otsu_threshold(image);
            let raw = Mask::new(
                image.width(),
                image.height(),
                image.pixels().iter().map(|&v| v > t).collect(),
            )
            .expect("image dims");
            close3x3(&largest_component(&raw))
        }
    };
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(mask)
}

/// Half-open pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl CropBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.top..self.bottom).contains(&r) && (self.left..self.right).contains(&c)
    }
}

/// Tight bounding box of the mask, grown by `margin` and clamped to the frame.
pub fn crop_box(mask: &Mask, margin: usize) -> Result<CropBox> {
    let (w, h) = (mask.width(), mask.height());
    let mut bbox: Option<CropBox> = None;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                let b = bbox.get_or_insert(CropBox {
                    top: r,
                    left: c,
                    bottom: r + 1,
                    right: c + 1,
                });
                b.top = b.top.min(r);
                b.left = b.left.min(c);
                b.bottom = b.bottom.max(r + 1);
                b.right = b.right.max(c + 1);
            }
        }
    }
    let b = bbox.ok_or(Error::EmptyMask)?;
    Ok(CropBox {
        top: b.top.saturating_sub(margin),
        left: b.left.saturating_sub(margin),
        bottom: (b.bottom + margin).min(h),
        right: (b.right + margin).min(w),
    })
}

/// Where the crop lands: the crop box, the square side it is padded to and
/// the padding offsets. `full` marks the no-crop case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropGeometry {
    pub crop: CropBox,
    pub side: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub full: bool,
}

impl CropGeometry {
    /// The whole `width × height` frame, padded to a square.
    pub fn full_frame(width: usize, height: usize) -> Self {
        let side = width.max(height);
        Self {
            crop: CropBox {
                top: 0,
                left: 0,
                bottom: height,
                right: width,
            },
            side,
            pad_top: (side - height) / 2,
            pad_left: (side - width) / 2,
            full: true,
        }
    }

    pub fn new(mask: &Mask, margin: usize) -> Result<Self> {
        let crop = crop_box(mask, margin)?;
        let side = crop.height().max(crop.width());
        let pad_top = (side - crop.height()) / 2;
        let pad_left = (side - crop.width()) / 2;
        // The padded square, in source coordinates. When it is within one
        // margin of the frame on every side the crop would only shave the
        // margin off again, so the full frame is used instead; this makes
        // preprocessing a fixed point on its own output.
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let sq_top = crop.top as i64 - pad_top as i64;
        let sq_left = crop.left as i64 - pad_left as i64;
        let s = side as i64;
        let m = margin as i64;
        let near = |a: i64, b: i64| (a - b).abs() <= m;
        if w == h && near(sq_top, 0) && near(sq_left, 0) && near(sq_top + s, h) && near(sq_left + s, w) {
            return Ok(Self::full_frame(mask.width(), mask.height()));
        }
        Ok(Self {
            crop,
            side,
            pad_top,
            pad_left,
            full: false,
        })
    }

    /// Crops, pads to the square and resizes to `out_size`.
    pub fn apply(&self, image: &Image, out_size: usize) -> Image {
        let c = &self.crop;
        let square = image
            .crop(c.top..c.bottom, c.left..c.right)
            .embed(self.side, self.side, self.pad_top, self.pad_left);
        square.resize(out_size, out_size)
    }

    pub fn apply_mask(&self, mask: &Mask, out_size: usize) -> Mask {
        Mask::from_image(&self.apply(&mask.to_image(), out_size))
    }
}

fn zero_outside(image: &mut Image, mask: &Mask) {
    for (v, &m) in image.pixels_mut().iter_mut().zip(mask.bits()) {
        if !m {
            *v = 0.0;
        }
    }
}

/// Minimal-background crop: zero outside the mask, crop to the grown bounding
/// box, pad to a centred square and resize. Returns the image and the organ
/// mask carried through the same geometry.
pub fn crop_and_resize_with_mask(image: &Image, mask: &Mask, out_size: usize) -> Result<(Image, Mask, CropGeometry)> {
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::InvalidArgument("mask and image dims differ".into()));
    }
    resample_with_geometry(image, mask, CropGeometry::new(mask, CROP_MARGIN)?, out_size)
}

fn resample_with_geometry(
    image: &Image,
    mask: &Mask,
    geom: CropGeometry,
    out_size: usize,
) -> Result<(Image, Mask, CropGeometry)> {
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::InvalidArgument("mask and image dims differ".into()));
    }
    let mut masked = image.clone();
    zero_outside(&mut masked, mask);
    let mut out = geom.apply(&masked, out_size);
    let out_mask = geom.apply_mask(mask, out_size);
    zero_outside(&mut out, &out_mask);
    for v in out.pixels_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((out, out_mask, geom))
}

pub fn crop_and_resize(image: &Image, mask: &Mask, out_size: usize) -> Result<Image> {
    crop_and_resize_with_mask(image, mask, out_size).map(|(img, _, _)| img)
}

/// Per-tile-position marker frequency: the fraction of positive images whose
/// hidden mask intersects each tile, plus the mean over positions.
#[derive(Clone, Debug, PartialEq)]
pub struct EtaTable {
    pub tiles_per_side: usize,
    pub grid: Vec<f64>,
    pub overall: f64,
}

impl EtaTable {
    pub fn from_masks(masks: &[Mask], tile: usize) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidArgument("eta table needs at least one mask".into()))?;
        let side = first.width();
        if side % tile != 0 || tile == 0 {
            return Err(Error::InvalidArgument(format!("tile {tile} does not divide {side}")));
        }
        let n = side / tile;
        let mut hits = vec![0usize; n * n];
        for m in masks {
            if m.width() != side || m.height() != side {
                return Err(Error::InvalidArgument("eta table masks differ in size".into()));
            }
            for (ti, hit) in hits.iter_mut().enumerate() {
                let (tr, tc) = (ti / n, ti % n);
                let any = (tr * tile..(tr + 1) * tile)
                    .any(|r| (tc * tile..(tc + 1) * tile).any(|c| m.get(r, c)));
                *hit += any as usize;
            }
        }
        let grid: Vec<f64> = hits.iter().map(|&h| h as f64 / masks.len() as f64).collect();
        let overall = grid.iter().sum::<f64>() / grid.len() as f64;
        Ok(Self {
            tiles_per_side: n,
            grid,
            overall,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# tile row\ttile col\teta\n# overall\t{}\n", self.overall);
        for (i, v) in self.grid.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{v}\n", i / self.tiles_per_side, i % self.tiles_per_side));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessSummary {
    pub written: usize,
    pub skipped: Vec<(String, String)>,
    pub eta: Option<EtaTable>,
}

/// Runs organ masking and the crop/resize chain over a dataset. Hidden masks,
/// when present, are carried through the same geometry into
/// `<out>/eval_masks` and used only for the reference η table.
pub fn preprocess_dataset(
    input: &Path,
    output: &Path,
    mode: MaskMode,
    size: usize,
    eta_tile: Option<usize>,
) -> Result<PreprocessSummary> {
    if size == 0 {
        return Err(Error::InvalidArgument("size must be positive".into()));
    }
    let manifest = Manifest::load(input)?;
    // Our own output at the same size already carries its crop; re-cropping
    // would shave the margin again, rescaled by the first resize.
    let settled = manifest.preprocessed == Some(size);
    for dir in [IMAGES_DIR, ORGAN_MASKS_DIR, EVAL_MASKS_DIR] {
        create_dir(&output.join(dir))?;
    }
    type Outcome = std::result::Result<(ManifestRecord, Option<Mask>), String>;
    let outcomes: Vec<Result<Outcome>> = manifest
        .records
        .par_iter()
        .map(|rec| -> Result<Outcome> {
            let image = Image::read_pgm(&manifest.resolve(&rec.path))?;
            let (mode, recorded) = match (settled, &rec.mask) {
                (true, Some(_)) => (MaskMode::External, true),
                _ => (mode, false),
            };
            let external = match (mode, &rec.mask) {
                (MaskMode::External, Some(p)) => Some(Mask::read_pgm(&manifest.resolve(p))?),
                (MaskMode::External, None) => return Ok(Err("no organ mask path".into())),
                _ => None,
            };
            let mask = match organ_mask(&image, mode, external.as_ref()) {
                Ok(m) => m,
                Err(e @ (Error::EmptyMask | Error::Data(_))) => return Ok(Err(e.to_string())),
                Err(e) => return Err(e),
            };
            let (out, out_mask, geom) = if recorded && image.width() == size && image.height() == size {
                resample_with_geometry(&image, &mask, CropGeometry::full_frame(size, size), size)?
            } else {
                crop_and_resize_with_mask(&image, &mask, size)?
            };
            let name = rec.path.file_name().map(PathBuf::from).unwrap_or_default();
            out.write_pgm(&output.join(IMAGES_DIR).join(&name))?;
            out_mask.write_pgm(&output.join(ORGAN_MASKS_DIR).join(&name))?;
            let hidden_src = manifest.eval_mask_path(rec);
            let hidden = if hidden_src.is_file() {
                let m = Mask::read_pgm(&hidden_src)?;
                let mut t = geom.apply_mask(&m, size);
                for (b, &o) in t.bits_mut().iter_mut().zip(out_mask.bits()) {
                    *b &= o;
                }
                t.write_pgm(&output.join(EVAL_MASKS_DIR).join(&name))?;
                Some(t)
            } else {
                None
            };
            let record = ManifestRecord {
                path: Path::new(IMAGES_DIR).join(&name),
                label: rec.label,
                mask: Some(Path::new(ORGAN_MASKS_DIR).join(&name)),
                eta: rec.eta,
                split: rec.split,
            };
            Ok(Ok((record, hidden)))
        })
        .collect();

    let mut out_manifest = Manifest::new(output);
    out_manifest.preprocessed = Some(size);
    let mut skipped = Vec::new();
    let mut positive_masks = Vec::new();
    for (rec, outcome) in manifest.records.iter().zip(outcomes) {
        match outcome? {
            Ok((record, hidden)) => {
                if let (Label::Positive, Some(h)) = (record.label, hidden) {
                    positive_masks.push(h);
                }
                out_manifest.records.push(record);
            }
            Err(reason) => skipped.push((rec.id(), reason)),
        }
    }
    if out_manifest.records.is_empty() {
        let detail: Vec<String> = skipped.iter().map(|(id, why)| format!("{id}: {why}")).collect();
        return Err(Error::Data(format!("every image failed masking:\n{}", detail.join("\n"))));
    }
    out_manifest.write()?;
    let eta = match eta_tile {
        Some(t) if !positive_masks.is_empty() && size.is_multiple_of(t) => {
            let table = EtaTable::from_masks(&positive_masks, t)?;
            let file = output.join(ETA_TABLE_FILE);
            fs::write(&file, table.to_text()).map_err(|e| Error::io(&file, e))?;
            Some(table)
        }
        _ => None,
    };
    Ok(PreprocessSummary {
        written: out_manifest.records.len(),
        skipped,
        eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dice(a: &Mask, b: &Mask) -> f64 {
        let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
        2.0 * inter as f64 / (a.count() + b.count()) as f64
    }

    #[test]
    fn phantom_invariants() {
        let params = PhantomParams::new(64, Difficulty::Easy);
        for s in 0..30 {
            let pos = generate_phantom(&params, Label::Positive, s);
            assert!(!pos.hidden_mask.is_empty());
            assert!(!pos.lesions.is_empty() && pos.lesions.len() <= 3);
            for (h, o) in pos.hidden_mask.bits().iter().zip(pos.organ_mask.bits()) {
                assert!(!h || *o);
            }
            let neg = generate_phantom(&params, Label::Negative, s);
            assert!(neg.hidden_mask.is_empty());
            assert!(pos.pixels.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(
            generate_phantom(&params, Label::Positive, 4),
            generate_phantom(&params, Label::Positive, 4)
        );
    }

    #[test]
    fn threshold_mask_finds_the_organ() {
        let params = PhantomParams::new(64, Difficulty::Easy);
        for s in 0..10 {
            let p = generate_phantom(&params, if s % 2 == 0 { Label::Positive } else { Label::Negative }, s);
            let m = organ_mask(&p.pixels, MaskMode::Threshold, None).unwrap();
            assert!(dice(&m, &p.organ_mask) >= 0.95, "seed {s}: {}", dice(&m, &p.organ_mask));
        }
    }

    #[test]
    fn black_image_has_no_organ() {
        let img = Image::filled(16, 16, 0.0);
        assert!(matches!(
            organ_mask(&img, MaskMode::Threshold, None),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn external_mask_passes_through() {
        let img = Image::filled(4, 4, 0.3);
        let mut m = Mask::empty(4, 4);
        m.set(1, 2, true);
        assert_eq!(organ_mask(&img, MaskMode::External, Some(&m)).unwrap(), m);
        assert!(organ_mask(&img, MaskMode::External, None).is_err());
    }

    #[test]
    fn crop_box_arithmetic() {
        let mut m = Mask::empty(100, 100);
        for r in 10..50 {
            for c in 20..60 {
                m.set(r, c, true);
            }
        }
        let b = crop_box(&m, 4).unwrap();
        assert_eq!((b.top, b.bottom, b.left, b.right), (6, 54, 16, 64));
        let mut edge = Mask::empty(10, 10);
        edge.set(0, 9, true);
        let b = crop_box(&edge, 4).unwrap();
        assert_eq!((b.top, b.bottom, b.left, b.right), (0, 5, 5, 10));
    }

    #[test]
    fn full_mask_crop_is_identity_then_resize() {
        let img = Image::new(8, 8, (0..64).map(|v| v as f32 / 64.0).collect()).unwrap();
        let full = Mask::new(8, 8, vec![true; 64]).unwrap();
        let out = crop_and_resize(&img, &full, 8).unwrap();
        assert_eq!(out, img);
        let bigger = crop_and_resize(&img, &full, 16).unwrap();
        assert_eq!(bigger, img.resize(16, 16));
    }

    #[test]
    fn preprocessed_tag_round_trips() {
        let mut m = Manifest::new("/x");
        m.records.push(ManifestRecord {
            path: "images/a.pgm".into(),
            label: Label::Negative,
            mask: None,
            eta: None,
            split: Split::Val,
        });
        m.preprocessed = Some(128);
        let back = Manifest::parse(&m.to_text(), "/x".into()).unwrap();
        assert_eq!(back, m);
        assert!(Manifest::parse("# preprocessed\tbig\n", "/x".into()).is_err());
    }

    #[test]
    fn preprocessed_background_is_zero() {
        let params = PhantomParams::new(64, Difficulty::Easy);
        let p = generate_phantom(&params, Label::Positive, 2);
        let (out, mask, geom) = crop_and_resize_with_mask(&p.pixels, &p.organ_mask, 48).unwrap();
        assert!(!geom.full);
        assert_eq!((out.width(), out.height()), (48, 48));
        for (v, m) in out.pixels().iter().zip(mask.bits()) {
            assert!(*m || *v == 0.0);
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn manifest_text_round_trip_and_errors() {
        let text = "# comment\nimages/a.pgm\tpos\tmasks/a.pgm\t0.25\ttest\nimages/b.pgm\tneg\n";
        let m = Manifest::parse(text, PathBuf::from("/data")).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].eta, Some(0.25));
        assert_eq!(m.records[1].split, Split::Train);
        assert_eq!(m.records[1].mask, None);
        let again = Manifest::parse(&m.to_text(), PathBuf::from("/data")).unwrap();
        assert_eq!(again, m);
        assert_eq!(Manifest::parse("a.pgm\tmaybe\n", PathBuf::new()).unwrap_err().0, 1);
        assert_eq!(Manifest::parse("\na.pgm\tpos\t-\t2\n", PathBuf::new()).unwrap_err().0, 2);
    }

    #[test]
    fn guard_rejects_hidden_masks() {
        assert!(guard_training_path(Path::new("/d/eval_masks/img_0001.pgm")).is_err());
        assert!(guard_training_path(Path::new("/d/images/img_0001.pgm")).is_ok());
    }

    #[test]
    fn eta_table_counts_tiles() {
        let mut a = Mask::empty(4, 4);
        a.set(0, 0, true);
        let mut b = Mask::empty(4, 4);
        b.set(0, 1, true);
        b.set(3, 3, true);
        let t = EtaTable::from_masks(&[a, b], 2).unwrap();
        assert_eq!(t.grid, vec![1.0, 0.0, 0.0, 0.5]);
        assert_eq!(t.overall, 0.375);
    }

    proptest! {
        #[test]
        fn crop_box_contains_every_mask_pixel(
            w in 1usize..40,
            h in 1usize..40,
            pts in proptest::collection::vec((0usize..40, 0usize..40), 1..20),
            margin in 0usize..6,
        ) {
            let mut m = Mask::empty(w, h);
            for (r, c) in pts {
                m.set(r % h, c % w, true);
            }
            let b = crop_box(&m, margin).unwrap();
            prop_assert!(b.bottom <= h && b.right <= w);
            for r in 0..h {
                for c in 0..w {
                    prop_assert!(!m.get(r, c) || b.contains(r, c));
                }
            }
        }

        #[test]
        fn closing_is_extensive(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = Mask::new(8, 8, bits).unwrap();
            let closed = close3x3(&m);
            for (a, b) in m.bits().iter().zip(closed.bits()) {
                prop_assert!(!a || *b);
            }
        }
    }
}
