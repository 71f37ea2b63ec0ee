//! Seeded augmentations, tiling and contrastive pair assembly.
//!
//! Every pair draws from its own stream, derived from the batch seed, the pair
//! category and the pair index, so a batch can be built in parallel and still
//! come out byte-identical.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::Polarity;
use crate::seed::{self, Rng};

/// Blur keeps this fraction of the linear resolution, `[lo, hi)`.
pub const BLUR_RANGE: (f64, f64) = (0.90, 1.00);
/// Per-axis stretch/compression factor, `[lo, hi]`.
pub const DISTORT_RANGE: (f64, f64) = (0.80, 1.00);

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

fn clamp_unit(mut image: Image) -> Image {
    for v in image.pixels_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    image
}

/// Downsamples by `factor` and back to the original size.
pub fn blur_with(image: &Image, factor: f64) -> Result<Image> {
    let s = image.side()?;
    let small = round_half_up(factor * s as f64).max(1);
    Ok(clamp_unit(image.resize(small, small).resize(s, s)))
}

pub fn blur(image: &Image, rng: &mut Rng) -> Result<(Image, f64)> {
    let r = rng.random_range(BLUR_RANGE.0..BLUR_RANGE.1);
    Ok((blur_with(image, r)?, r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Refit {
    Resize,
    Pad,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistortDraw {
    pub sx: f64,
    pub sy: f64,
    pub refit: Refit,
}

/// Scales the axes independently, then resizes back or zero-pads centred.
pub fn distort_with(image: &Image, draw: &DistortDraw) -> Result<Image> {
    let s = image.side()?;
    let w = round_half_up(draw.sx * s as f64).clamp(1, s);
    let h = round_half_up(draw.sy * s as f64).clamp(1, s);
    let scaled = image.resize(w, h);
    let out = match draw.refit {
        Refit::Resize => scaled.resize(s, s),
        Refit::Pad => scaled.embed(s, s, (s - h) / 2, (s - w) / 2),
    };
    Ok(clamp_unit(out))
}

pub fn distort(image: &Image, rng: &mut Rng) -> Result<(Image, DistortDraw)> {
    let sx = rng.random_range(DISTORT_RANGE.0..=DISTORT_RANGE.1);
    let sy = rng.random_range(DISTORT_RANGE.0..=DISTORT_RANGE.1);
    let refit = if rng.random_bool(0.5) { Refit::Resize } else { Refit::Pad };
    let draw = DistortDraw { sx, sy, refit };
    Ok((distort_with(image, &draw)?, draw))
}

/// Blur followed by distortion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub blur: f64,
    pub distort: DistortDraw,
}

pub fn augment(image: &Image, rng: &mut Rng) -> Result<(Image, AugmentDraw)> {
    let (blurred, r) = blur(image, rng)?;
    let (out, d) = distort(&blurred, rng)?;
    Ok((out, AugmentDraw { blur: r, distort: d }))
}

/// Tile position in tile units, raster order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TileCoord {
    pub row: usize,
    pub col: usize,
}

fn check_tile(side: usize, tile: usize) -> Result<usize> {
    if tile == 0 || !side.is_multiple_of(tile) {
        return Err(Error::InvalidArgument(format!("tile size {tile} does not divide {side}")));
    }
    Ok(side / tile)
}

/// Non-overlapping `tile × tile` slices in raster order.
pub fn tile(image: &Image, tile: usize) -> Result<Vec<(TileCoord, Image)>> {
    let s = image.side()?;
    let n = check_tile(s, tile)?;
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let slice = image.crop(row * tile..(row + 1) * tile, col * tile..(col + 1) * tile);
            out.push((TileCoord { row, col }, slice));
        }
    }
    Ok(out)
}

pub fn tile_at(image: &Image, tile: usize, at: TileCoord) -> Result<Image> {
    let n = check_tile(image.side()?, tile)?;
    if at.row >= n || at.col >= n {
        return Err(Error::InvalidArgument(format!("tile {at:?} outside {n}×{n} grid")));
    }
    Ok(image.crop(at.row * tile..(at.row + 1) * tile, at.col * tile..(at.col + 1) * tile))
}

/// Inverse of [`tile`] for a full raster-order set of tiles.
pub fn untile(tiles: &[(TileCoord, Image)], side: usize) -> Result<Image> {
    let t = tiles
        .first()
        .ok_or_else(|| Error::InvalidArgument("no tiles".into()))?
        .1
        .side()?;
    let n = check_tile(side, t)?;
    if tiles.len() != n * n {
        return Err(Error::InvalidArgument(format!("{} tiles for a {n}×{n} grid", tiles.len())));
    }
    let mut out = Image::filled(side, side, 0.0);
    for (at, slice) in tiles {
        if slice.width() != t || slice.height() != t {
            return Err(Error::InvalidArgument("tiles differ in size".into()));
        }
        for r in 0..t {
            for c in 0..t {
                out.set(at.row * t + r, at.col * t + c, slice.get(r, c));
            }
        }
    }
    Ok(out)
}

/// Image with its image-level label, as seen by pair generation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub label: Label,
    pub eta: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PairKind {
    /// A slice and its own blurred, distorted twin.
    Augment,
    /// Slices from two augmented negative-labeled images.
    NormalNormal,
    /// A slice from an augmented positive image and one from a negative image.
    CrossLabel,
}

impl PairKind {
    pub fn polarity(self) -> Polarity {
        match self {
            PairKind::Augment | PairKind::NormalNormal => Polarity::Positive,
            PairKind::CrossLabel => Polarity::Negative,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PairKind::Augment => "augment",
            PairKind::NormalNormal => "normal-normal",
            PairKind::CrossLabel => "cross-label",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceSource {
    pub image: String,
    pub tile: TileCoord,
    /// Augmentation applied to the source image before tiling, if any.
    pub augment: Option<AugmentDraw>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub kind: PairKind,
    pub index: usize,
    pub a: SliceSource,
    pub b: SliceSource,
    /// Augmentation turning slice a into slice b, for augment pairs.
    pub twin: Option<AugmentDraw>,
}

fn fmt_draw(f: &mut fmt::Formatter<'_>, d: &AugmentDraw) -> fmt::Result {
    let refit = match d.distort.refit {
        Refit::Resize => "resize",
        Refit::Pad => "pad",
    };
    write!(f, "r={} sx={} sy={} {refit}", d.blur, d.distort.sx, d.distort.sy)
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.kind.label(), self.index)?;
        for (side, s) in [("a", &self.a), ("b", &self.b)] {
            write!(f, "\t{side}={}@{},{}", s.image, s.tile.row, s.tile.col)?;
            if let Some(d) = &s.augment {
                write!(f, " ")?;
                fmt_draw(f, d)?;
            }
        }
        if let Some(d) = &self.twin {
            write!(f, "\ttwin ")?;
            fmt_draw(f, d)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub slice_a: Image,
    pub slice_b: Image,
    pub polarity: Polarity,
    pub eta: f64,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairPolicy {
    pub tile_size: usize,
    pub augment_positives: usize,
    pub normal_pairs: usize,
    pub negative_pairs: usize,
    /// η for negative pairs whose positive image carries none.
    pub default_eta: f64,
}

impl Default for PairPolicy {
    fn default() -> Self {
        Self {
            tile_size: 64,
            augment_positives: 4,
            normal_pairs: 4,
            negative_pairs: 4,
            default_eta: 0.5,
        }
    }
}

impl PairPolicy {
    pub fn total(&self) -> usize {
        self.augment_positives + self.normal_pairs + self.negative_pairs
    }
}

fn pick<'a, T>(rng: &mut Rng, items: &[&'a T]) -> &'a T {
    items[rng.random_range(0..items.len())]
}

fn random_tile(rng: &mut Rng, per_side: usize) -> TileCoord {
    TileCoord {
        row: rng.random_range(0..per_side),
        col: rng.random_range(0..per_side),
    }
}

/// Builds one batch: augment positives, then normal-normal positives, then
/// cross-label negatives, each in index order.
pub fn make_pairs(images: &[LabeledImage], policy: &PairPolicy, batch_seed: u64) -> Result<Vec<PairSample>> {
    if policy.total() == 0 {
        return Err(Error::InvalidArgument("pair policy requests no pairs".into()));
    }
    if !(0.0..=1.0).contains(&policy.default_eta) {
        return Err(Error::InvalidArgument(format!("default eta {} outside [0, 1]", policy.default_eta)));
    }
    let all: Vec<&LabeledImage> = images.iter().collect();
    let pos: Vec<&LabeledImage> = images.iter().filter(|i| i.label == Label::Positive).collect();
    let neg: Vec<&LabeledImage> = images.iter().filter(|i| i.label == Label::Negative).collect();
    if policy.augment_positives > 0 && all.is_empty() {
        return Err(Error::Data("augment pairs requested but the batch has no images".into()));
    }
    if policy.normal_pairs > 0 && neg.is_empty() {
        return Err(Error::Data("normal-normal pairs need negative-labeled images".into()));
    }
    if policy.negative_pairs > 0 && (pos.is_empty() || neg.is_empty()) {
        return Err(Error::Data(
            "negative pairs need both positive- and negative-labeled images".into(),
        ));
    }
    let side = all[0].image.side()?;
    if let Some(bad) = images.iter().find(|i| i.image.width() != side || i.image.height() != side) {
        return Err(Error::Data(format!("image {} is not {side}×{side}", bad.id)));
    }
    let per_side = check_tile(side, policy.tile_size)?;
    let t = policy.tile_size;

    let jobs: Vec<(PairKind, usize)> = [
        (PairKind::Augment, policy.augment_positives),
        (PairKind::NormalNormal, policy.normal_pairs),
        (PairKind::CrossLabel, policy.negative_pairs),
    ]
    .into_iter()
    .flat_map(|(k, n)| (0..n).map(move |i| (k, i)))
    .collect();

    jobs.par_iter()
        .map(|&(kind, index)| {
            let mut rng = seed::rng(batch_seed, &format!("pair/{}/{index}", kind.label()));
            match kind {
                PairKind::Augment => {
                    let img = pick(&mut rng, &all);
                    let at = random_tile(&mut rng, per_side);
                    let slice_a = tile_at(&img.image, t, at)?;
                    let (slice_b, draw) = augment(&slice_a, &mut rng)?;
                    let src = SliceSource {
                        image: img.id.clone(),
                        tile: at,
                        augment: None,
                    };
                    Ok(PairSample {
                        slice_a,
                        slice_b,
                        polarity: Polarity::Positive,
                        eta: 1.0,
                        provenance: Provenance {
                            kind,
                            index,
                            a: src.clone(),
                            b: src,
                            twin: Some(draw),
                        },
                    })
                }
                PairKind::NormalNormal | PairKind::CrossLabel => {
                    let first = if kind == PairKind::CrossLabel { &pos } else { &neg };
                    let img_a = pick(&mut rng, first);
                    let img_b = pick(&mut rng, &neg);
                    let (aug_a, draw_a) = augment(&img_a.image, &mut rng)?;
                    let (aug_b, draw_b) = augment(&img_b.image, &mut rng)?;
                    let at_a = random_tile(&mut rng, per_side);
                    let at_b = random_tile(&mut rng, per_side);
                    let eta = match kind {
                        PairKind::CrossLabel => img_a.eta.unwrap_or(policy.default_eta),
                        _ => 1.0,
                    };
                    Ok(PairSample {
                        slice_a: tile_at(&aug_a, t, at_a)?,
                        slice_b: tile_at(&aug_b, t, at_b)?,
                        polarity: kind.polarity(),
                        eta,
                        provenance: Provenance {
                            kind,
                            index,
                            a: SliceSource {
                                image: img_a.id.clone(),
                                tile: at_a,
                                augment: Some(draw_a),
                            },
                            b: SliceSource {
                                image: img_b.id.clone(),
                                tile: at_b,
                                augment: Some(draw_b),
                            },
                            twin: None,
                        },
                    })
                }
            }
        })
        .collect()
}

/// Writes `pair_NNNN_a.pgm`, `pair_NNNN_b.pgm` and `pairs.tsv` (index,
/// polarity, η, provenance) for inspection.
pub fn dump_pairs(pairs: &[PairSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("# pair\tpolarity\teta\tprovenance\n");
    for (i, p) in pairs.iter().enumerate() {
        p.slice_a.write_pgm(&dir.join(format!("pair_{i:04}_a.pgm")))?;
        p.slice_b.write_pgm(&dir.join(format!("pair_{i:04}_b.pgm")))?;
        index.push_str(&format!("{i}\t{}\t{}\t{}\n", p.polarity, p.eta, p.provenance));
    }
    let file = dir.join("pairs.tsv");
    fs::write(&file, index).map_err(|e| Error::io(&file, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(side: usize) -> Image {
        Image::new(
            side,
            side,
            (0..side * side).map(|i| ((i * 37) % 101) as f32 / 100.0).collect(),
        )
        .unwrap()
    }

    fn labeled(n_pos: usize, n_neg: usize, side: usize) -> Vec<LabeledImage> {
        (0..n_pos + n_neg)
            .map(|i| LabeledImage {
                id: format!("img{i}"),
                image: ramp(side),
                label: if i < n_pos { Label::Positive } else { Label::Negative },
                eta: (i == 0).then_some(0.8),
            })
            .collect()
    }

    #[test]
    fn draws_stay_in_range() {
        let img = ramp(16);
        let mut rng = seed::rng(3, "ranges");
        let (mut rmin, mut rmax) = (f64::MAX, f64::MIN);
        let (mut smin, mut smax) = (f64::MAX, f64::MIN);
        for _ in 0..1000 {
            let (out, d) = augment(&img, &mut rng).unwrap();
            assert_eq!((out.width(), out.height()), (16, 16));
            assert!((0.9..1.0).contains(&d.blur));
            for s in [d.distort.sx, d.distort.sy] {
                assert!((0.8..=1.0).contains(&s));
                smin = smin.min(s);
                smax = smax.max(s);
            }
            rmin = rmin.min(d.blur);
            rmax = rmax.max(d.blur);
        }
        assert!(rmax - rmin >= 0.9 * 0.1);
        assert!(smax - smin >= 0.9 * 0.2);
    }

    #[test]
    fn constant_images_survive_augmentation() {
        let img = Image::filled(32, 32, 0.4);
        for r in [0.9, 0.93, 0.999] {
            assert_eq!(blur_with(&img, r).unwrap(), img);
        }
        let identity = DistortDraw {
            sx: 1.0,
            sy: 1.0,
            refit: Refit::Resize,
        };
        let varied = ramp(32);
        assert_eq!(distort_with(&varied, &identity).unwrap(), varied);
    }

    #[test]
    fn pad_branch_centres_content() {
        let img = Image::filled(256, 256, 1.0);
        let out = distort_with(
            &img,
            &DistortDraw {
                sx: 0.8,
                sy: 0.8,
                refit: Refit::Pad,
            },
        )
        .unwrap();
        // 0.8 * 256 = 204.8 rounds half-up to 205; (256 - 205) / 2 = 25
        let expect = |r: usize, c: usize| (25..230).contains(&r) && (25..230).contains(&c);
        for r in 0..256 {
            for c in 0..256 {
                assert_eq!(out.get(r, c), if expect(r, c) { 1.0 } else { 0.0 }, "({r},{c})");
            }
        }
    }

    #[test]
    fn tiling_partitions_the_image() {
        let img = ramp(256);
        assert_eq!(tile(&img, 64).unwrap().len(), 16);
        let one = tile(&img, 256).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].1, img);
        assert!(tile(&img, 60).is_err());
        let tiles = tile(&img, 32).unwrap();
        assert_eq!(tiles[1].0, TileCoord { row: 0, col: 1 });
        assert_eq!(untile(&tiles, 256).unwrap(), img);
    }

    #[test]
    fn pair_policy_preconditions() {
        let only_normal = labeled(0, 3, 16);
        let policy = PairPolicy {
            tile_size: 8,
            ..PairPolicy::default()
        };
        assert!(matches!(make_pairs(&only_normal, &policy, 1), Err(Error::Data(_))));
        let no_neg = PairPolicy {
            negative_pairs: 0,
            ..policy.clone()
        };
        assert_eq!(make_pairs(&only_normal, &no_neg, 1).unwrap().len(), 8);
    }

    #[test]
    fn pairs_follow_their_category() {
        let images = labeled(2, 2, 16);
        let policy = PairPolicy {
            tile_size: 8,
            augment_positives: 5,
            normal_pairs: 5,
            negative_pairs: 20,
            default_eta: 0.3,
        };
        let pairs = make_pairs(&images, &policy, 9).unwrap();
        assert_eq!(pairs.len(), 30);
        let mut saw_known_eta = false;
        for p in &pairs {
            let kind = p.provenance.kind;
            assert_eq!(p.polarity, kind.polarity());
            assert_eq!(p.slice_a.width(), 8);
            assert_eq!(p.slice_b.height(), 8);
            match kind {
                PairKind::Augment => {
                    let d = p.provenance.twin.unwrap();
                    let expected = distort_with(&blur_with(&p.slice_a, d.blur).unwrap(), &d.distort).unwrap();
                    assert_eq!(p.slice_b, expected);
                    assert_eq!(p.eta, 1.0);
                }
                PairKind::NormalNormal => assert_eq!(p.eta, 1.0),
                PairKind::CrossLabel => {
                    let a = images.iter().find(|i| i.id == p.provenance.a.image).unwrap();
                    assert_eq!(a.label, Label::Positive);
                    let b = images.iter().find(|i| i.id == p.provenance.b.image).unwrap();
                    assert_eq!(b.label, Label::Negative);
                    assert_eq!(p.eta, a.eta.unwrap_or(0.3));
                    saw_known_eta |= a.eta.is_some();
                }
            }
        }
        assert!(saw_known_eta);
    }

    #[test]
    fn same_seed_same_stream() {
        let images = labeled(2, 3, 16);
        let policy = PairPolicy {
            tile_size: 8,
            ..PairPolicy::default()
        };
        let a = make_pairs(&images, &policy, 42).unwrap();
        let b = make_pairs(&images, &policy, 42).unwrap();
        let bits = |ps: &[PairSample]| -> Vec<u32> {
            ps.iter()
                .flat_map(|p| p.slice_a.pixels().iter().chain(p.slice_b.pixels()).map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
        assert_ne!(a, make_pairs(&images, &policy, 43).unwrap());
    }

    #[test]
    fn dump_writes_slices_and_index() {
        let images = labeled(1, 1, 8);
        let policy = PairPolicy {
            tile_size: 4,
            augment_positives: 1,
            normal_pairs: 1,
            negative_pairs: 1,
            default_eta: 0.5,
        };
        let pairs = make_pairs(&images, &policy, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_pairs(&pairs, dir.path()).unwrap();
        let index = fs::read_to_string(dir.path().join("pairs.tsv")).unwrap();
        assert_eq!(index.lines().count(), 4);
        assert!(index.contains("cross-label#0"));
        assert!(dir.path().join("pair_0002_b.pgm").is_file());
    }

    proptest! {
        #[test]
        fn augmentation_preserves_dims_and_range(seed in any::<u64>(), side in 4usize..40) {
            let img = Image::new(side, side, (0..side * side).map(|i| ((i * 7919) % 257) as f32 / 256.0).collect()).unwrap();
            let mut rng = seed::rng(seed, "prop");
            let (out, _) = augment(&img, &mut rng).unwrap();
            prop_assert_eq!((out.width(), out.height()), (side, side));
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn tiles_round_trip(n in 1usize..5, t in 1usize..9, seed in any::<u64>()) {
            let side = n * t;
            let mut rng = seed::rng(seed, "tiles");
            let img = Image::new(side, side, (0..side * side).map(|_| rng.random::<f32>()).collect()).unwrap();
            let tiles = tile(&img, t).unwrap();
            prop_assert_eq!(tiles.len(), n * n);
            prop_assert_eq!(untile(&tiles, side).unwrap(), img);
        }
    }
}
