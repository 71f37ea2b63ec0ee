//! Overlap metrics, the random-mask baseline and evaluation reports.
//!
//! Two empty masks score 1.0 under both Dice and IoU, so a negative image
//! correctly predicted empty counts as a success.

use std::fmt::Write as _;

use rand::Rng as _;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{Label, Manifest, Split};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::seed;
use crate::trainer::InferenceModel;

pub const MIN_BASELINE_TRIALS: usize = 100;

fn overlap(a: &Mask, b: &Mask) -> Result<(usize, usize, usize)> {
    if !a.same_dims(b) {
        return Err(Error::shape(
            "mask metric",
            format!("{}×{} vs {}×{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
    Ok((inter, a.count(), b.count()))
}

/// `2|A∩B| / (|A| + |B|)`.
pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64> {
    let (inter, a, b) = overlap(pred, truth)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 })
}

/// `|A∩B| / |A∪B|`.
pub fn iou(pred: &Mask, truth: &Mask) -> Result<f64> {
    let (inter, a, b) = overlap(pred, truth)?;
    let union = a + b - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean Dice of independent Bernoulli(`rate`) masks against `truths`, over
/// `trials` rounds.
pub fn random_baseline(truths: &[Mask], rate: f64, seed: u64, trials: usize) -> Result<f64> {
    if trials < MIN_BASELINE_TRIALS {
        return Err(Error::InvalidArgument(format!(
            "baseline needs at least {MIN_BASELINE_TRIALS} trials, got {trials}"
        )));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("rate {rate} outside [0, 1]")));
    }
    if truths.is_empty() {
        return Err(Error::InvalidArgument("baseline needs at least one mask".into()));
    }
    let mut rng = seed::rng(seed, "random_baseline");
    let mut total = 0.0;
    for _ in 0..trials {
        for t in truths {
            let bits = (0..t.bits().len()).map(|_| rng.random_bool(rate)).collect();
            let pred = Mask::new(t.width(), t.height(), bits)?;
            total += dice(&pred, t)?;
        }
    }
    Ok(total / (trials * truths.len()) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub label: Label,
    pub dice: f64,
    pub iou: f64,
    pub predicted: usize,
    pub truth: usize,
    pub pixels: usize,
}

impl ImageScore {
    pub fn new(id: &str, label: Label, pred: &Mask, truth: &Mask) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            label,
            dice: dice(pred, truth)?,
            iou: iou(pred, truth)?,
            predicted: pred.count(),
            truth: truth.count(),
            pixels: truth.bits().len(),
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub checkpoint: String,
    pub config_digest: String,
    pub split: String,
    pub threshold: f64,
    pub depth: usize,
    pub images: Vec<ImageScore>,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub mean_iou: f64,
    pub std_iou: f64,
    /// Fraction of predicted foreground pixels over the split.
    pub predicted_rate: f64,
    pub baseline_dice: f64,
    pub baseline_trials: usize,
    pub baseline_seed: u64,
}

pub struct ReportMeta {
    pub checkpoint: String,
    pub config_digest: String,
    pub split: String,
    pub threshold: f64,
    pub depth: usize,
    pub baseline_trials: usize,
    pub baseline_seed: u64,
}

impl EvalReport {
    /// Aggregates per-image scores and runs the rate-matched baseline.
    pub fn build(meta: ReportMeta, images: Vec<ImageScore>, truths: &[Mask]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("evaluation split is empty".into()));
        }
        let dices: Vec<f64> = images.iter().map(|s| s.dice).collect();
        let ious: Vec<f64> = images.iter().map(|s| s.iou).collect();
        let (mean_dice, std_dice) = mean_std(&dices);
        let (mean_iou, std_iou) = mean_std(&ious);
        let predicted: usize = images.iter().map(|s| s.predicted).sum();
        let pixels: usize = images.iter().map(|s| s.pixels).sum();
        let predicted_rate = predicted as f64 / pixels as f64;
        let baseline_dice = random_baseline(truths, predicted_rate, meta.baseline_seed, meta.baseline_trials)?;
        Ok(Self {
            checkpoint: meta.checkpoint,
            config_digest: meta.config_digest,
            split: meta.split,
            threshold: meta.threshold,
            depth: meta.depth,
            images,
            mean_dice,
            std_dice,
            mean_iou,
            std_iou,
            predicted_rate,
            baseline_dice,
            baseline_trials: meta.baseline_trials,
            baseline_seed: meta.baseline_seed,
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "checkpoint  {}", self.checkpoint);
        let _ = writeln!(out, "config      {}", self.config_digest);
        let _ = writeln!(
            out,
            "split {}  depth {}  threshold {}",
            self.split, self.depth, self.threshold
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<16} {:<5} {:>8} {:>8} {:>8} {:>8}", "image", "label", "dice", "iou", "pred", "truth");
        for s in &self.images {
            let _ = writeln!(
                out,
                "{:<16} {:<5} {:>8.4} {:>8.4} {:>8} {:>8}",
                s.id, s.label, s.dice, s.iou, s.predicted, s.truth
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "mean dice   {:.4} ± {:.4}", self.mean_dice, self.std_dice);
        let _ = writeln!(out, "mean iou    {:.4} ± {:.4}", self.mean_iou, self.std_iou);
        let _ = writeln!(
            out,
            "baseline    {:.4}  (random masks at predicted rate {:.4}, {} trials)",
            self.baseline_dice, self.predicted_rate, self.baseline_trials
        );
        out
    }

    /// `key=value` lines; per-image rows are `image.<n>=id,label,dice,iou,pred,truth`.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "checkpoint={}", self.checkpoint);
        let _ = writeln!(out, "config_digest={}", self.config_digest);
        let _ = writeln!(out, "split={}", self.split);
        let _ = writeln!(out, "depth={}", self.depth);
        let _ = writeln!(out, "threshold={}", self.threshold);
        let _ = writeln!(out, "images={}", self.images.len());
        let _ = writeln!(out, "mean_dice={}", self.mean_dice);
        let _ = writeln!(out, "std_dice={}", self.std_dice);
        let _ = writeln!(out, "mean_iou={}", self.mean_iou);
        let _ = writeln!(out, "std_iou={}", self.std_iou);
        let _ = writeln!(out, "predicted_rate={}", self.predicted_rate);
        let _ = writeln!(out, "baseline_dice={}", self.baseline_dice);
        let _ = writeln!(out, "baseline_trials={}", self.baseline_trials);
        let _ = writeln!(out, "baseline_seed={}", self.baseline_seed);
        for (i, s) in self.images.iter().enumerate() {
            let _ = writeln!(
                out,
                "image.{i}={},{},{},{},{},{}",
                s.id, s.label, s.dice, s.iou, s.predicted, s.truth
            );
        }
        out
    }
}

pub const DEFAULT_BASELINE_TRIALS: usize = 200;

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub split: Split,
    /// Falls back to the checkpoint's `infer.threshold`.
    pub threshold: Option<f64>,
    pub depth: Option<usize>,
    pub baseline_trials: usize,
    pub baseline_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            threshold: None,
            depth: None,
            baseline_trials: DEFAULT_BASELINE_TRIALS,
            baseline_seed: 0,
        }
    }
}

/// First 16 hex digits of the SHA-256 of a config block.
pub fn config_digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Runs inference over one split and scores it against the hidden masks.
pub fn evaluate(ckpt: &Path, data: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let ck = Checkpoint::read(ckpt)?;
    let model = InferenceModel::from_checkpoint(&ck)?;
    let manifest = Manifest::load(data)?;
    let records: Vec<_> = manifest.split(opts.split).collect();
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !manifest.eval_mask_path(r).is_file())
        .map(|r| r.id())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("hidden masks missing for: {}", missing.join(", "))));
    }
    let threshold = opts.threshold.unwrap_or(model.config.infer.threshold);
    let depth = model.resolve_depth(opts.depth);
    let scored: Vec<(ImageScore, Mask)> = records
        .par_iter()
        .map(|rec| {
            let image = Image::read_pgm(&manifest.resolve(&rec.path))?;
            let truth = Mask::read_pgm(&manifest.eval_mask_path(rec))?;
            let pred = model.infer(&image, Some(depth), threshold)?;
            Ok((ImageScore::new(&rec.id(), rec.label, &pred, &truth)?, truth))
        })
        .collect::<Result<_>>()?;
    let (images, truths): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    let meta = ReportMeta {
        checkpoint: ckpt.display().to_string(),
        config_digest: config_digest(&ck.config_text),
        split: opts.split.to_string(),
        threshold,
        depth,
        baseline_trials: opts.baseline_trials,
        baseline_seed: opts.baseline_seed,
    };
    EvalReport::build(meta, images, &truths)
}

/// Writes `<ckpt>.eval.txt` (table) and `<ckpt>.eval.kv` next to the checkpoint.
pub fn write_report(report: &EvalReport, ckpt: &Path) -> Result<(PathBuf, PathBuf)> {
    let sibling = |ext: &str| {
        let mut name = ckpt.as_os_str().to_os_string();
        name.push(ext);
        PathBuf::from(name)
    };
    let (table, kv) = (sibling(".eval.txt"), sibling(".eval.kv"));
    fs::write(&table, report.to_table()).map_err(|e| Error::io(&table, e))?;
    fs::write(&kv, report.to_kv()).map_err(|e| Error::io(&kv, e))?;
    Ok((table, kv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: usize, bits: &[u8]) -> Mask {
        Mask::new(w, bits.len() / w, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    #[test]
    fn dice_and_iou_examples() {
        let a = mask(4, &[1, 1, 0, 0]);
        let b = mask(4, &[0, 1, 1, 0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(4, &[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &mask(4, &[0, 0, 1, 1])).unwrap(), 0.0);
        let empty = Mask::empty(4, 1);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert!(dice(&a, &Mask::empty(2, 2)).is_err());
    }

    #[test]
    fn baseline_extremes() {
        let t = mask(4, &[1, 0, 0, 0, 1, 1, 0, 0]);
        assert_eq!(random_baseline(std::slice::from_ref(&t), 0.0, 1, 100).unwrap(), 0.0);
        let rho = 3.0 / 8.0;
        let full = random_baseline(std::slice::from_ref(&t), 1.0, 1, 100).unwrap();
        assert!((full - 2.0 * rho / (1.0 + rho)).abs() < 1e-12);
        assert!(random_baseline(&[t], 0.5, 1, 99).is_err());
    }

    /// Exact expectation: with t truth pixels among n, the hits X ~ Bin(t, q)
    /// and false alarms Y ~ Bin(n - t, q) give Dice 2X / (X + Y + t).
    fn expected_dice(n: usize, t: usize, q: f64) -> f64 {
        fn binom(n: usize, k: usize, q: f64) -> f64 {
            let mut c = 1.0;
            for i in 0..k {
                c *= (n - i) as f64 / (i + 1) as f64;
            }
            c * q.powi(k as i32) * (1.0 - q).powi((n - k) as i32)
        }
        let mut e = 0.0;
        for x in 0..=t {
            for y in 0..=n - t {
                let d = if x + y + t == 0 { 1.0 } else { 2.0 * x as f64 / (x + y + t) as f64 };
                e += binom(t, x, q) * binom(n - t, y, q) * d;
            }
        }
        e
    }

    #[test]
    fn baseline_matches_closed_form() {
        let t = mask(3, &[1, 1, 0, 0, 1, 0, 0, 0, 0]);
        for q in [0.1, 0.3, 0.7] {
            let trials = 20_000;
            let mc = random_baseline(std::slice::from_ref(&t), q, 7, trials).unwrap();
            let exact = expected_dice(9, 3, q);
            // dice lies in [0, 1], so its std is at most 0.5
            let tol = 4.0 * 0.5 / (trials as f64).sqrt();
            assert!((mc - exact).abs() < tol, "q={q}: {mc} vs {exact}");
        }
    }

    #[test]
    fn report_aggregates_per_image_values() {
        let truths = vec![mask(2, &[1, 0, 0, 0]), Mask::empty(2, 2)];
        let preds = [mask(2, &[1, 1, 0, 0]), Mask::empty(2, 2)];
        let images: Vec<ImageScore> = ["a", "b"]
            .iter()
            .zip(preds.iter().zip(&truths))
            .map(|(id, (p, t))| ImageScore::new(id, Label::Positive, p, t).unwrap())
            .collect();
        let meta = || ReportMeta {
            checkpoint: "ck".into(),
            config_digest: "0".into(),
            split: "test".into(),
            threshold: 0.5,
            depth: 2,
            baseline_trials: 200,
            baseline_seed: 3,
        };
        let r = EvalReport::build(meta(), images.clone(), &truths).unwrap();
        let (m, _) = mean_std(&[2.0 / 3.0, 1.0]);
        assert_eq!(r.mean_dice, m);
        assert_eq!(r.predicted_rate, 2.0 / 8.0);
        let again = EvalReport::build(meta(), images, &truths).unwrap();
        assert_eq!(r.to_kv(), again.to_kv());
        assert!(r.to_kv().contains("image.1=b,pos,1,1,0,0"));
    }

    proptest! {
        #[test]
        fn metric_identities(a in proptest::collection::vec(any::<bool>(), 25), b in proptest::collection::vec(any::<bool>(), 25)) {
            let (ma, mb) = (Mask::new(5, 5, a).unwrap(), Mask::new(5, 5, b).unwrap());
            let d = dice(&ma, &mb).unwrap();
            let j = iou(&ma, &mb).unwrap();
            prop_assert_eq!(d, dice(&mb, &ma).unwrap());
            prop_assert_eq!(j, iou(&mb, &ma).unwrap());
            prop_assert!(j <= d + 1e-15);
            prop_assert!((j - d / (2.0 - d)).abs() < 1e-9);
        }
    }
}
