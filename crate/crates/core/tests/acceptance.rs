//! Acceptance gate: one PASS/FAIL line per criterion, written straight to
//! stdout so it shows up without `--nocapture`. Criteria run one at a time
//! because several of them are timed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use clamseg::augment::{augment, BLUR_RANGE, DISTORT_RANGE};
use clamseg::checkpoint::Checkpoint;
use clamseg::data::{generate_phantom, generate_phantoms, organ_mask, Difficulty, Label, MaskMode, PhantomParams};
use clamseg::image::{Image, Mask};
use clamseg::loss::{hybrid_loss_value, PseudoTarget};
use clamseg::metrics::{dice, iou};
use clamseg::seed;
use clamseg::trainer::TrainState;
use clamseg::unetpp::{ModelGraph, UnetPPConfig};
use clamseg::verify::{run_suite, Module, REFERENCE_SEEDS};
use clamseg::Tensor;
use rand::Rng as _;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: &str, pass: bool, detail: &str) {
    let line = format!("acceptance {id}: {}  {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn gate(id: &str, pass: bool, detail: String) {
    report(id, pass, &detail);
    assert!(pass, "criterion {id} failed: {detail}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clamseg"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("spawn clamseg");
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
}

// Independent scalar oracle: straight transcription of the per-pixel sum,
// one class value at a time, in f64.
fn oracle_hybrid(y: &[f64], p: &[f64], classes: usize) -> f64 {
    let pixels = y.len() / classes;
    let mut total = 0.0;
    for i in 0..y.len() {
        let (yv, pv) = (y[i], p[i]);
        let log_term = yv * pv.max(1e-7).ln();
        let denom = yv * yv + pv * pv;
        let ratio = if denom == 0.0 { 0.0 } else { yv * pv / denom };
        total += log_term + ratio;
    }
    -total / pixels as f64
}

/// Channel-major `[1, C, P, 1]` loss through the library.
fn library_hybrid(y: &[f64], p: &[f64], classes: usize) -> f64 {
    let dims = vec![1, classes, y.len() / classes, 1];
    let y = Tensor::new(dims.clone(), y.to_vec()).unwrap();
    let p = Tensor::new(dims, p.to_vec()).unwrap();
    hybrid_loss_value(&PseudoTarget::from_tensor(y, false), &p).unwrap()
}

#[test]
fn criterion_1_gradient_suite() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let result = run_suite(Module::All, REFERENCE_SEEDS);
    let elapsed = start.elapsed();
    match result {
        Ok(r) => {
            let cases = r.case_lines().len();
            let pass = r.pass() && elapsed <= Duration::from_secs(60);
            gate(
                "1 gradient suite",
                pass,
                format!(
                    "{cases} cases x {REFERENCE_SEEDS} seeds, max rel err {:.2e} (tol 1e-4), {:.1}s (limit 60s)",
                    r.max_rel_err(),
                    elapsed.as_secs_f64()
                ),
            );
        }
        Err(e) => gate("1 gradient suite", false, e.to_string()),
    }
}

#[test]
fn criterion_2_loss_oracles() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    // two classes, channel-major
    let cases: [(&str, Vec<f64>, Vec<f64>, f64); 3] = [
        ("perfect one-hot", vec![1.0, 0.0], vec![1.0, 0.0], -0.5),
        ("y=1 p=0.5", vec![1.0, 0.0], vec![0.5, 0.5], 0.29314718),
        ("two-pixel mean", vec![1.0, 1.0, 0.0, 0.0], vec![1.0, 0.5, 0.0, 0.5], -0.10342641),
    ];
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for (_, y, p, expected) in &cases {
        let oracle = oracle_hybrid(y, p, 2);
        let lib = library_hybrid(y, p, 2);
        let err = (oracle - expected).abs().max((lib - oracle).abs());
        worst = worst.max(err);
        pass &= (oracle - expected).abs() <= 1e-6 && (lib - oracle).abs() <= 1e-6;
    }
    let zero = library_hybrid(&[0.0, 0.0], &[0.0, 0.0], 2);
    pass &= zero == 0.0;
    gate(
        "2 loss oracles",
        pass,
        format!("3 reference values, max deviation {worst:.2e} (tol 1e-6); 0/0 term = {zero:?}"),
    );
}

#[test]
fn criterion_3_pruning_bit_identity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = UnetPPConfig::with_levels(5, 32, 4);
    let full = ModelGraph::build(&cfg, 7).unwrap();
    let mut rng = seed::rng(3, "acceptance/pruning");
    let inputs: Vec<Tensor<f32>> = (0..10)
        .map(|_| Tensor::from_fn(&[1, 1, 32, 32], |_| rng.random_range(0.0f32..1.0)))
        .collect();
    let mut checked = 0;
    let mut pass = true;
    for d in 1..=4 {
        let pruned = full.pruned(d).unwrap();
        for x in &inputs {
            let a = full.forward(x, Some(d)).unwrap();
            let b = pruned.forward(x, None).unwrap();
            let same = a
                .tensor()
                .data()
                .iter()
                .zip(b.tensor().data())
                .all(|(u, v)| u.to_bits() == v.to_bits());
            pass &= same && a.tensor().dims() == b.tensor().dims();
            checked += 1;
        }
    }
    gate(
        "3 pruning bit-identity",
        pass,
        format!("L=5, depths 1..4, {checked} forward comparisons, bitwise"),
    );
}

#[test]
fn criterion_4_augmentation_ranges() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let base = Image::new(32, 32, (0..1024).map(|i| (i % 37) as f32 / 36.0).collect()).unwrap();
    let (mut bmin, mut bmax, mut dmin, mut dmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    let mut pass = true;
    for i in 0..1000u64 {
        let mut rng = seed::rng(i, "acceptance/augment");
        let (out, draw) = augment(&base, &mut rng).unwrap();
        let b = draw.blur;
        let (sx, sy) = (draw.distort.sx, draw.distort.sy);
        pass &= (0.90..1.00).contains(&b);
        pass &= (0.80..=1.00).contains(&sx) && (0.80..=1.00).contains(&sy);
        pass &= out.width() == 32 && out.height() == 32;
        bmin = bmin.min(b);
        bmax = bmax.max(b);
        dmin = dmin.min(sx.min(sy));
        dmax = dmax.max(sx.max(sy));
    }
    pass &= BLUR_RANGE == (0.90, 1.00) && DISTORT_RANGE == (0.80, 1.00);
    gate(
        "4 augmentation ranges",
        pass,
        format!("1000 draws: blur in [{bmin:.4}, {bmax:.4}], distortion in [{dmin:.4}, {dmax:.4}], dims preserved"),
    );
}

const SMALL_CONFIG: &str = "\
model.levels = 2
model.base_channels = 4
pairs.tile_size = 16
pairs.augment_positives = 2
pairs.normal_pairs = 2
pairs.negative_pairs = 2
data.image_size = 32
train.steps = 4
train.checkpoint_every = 2
";

fn train_cli(data: &Path, config: &Path, out: &Path) {
    run_ok(bin().arg("train").arg("--data").arg(data).arg("--config").arg(config).arg("--out").arg(out));
}

#[test]
fn criterion_5_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_phantoms(&data, 24, 0.5, 5, &PhantomParams::new(32, Difficulty::Easy)).unwrap();
    let config = dir.path().join("small.cfg");
    fs::write(&config, SMALL_CONFIG).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    train_cli(&data, &config, &a);
    train_cli(&data, &config, &b);
    let read = |p: &Path| fs::read(p).unwrap();
    let ckpt_same = read(&a) == read(&b);
    let log = |p: &Path| fs::read(format!("{}.metrics.tsv", p.display())).unwrap();
    let log_same = log(&a) == log(&b);

    let bytes = read(&a);
    let state = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let round_trip = state.to_checkpoint().to_bytes() == bytes;
    let resumed = dir.path().join("resumed.ckpt");
    run_ok(
        bin()
            .arg("train")
            .arg("--data")
            .arg(&data)
            .arg("--resume")
            .arg(&a)
            .arg("--steps")
            .arg("0")
            .arg("--out")
            .arg(&resumed),
    );
    let resume_same = read(&resumed) == bytes;
    gate(
        "5 determinism",
        ckpt_same && log_same && round_trip && resume_same,
        format!(
            "checkpoints identical {ckpt_same}, logs identical {log_same}, round trip {round_trip}, resume+0 steps {resume_same}"
        ),
    );
}

const SMOKE_CONFIG: &str = "\
model.levels = 3
model.base_channels = 8
pairs.tile_size = 32
data.image_size = 64
train.steps = 200
train.checkpoint_every = 0
";

fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn criterion_6_end_to_end_smoke() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (raw, pre) = (dir.path().join("raw"), dir.path().join("pre"));
    run_ok(
        bin()
            .args(["gen-data", "--count", "200", "--positive-frac", "0.5", "--seed", "1"])
            .args(["--difficulty", "easy", "--size", "64", "--out"])
            .arg(&raw),
    );
    run_ok(bin().arg("preprocess").arg("--in").arg(&raw).arg("--out").arg(&pre).args(["--size", "64"]));
    let config = dir.path().join("smoke.cfg");
    fs::write(&config, SMOKE_CONFIG).unwrap();
    let ckpt = dir.path().join("smoke.ckpt");
    train_cli(&pre, &config, &ckpt);
    run_ok(bin().arg("eval").arg("--ckpt").arg(&ckpt).arg("--data").arg(&pre).args(["--split", "test"]));
    let elapsed = start.elapsed();

    let log = fs::read_to_string(format!("{}.metrics.tsv", ckpt.display())).unwrap();
    let totals: Vec<f64> = log
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (first, last) = (mean(&totals[..10]), mean(&totals[totals.len() - 10..]));
    let loss_ok = totals.len() == 200 && last < 0.7 * first;

    let kv = parse_kv(&fs::read_to_string(format!("{}.eval.kv", ckpt.display())).unwrap());
    let get = |k: &str| kv[k].parse::<f64>().unwrap();
    let (dice_mean, baseline) = (get("mean_dice"), get("baseline_dice"));
    let margin = dice_mean - baseline;
    let dice_ok = margin >= 0.10 && get("baseline_trials") as usize == 200;
    let time_ok = elapsed <= Duration::from_secs(15 * 60);
    gate(
        "6 end-to-end smoke",
        loss_ok && dice_ok && time_ok,
        format!(
            "(a) loss first10 {first:.4} last10 {last:.4}, last < 0.7*first: {loss_ok}; \
             (b) test dice {dice_mean:.4} vs baseline {baseline:.4} at rate {:.4}, margin {margin:+.4} (need +0.10): {dice_ok}; \
             {:.0}s (limit 900s)",
            get("predicted_rate"),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_organ_mask_stub() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let params = PhantomParams::new(256, Difficulty::Easy);
    let mut worst = 1.0f64;
    let mut total = 0.0;
    for i in 0..100u64 {
        let label = if i % 2 == 0 { Label::Positive } else { Label::Negative };
        let ph = generate_phantom(&params, label, seed::derive(11, &format!("acceptance/organ/{i}")));
        let mask: Mask = organ_mask(&ph.pixels, MaskMode::Threshold, None).unwrap();
        let d = dice(&mask, &ph.organ_mask).unwrap();
        worst = worst.min(d);
        total += d;
    }
    gate(
        "7 organ-mask stub",
        worst >= 0.95,
        format!("100 images at 256, threshold mode: min dice {worst:.4}, mean {:.4} (need >= 0.95)", total / 100.0),
    );
}

#[test]
fn criterion_8_metric_identities() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = seed::rng(8, "acceptance/metrics");
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..24), rng.random_range(1..24));
        let da = rng.random_range(0.0..1.0);
        let db = rng.random_range(0.0..1.0);
        let a = Mask::new(w, h, (0..w * h).map(|_| rng.random_bool(da)).collect()).unwrap();
        let b = Mask::new(w, h, (0..w * h).map(|_| rng.random_bool(db)).collect()).unwrap();
        let d = dice(&a, &b).unwrap();
        worst = worst.max((iou(&a, &b).unwrap() - d / (2.0 - d)).abs());
    }
    let empty = Mask::empty(5, 5);
    let both_empty = (dice(&empty, &empty).unwrap(), iou(&empty, &empty).unwrap());
    gate(
        "8 metric identities",
        worst <= 1e-9 && both_empty == (1.0, 1.0),
        format!("1000 random pairs, max |iou - d/(2-d)| {worst:.2e} (tol 1e-9); both-empty dice, iou = {both_empty:?}"),
    );
}
