use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clamseg::data::Manifest;
use clamseg::image::Image;

fn clamseg(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clamseg"));
    for a in args {
        cmd.arg(a);
    }
    cmd.output().expect("spawn clamseg")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path, name: &str, count: &str, frac: &str, size: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&clamseg(&[
        &"gen-data",
        &"--out",
        &out,
        &"--count",
        &count,
        &"--positive-frac",
        &frac,
        &"--seed",
        &"1",
        &"--size",
        &size,
    ]));
    out
}

#[test]
fn gen_data_is_labeled_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", "10", "0.5", "64");
    let b = gen(dir.path(), "b", "10", "0.5", "64");
    let m = Manifest::load(&a).unwrap();
    assert_eq!(m.records.len(), 10);
    assert_eq!(m.records.iter().filter(|r| r.label == clamseg::data::Label::Positive).count(), 5);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn training_without_positives_fails_clearly() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "neg", "8", "0", "32");
    assert!(Manifest::load(&data).unwrap().records.iter().all(|r| r.label == clamseg::data::Label::Negative));
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "model.levels = 2\nmodel.base_channels = 2\npairs.tile_size = 16\ndata.image_size = 32\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = clamseg(&[&"train", &"--data", &data, &"--config", &cfg, &"--out", &ckpt, &"--steps", &"1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("positive"), "{err}");
    assert!(!ckpt.exists());
}

#[test]
fn config_errors_cite_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", "4", "0.5", "32");
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "model.levels = 2\n# fine\nmodel.bogus = 1\n").unwrap();
    let out = clamseg(&[&"train", &"--data", &data, &"--config", &cfg, &"--out", &dir.path().join("x")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn preprocess_resizes_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let raw = gen(dir.path(), "raw", "6", "0.5", "96");
    let (once, twice) = (dir.path().join("p1"), dir.path().join("p2"));
    ok(&clamseg(&[&"preprocess", &"--in", &raw, &"--out", &once, &"--size", &"256"]));
    ok(&clamseg(&[&"preprocess", &"--in", &once, &"--out", &twice, &"--size", &"256"]));
    let first = Manifest::load(&once).unwrap();
    let second = Manifest::load(&twice).unwrap();
    assert_eq!(first.records.len(), 6);
    let mut worst = 0.0f32;
    for (a, b) in first.records.iter().zip(&second.records) {
        let ia = Image::read_pgm(&first.resolve(&a.path)).unwrap();
        let ib = Image::read_pgm(&second.resolve(&b.path)).unwrap();
        assert_eq!((ia.width(), ia.height()), (256, 256));
        for (u, v) in ia.pixels().iter().zip(ib.pixels()) {
            worst = worst.max((u - v).abs());
        }
    }
    assert!(worst <= 1.0 / 255.0 + 1e-6, "max drift {worst}");
}

#[test]
fn external_mode_without_masks_lists_every_record() {
    let dir = tempfile::tempdir().unwrap();
    let raw = gen(dir.path(), "raw", "3", "0.5", "32");
    let manifest = raw.join("manifest.tsv");
    let text = fs::read_to_string(&manifest).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| {
            if l.starts_with('#') {
                l.to_string()
            } else {
                let mut cols: Vec<&str> = l.split('\t').collect();
                cols[2] = "-";
                cols.join("\t")
            }
        })
        .map(|l| l + "\n")
        .collect();
    fs::write(&manifest, stripped).unwrap();
    let out = clamseg(&[&"preprocess", &"--in", &raw, &"--out", &dir.path().join("p"), &"--mask-mode", &"external", &"--size", &"32"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for id in ["img_0000", "img_0001", "img_0002"] {
        assert!(err.contains(id), "{id} not reported: {err}");
    }
}

#[test]
fn infer_at_depth_matches_the_pruned_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", "8", "0.5", "32");
    let cfg = dir.path().join("c.cfg");
    fs::write(
        &cfg,
        "model.levels = 3\nmodel.base_channels = 2\npairs.tile_size = 16\npairs.augment_positives = 1\n\
         pairs.normal_pairs = 1\npairs.negative_pairs = 1\ndata.image_size = 32\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    ok(&clamseg(&[&"train", &"--data", &data, &"--config", &cfg, &"--out", &ckpt, &"--steps", &"2"]));
    let pruned = dir.path().join("p.ckpt");
    ok(&clamseg(&[&"prune", &"--ckpt", &ckpt, &"--depth", &"2", &"--out", &pruned]));
    assert!(fs::metadata(&pruned).unwrap().len() < fs::metadata(&ckpt).unwrap().len());

    let image = data.join("images/img_0000.pgm");
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    ok(&clamseg(&[&"infer", &"--ckpt", &ckpt, &"--image", &image, &"--out", &a, &"--depth", &"2"]));
    ok(&clamseg(&[&"infer", &"--ckpt", &pruned, &"--image", &image, &"--out", &b]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    ok(&clamseg(&[&"eval", &"--ckpt", &ckpt, &"--data", &data, &"--split", &"train"]));
    let kv = fs::read_to_string(format!("{}.eval.kv", ckpt.display())).unwrap();
    assert!(kv.contains("baseline_trials=200"));
    let again = dir.path().join("again.kv");
    fs::copy(format!("{}.eval.kv", ckpt.display()), &again).unwrap();
    ok(&clamseg(&[&"eval", &"--ckpt", &ckpt, &"--data", &data, &"--split", &"train"]));
    assert_eq!(fs::read(&again).unwrap(), fs::read(format!("{}.eval.kv", ckpt.display())).unwrap());
}

#[test]
fn gradcheck_command_exits_zero() {
    let out = clamseg(&[&"gradcheck", &"--module", &"loss", &"--seeds", &"2"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("hybrid_softmax_onehot"));
}

#[test]
fn dump_pairs_writes_a_batch() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", "6", "0.5", "32");
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "pairs.tile_size = 16\npairs.augment_positives = 1\npairs.normal_pairs = 1\npairs.negative_pairs = 1\ndata.image_size = 32\n").unwrap();
    let out = dir.path().join("pairs");
    ok(&clamseg(&[&"dump-pairs", &"--data", &data, &"--config", &cfg, &"--out", &out]));
    let index = fs::read_to_string(out.join("pairs.tsv")).unwrap();
    assert_eq!(index.lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn help_lists_config_keys() {
    let out = clamseg(&[&"train", &"--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for k in clamseg::config::KEYS {
        assert!(text.contains(k.key), "{}", k.key);
    }
}
