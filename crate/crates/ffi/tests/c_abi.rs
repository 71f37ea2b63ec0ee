use std::ffi::{CStr, CString};
use std::ptr;

use clamseg::trainer::TrainState;
use clamseg::config::RunConfig;
use clamseg::unetpp::UnetPPConfig;
use clamseg_ffi::*;

fn last_error() -> String {
    let n = unsafe { clam_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0u8; n + 1];
    unsafe { clam_last_error(buf.as_mut_ptr() as *mut _, buf.len()) };
    CStr::from_bytes_until_nul(&buf).unwrap().to_str().unwrap().to_string()
}

fn write_checkpoint(dir: &std::path::Path) -> CString {
    let mut cfg = RunConfig::default();
    cfg.pairs.tile_size = 8;
    cfg.model = UnetPPConfig::with_levels(3, 8, 2);
    cfg.image_size = 16;
    let path = dir.join("m.ckpt");
    TrainState::new(cfg).unwrap().to_checkpoint().write(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(clam_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_handle_lifecycle_and_inference() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { clam_model_load(path.as_ptr(), &mut model) }, ClamStatus::Ok);
    assert!(!model.is_null());

    let mut tile = 0;
    let mut depth = 0;
    assert_eq!(unsafe { clam_model_tile_size(model, &mut tile) }, ClamStatus::Ok);
    assert_eq!(unsafe { clam_model_depth_limit(model, &mut depth) }, ClamStatus::Ok);
    assert_eq!((tile, depth), (8, 2));

    let side = 16;
    let pixels: Vec<f32> = (0..side * side).map(|i| (i % 13) as f32 / 12.0).collect();
    let mut probs = vec![0f32; side * side];
    let st = unsafe { clam_model_probability(model, pixels.as_ptr(), side, 0, probs.as_mut_ptr()) };
    assert_eq!(st, ClamStatus::Ok);
    assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));

    let mut mask = vec![7u8; side * side];
    let st = unsafe { clam_model_infer(model, pixels.as_ptr(), side, 0, 0.5, mask.as_mut_ptr()) };
    assert_eq!(st, ClamStatus::Ok);
    for (m, p) in mask.iter().zip(&probs) {
        assert_eq!(*m, (*p >= 0.5) as u8);
    }

    // tile size must divide the side
    let st = unsafe { clam_model_probability(model, pixels.as_ptr(), 12, 0, probs.as_mut_ptr()) };
    assert_eq!(st, ClamStatus::InvalidArgument);
    assert!(last_error().contains("divide"), "{}", last_error());

    unsafe { clam_model_free(model) };
    unsafe { clam_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_map_to_status_codes() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/m.ckpt").unwrap();
    assert_eq!(unsafe { clam_model_load(missing.as_ptr(), &mut model) }, ClamStatus::Io);
    assert!(model.is_null());
    assert!(!last_error().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { clam_model_load(junk.as_ptr(), &mut model) }, ClamStatus::Format);
    assert_eq!(unsafe { clam_model_load(ptr::null(), &mut model) }, ClamStatus::NullPointer);
}

#[test]
fn hybrid_loss_matches_the_known_values() {
    let mut out = 0.0;
    // perfect one-hot over two pixels
    let y = [1.0f32, 0.0, 0.0, 1.0];
    assert_eq!(unsafe { clam_hybrid_loss(y.as_ptr(), y.as_ptr(), 2, 2, &mut out) }, ClamStatus::Ok);
    assert!((out + 0.5).abs() < 1e-6);
    // y = 1 on one class, p = 0.5 on both
    let y = [1.0f32, 0.0];
    let p = [0.5f32, 0.5];
    assert_eq!(unsafe { clam_hybrid_loss(y.as_ptr(), p.as_ptr(), 2, 1, &mut out) }, ClamStatus::Ok);
    assert!((out - 0.29314718).abs() < 1e-6);
    let bad = [1.5f32, 0.0];
    assert_ne!(unsafe { clam_hybrid_loss(bad.as_ptr(), p.as_ptr(), 2, 1, &mut out) }, ClamStatus::Ok);
    assert_eq!(unsafe { clam_hybrid_loss(y.as_ptr(), p.as_ptr(), 0, 1, &mut out) }, ClamStatus::InvalidArgument);
}

#[test]
fn overlap_metrics() {
    let a = [1u8, 1, 0, 0];
    let b = [0u8, 1, 1, 0];
    let (mut d, mut j) = (0.0, 0.0);
    assert_eq!(unsafe { clam_dice(a.as_ptr(), b.as_ptr(), 4, &mut d) }, ClamStatus::Ok);
    assert_eq!(unsafe { clam_iou(a.as_ptr(), b.as_ptr(), 4, &mut j) }, ClamStatus::Ok);
    assert_eq!(d, 0.5);
    assert!((j - 1.0 / 3.0).abs() < 1e-15);
    let z = [0u8; 4];
    assert_eq!(unsafe { clam_dice(z.as_ptr(), z.as_ptr(), 4, &mut d) }, ClamStatus::Ok);
    assert_eq!(d, 1.0);
    assert_eq!(unsafe { clam_dice(ptr::null(), b.as_ptr(), 4, &mut d) }, ClamStatus::NullPointer);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/clamseg.h")).unwrap();
    for name in [
        "clam_last_error",
        "clam_version",
        "clam_model_load",
        "clam_model_free",
        "clam_model_tile_size",
        "clam_model_depth_limit",
        "clam_model_probability",
        "clam_model_infer",
        "clam_hybrid_loss",
        "clam_dice",
        "clam_iou",
        "typedef struct ClamModel ClamModel",
        "CLAM_STATUS_PANIC = 8",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    assert!(header.contains("size_t"));
}
