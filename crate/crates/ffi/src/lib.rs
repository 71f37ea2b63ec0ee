//! C ABI over checkpoint inference, the hybrid loss and the overlap metrics.
//!
//! Every fallible call returns a [`ClamStatus`]; on failure the message is
//! kept per thread and read back with [`clam_last_error`]. Models are opaque
//! handles owned by the caller and released with [`clam_model_free`].
//! Panics never cross the boundary: they surface as `CLAM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use clamseg::error::Error;
use clamseg::image::{Image, Mask};
use clamseg::loss::{hybrid_loss_value, PseudoTarget};
use clamseg::metrics;
use clamseg::trainer::InferenceModel;
use clamseg::Tensor;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Numeric = 7,
    Panic = 8,
}

/// Loaded inference model.
pub struct ClamModel {
    inner: InferenceModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.as_bytes().to_vec());
}

fn status_of(err: &Error) -> ClamStatus {
    match err {
        Error::Shape { .. } | Error::NotScalar(_) => ClamStatus::Shape,
        Error::Io { .. } => ClamStatus::Io,
        Error::Format { .. } => ClamStatus::Format,
        Error::Config(_) | Error::ConfigLine { .. } | Error::UnknownParameter(_) | Error::MissingParameter(_) => {
            ClamStatus::Config
        }
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => ClamStatus::Numeric,
        _ => ClamStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (ClamStatus, String)>) -> ClamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ClamStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ClamStatus::Panic
        }
    }
}

fn fail(e: Error) -> (ClamStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ClamStatus, String) {
    (ClamStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (ClamStatus, String) {
    (ClamStatus::InvalidArgument, msg.into())
}

/// Reads a `len`-element array; a zero length accepts a null pointer.
unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (ClamStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn depth_arg(depth: usize) -> Option<usize> {
    (depth != 0).then_some(depth)
}

/// Copies the calling thread's last error message (NUL-terminated, truncated
/// to `len`) into `buf`. Returns the full message length excluding the NUL,
/// so a call with `len = 0` sizes the buffer.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null when `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn clam_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn clam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint from `path` into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clam_model_load(path: *const c_char, out: *mut *mut ClamModel) -> ClamStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not utf-8"))?;
        let inner = InferenceModel::load(Path::new(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(ClamModel { inner }));
        Ok(())
    })
}

/// Releases a handle from [`clam_model_load`]; null is a no-op.
///
/// # Safety
/// `model` must come from [`clam_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn clam_model_free(model: *mut ClamModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Tile side the model was trained at; image sides must be multiples of it.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn clam_model_tile_size(model: *const ClamModel, out: *mut usize) -> ClamStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.inner.tile_size();
        Ok(())
    })
}

/// Deepest supervision depth available (lower after pruning).
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn clam_model_depth_limit(model: *const ClamModel, out: *mut usize) -> ClamStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.inner.graph.depth_limit();
        Ok(())
    })
}

unsafe fn read_image(pixels: *const f32, side: usize) -> Result<Image, (ClamStatus, String)> {
    if side == 0 {
        return Err(invalid("side must be positive"));
    }
    let data = input(pixels, side * side, "pixels")?;
    Image::new(side, side, data.to_vec()).map_err(fail)
}

/// Marker probabilities for a row-major `side × side` image with values in
/// `[0, 1]`. `depth = 0` selects the model's default depth. Writes
/// `side * side` floats to `out`.
///
/// # Safety
/// `pixels` and `out` must each hold `side * side` floats.
#[no_mangle]
pub unsafe extern "C" fn clam_model_probability(
    model: *const ClamModel,
    pixels: *const f32,
    side: usize,
    depth: usize,
    out: *mut f32,
) -> ClamStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let image = read_image(pixels, side)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = m.inner.marker_probability(&image, depth_arg(depth)).map_err(fail)?;
        slice::from_raw_parts_mut(out, side * side).copy_from_slice(p.pixels());
        Ok(())
    })
}

/// Binary marker mask (0 or 1 per pixel) at `threshold`.
///
/// # Safety
/// `pixels` must hold `side * side` floats and `out` as many bytes.
#[no_mangle]
pub unsafe extern "C" fn clam_model_infer(
    model: *const ClamModel,
    pixels: *const f32,
    side: usize,
    depth: usize,
    threshold: f32,
    out: *mut u8,
) -> ClamStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let image = read_image(pixels, side)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mask = m
            .inner
            .infer(&image, depth_arg(depth), threshold as f64)
            .map_err(fail)?;
        let dst = slice::from_raw_parts_mut(out, side * side);
        for (d, &b) in dst.iter_mut().zip(mask.bits()) {
            *d = b as u8;
        }
        Ok(())
    })
}

/// Hybrid loss of channel-major maps: `classes` planes of `pixels` values
/// each, targets and predictions in `[0, 1]`.
///
/// # Safety
/// `target` and `pred` must each hold `classes * pixels` floats.
#[no_mangle]
pub unsafe extern "C" fn clam_hybrid_loss(
    target: *const f32,
    pred: *const f32,
    classes: usize,
    pixels: usize,
    out: *mut f64,
) -> ClamStatus {
    guard(|| {
        if classes == 0 || pixels == 0 {
            return Err(invalid("classes and pixels must be positive"));
        }
        let n = classes * pixels;
        let dims = vec![1, classes, pixels, 1];
        let y = Tensor::new(dims.clone(), input(target, n, "target")?.to_vec()).map_err(fail)?;
        let p = Tensor::new(dims, input(pred, n, "pred")?.to_vec()).map_err(fail)?;
        let v = hybrid_loss_value(&PseudoTarget::from_tensor(y, false), &p).map_err(fail)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v as f64;
        Ok(())
    })
}

unsafe fn masks(a: *const u8, b: *const u8, len: usize) -> Result<(Mask, Mask), (ClamStatus, String)> {
    let bits = |p: *const u8, what: &str| -> Result<Mask, (ClamStatus, String)> {
        let v = input(p, len, what)?.iter().map(|&x| x != 0).collect();
        Mask::new(len, 1, v).map_err(fail)
    };
    Ok((bits(a, "a")?, bits(b, "b")?))
}

/// Dice overlap of two `len`-byte masks (nonzero = foreground); 1.0 when
/// both are empty.
///
/// # Safety
/// `a` and `b` must each hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn clam_dice(a: *const u8, b: *const u8, len: usize, out: *mut f64) -> ClamStatus {
    guard(|| {
        let (a, b) = masks(a, b, len)?;
        *out.as_mut().ok_or_else(|| null("out"))? = metrics::dice(&a, &b).map_err(fail)?;
        Ok(())
    })
}

/// Intersection over union of two `len`-byte masks; 1.0 when both are empty.
///
/// # Safety
/// `a` and `b` must each hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn clam_iou(a: *const u8, b: *const u8, len: usize, out: *mut f64) -> ClamStatus {
    guard(|| {
        let (a, b) = masks(a, b, len)?;
        *out.as_mut().ok_or_else(|| null("out"))? = metrics::iou(&a, &b).map_err(fail)?;
        Ok(())
    })
}
