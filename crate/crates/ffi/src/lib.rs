//! C ABI over the gradleak library.
//!
//! Objects cross the boundary as opaque handles created by `*_load` or
//! `*_new` functions and released by the matching `*_free`. Every fallible
//! function returns a [`GlStatus`]; on failure the message is available
//! through [`gl_last_error`] on the same thread. Panics never unwind into
//! the caller: they are reported as `GL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gradleak::detection::{normalized_entropy, scan_model, structural_checksum, ScanConfig};
use gradleak::federation::{apply_dp, DpConfig, GradientUpdate};
use gradleak::leakage::{dedupe_candidates, extract_candidate_irs, IrCandidate};
use gradleak::models::{Checkpoint, Classifier};
use gradleak::{Error, Tensor};

/// Result codes shared by every function in this interface.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Checkpoint = 4,
    Io = 5,
    Config = 6,
    Numeric = 7,
    Panic = 8,
}

/// A classifier: feature extractor plus head.
pub struct GlModel(Classifier);

/// A head gradient update as uploaded by a client.
pub struct GlUpdate(GradientUpdate);

/// Deduplicated IR candidates recovered from an update.
pub struct GlCandidates(Vec<IrCandidate>);

/// Summary of an entropy scan.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GlScanSummary {
    pub anomalous: bool,
    pub min_entropy: f64,
    pub p3_entropy: f64,
    pub flagged_vectors: usize,
    pub total_vectors: usize,
    pub checksum: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| {
        let mut bytes = msg.into_bytes();
        bytes.retain(|&b| b != 0);
        *e.borrow_mut() = bytes;
    });
}

fn status_of(err: &Error) -> GlStatus {
    match err {
        Error::Shape { .. } => GlStatus::Shape,
        Error::Checkpoint(_) => GlStatus::Checkpoint,
        Error::Io(_) | Error::MissingInput(_) => GlStatus::Io,
        Error::Config(_) => GlStatus::Config,
        Error::NonFinite { .. } | Error::Divergence { .. } => GlStatus::Numeric,
        _ => GlStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GlStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            GlStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            GlStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            GlStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: caller guarantees `p` is null or a live handle from this library.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    // SAFETY: caller guarantees `p` is null or valid for writes.
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    // SAFETY: non-null, caller guarantees a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail::Arg("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: non-null, caller guarantees `len` readable values.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn into_handle<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

unsafe fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `into_handle` and is released exactly once.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `cap > 0`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn gl_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            // SAFETY: `buf` holds at least `cap > n` bytes.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Loads a classifier checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gl_model_load(path: *const c_char, out: *mut *mut GlModel) -> GlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        let path = unsafe { path_arg(path)? };
        *out = into_handle(GlModel(Classifier::load(&path)?));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`gl_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_model_free(model: *mut GlModel) {
    unsafe { free_handle(model) }
}

/// Length of the model's intermediate representation.
///
/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn gl_model_ir_dim(model: *const GlModel, out: *mut usize) -> GlStatus {
    guard(|| {
        let m = unsafe { as_ref(model, "model")? };
        *unsafe { out_ptr(out, "out")? } = m.0.extractor.ir_dim();
        Ok(())
    })
}

/// Entropy scan of every weight vector.
///
/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn gl_model_scan(
    model: *const GlModel,
    bin_width: f64,
    threshold: f64,
    out: *mut GlScanSummary,
) -> GlStatus {
    guard(|| {
        let m = unsafe { as_ref(model, "model")? };
        let out = unsafe { out_ptr(out, "out")? };
        if !(bin_width > 0.0) {
            return Err(Fail::Arg(format!("bin width {bin_width} must be positive")));
        }
        let rep = scan_model(&m.0, &ScanConfig { bin_width, threshold }, None)?;
        *out = GlScanSummary {
            anomalous: rep.anomalous,
            min_entropy: rep.min_entropy,
            p3_entropy: rep.p3_entropy,
            flagged_vectors: rep.vectors.iter().filter(|v| v.flagged).count(),
            total_vectors: rep.vectors.len(),
            checksum: structural_checksum(&m.0.descriptor()),
        };
        Ok(())
    })
}

/// Writes `n * ir_dim` IR values for `n` images of shape `[C,H,W]` laid out
/// contiguously in `images`.
///
/// # Safety
/// `images` must hold `images_len` values; `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn gl_model_irs(
    model: *const GlModel,
    images: *const f64,
    images_len: usize,
    out: *mut f64,
    out_len: usize,
) -> GlStatus {
    guard(|| {
        let m = unsafe { as_ref(model, "model")? };
        let data = unsafe { slice_arg(images, images_len, "images")? };
        let [c, h, w] = m.0.extractor.input_shape();
        let per = c * h * w;
        if images_len == 0 || images_len % per != 0 {
            return Err(Fail::Arg(format!("{images_len} values is not a whole number of {c}x{h}x{w} images")));
        }
        let n = images_len / per;
        let need = n * m.0.extractor.ir_dim();
        if out_len < need {
            return Err(Fail::Arg(format!("output holds {out_len} values, {need} needed")));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let x = Tensor::new(vec![n, c, h, w], data.to_vec())?;
        let y = m.0.extractor.irs(&x)?;
        // SAFETY: `out` is non-null and holds at least `need` values.
        unsafe { ptr::copy_nonoverlapping(y.data().as_ptr(), out, need) };
        Ok(())
    })
}

/// Loads a gradient update checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gl_update_load(path: *const c_char, out: *mut *mut GlUpdate) -> GlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        let path = unsafe { path_arg(path)? };
        *out = into_handle(GlUpdate(GradientUpdate::from_checkpoint(&Checkpoint::load(&path)?)?));
        Ok(())
    })
}

/// # Safety
/// `update` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_update_free(update: *mut GlUpdate) {
    unsafe { free_handle(update) }
}

/// Global L2 norm over all tensors of the update.
///
/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn gl_update_l2_norm(update: *const GlUpdate, out: *mut f64) -> GlStatus {
    guard(|| {
        let u = unsafe { as_ref(update, "update")? };
        *unsafe { out_ptr(out, "out")? } = u.0.l2_norm();
        Ok(())
    })
}

/// Clips the update to `clip` and adds Gaussian noise calibrated to
/// `(epsilon, delta)`, producing a new handle.
///
/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn gl_update_apply_dp(
    update: *const GlUpdate,
    epsilon: f64,
    delta: f64,
    clip: f64,
    seed: u64,
    out: *mut *mut GlUpdate,
) -> GlStatus {
    guard(|| {
        let u = unsafe { as_ref(update, "update")? };
        let out = unsafe { out_ptr(out, "out")? };
        let cfg = DpConfig {
            epsilon,
            delta,
            clip,
            seed,
        };
        *out = into_handle(GlUpdate(apply_dp(&u.0, &cfg)?));
        Ok(())
    })
}

/// Noise scale of the Gaussian mechanism.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gl_dp_sigma(epsilon: f64, delta: f64, clip: f64, out: *mut f64) -> GlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        let cfg = DpConfig {
            epsilon,
            delta,
            clip,
            seed: 0,
        };
        cfg.validate()?;
        *out = cfg.sigma();
        Ok(())
    })
}

/// Recovers candidate IRs from the update and merges near-duplicates.
///
/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn gl_extract_candidates(
    update: *const GlUpdate,
    tol: f64,
    cos_threshold: f64,
    out: *mut *mut GlCandidates,
) -> GlStatus {
    guard(|| {
        let u = unsafe { as_ref(update, "update")? };
        let out = unsafe { out_ptr(out, "out")? };
        let cands = dedupe_candidates(&extract_candidate_irs(&u.0, tol)?, cos_threshold)?;
        *out = into_handle(GlCandidates(cands));
        Ok(())
    })
}

/// # Safety
/// `cands` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_candidates_free(cands: *mut GlCandidates) {
    unsafe { free_handle(cands) }
}

/// Number of candidates; 0 for a null handle.
///
/// # Safety
/// `cands` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_candidates_len(cands: *const GlCandidates) -> usize {
    unsafe { cands.as_ref() }.map_or(0, |c| c.0.len())
}

/// Copies candidate `index` into `buf` and reports its source column and
/// bias-gradient magnitude.
///
/// # Safety
/// `buf` must hold `cap` values; the other out-pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn gl_candidates_get(
    cands: *const GlCandidates,
    index: usize,
    buf: *mut f64,
    cap: usize,
    out_column: *mut usize,
    out_bias_grad: *mut f64,
) -> GlStatus {
    guard(|| {
        let c = unsafe { as_ref(cands, "candidates")? };
        let cand = c
            .0
            .get(index)
            .ok_or_else(|| Fail::Arg(format!("index {index} out of range ({} candidates)", c.0.len())))?;
        if cap < cand.vector.len() {
            return Err(Fail::Arg(format!("buffer holds {cap} values, {} needed", cand.vector.len())));
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        // SAFETY: `buf` is non-null and holds at least `cap` values.
        unsafe { ptr::copy_nonoverlapping(cand.vector.as_ptr(), buf, cand.vector.len()) };
        if let Some(col) = unsafe { out_column.as_mut() } {
            *col = cand.source_column;
        }
        if let Some(b) = unsafe { out_bias_grad.as_mut() } {
            *b = cand.bias_grad;
        }
        Ok(())
    })
}

/// Normalized entropy of one weight vector.
///
/// # Safety
/// `values` must hold `len` values; `out` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn gl_normalized_entropy(values: *const f64, len: usize, bin_width: f64, out: *mut f64) -> GlStatus {
    guard(|| {
        let v = unsafe { slice_arg(values, len, "values")? };
        let out = unsafe { out_ptr(out, "out")? };
        *out = normalized_entropy(v, bin_width)?;
        Ok(())
    })
}
