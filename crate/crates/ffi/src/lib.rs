//! C ABI for loading a trained checkpoint and running eval-mode inference.
//!
//! Every function returns an [`IcntStatus`]; on failure the message is kept
//! per thread and read back with [`icnt_last_error_message`]. Models are
//! opaque handles created by [`icnt_model_load`] and released with
//! [`icnt_model_free`]. Images are `N x C x S x S` row-major `f32`, already
//! normalized the way the training pipeline normalizes them.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use iconvnext::config::Settings;
use iconvnext::metrics::binary_roc;
use iconvnext::model::Model;
use iconvnext::pipeline::open_checkpoint;
use iconvnext::{Error, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcntStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Config = 6,
    Dataset = 7,
    NonFinite = 8,
    WorkerPool = 9,
    Image = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

impl From<&Error> for IcntStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => IcntStatus::Shape,
            Error::InvalidArgument(_) => IcntStatus::InvalidArgument,
            Error::NonFinite { .. } => IcntStatus::NonFinite,
            Error::Image { .. } => IcntStatus::Image,
            Error::Dataset(_) => IcntStatus::Dataset,
            Error::Checkpoint { .. } => IcntStatus::Checkpoint,
            Error::Config(_) => IcntStatus::Config,
            Error::WorkerPool(_) => IcntStatus::WorkerPool,
            Error::Io { .. } => IcntStatus::Io,
        }
    }
}

/// Opaque model handle.
pub struct IcntModel {
    model: Model,
}

/// Sizes a caller needs to lay out buffers.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IcntModelInfo {
    pub n_class: usize,
    pub in_channels: usize,
    pub image_size: usize,
    /// Width of the pre-logits features.
    pub feature_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(status: IcntStatus, message: impl Into<String>) -> IcntStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), (IcntStatus, String)>) -> IcntStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            IcntStatus::Ok
        }
        Ok(Err((status, msg))) => set_error(status, msg),
        Err(_) => set_error(IcntStatus::Panic, "internal panic"),
    }
}

fn lift(e: Error) -> (IcntStatus, String) {
    (IcntStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (IcntStatus, String) {
    (IcntStatus::NullPointer, format!("{what} is null"))
}

fn info_of(model: &Model) -> IcntModelInfo {
    let c = model.config();
    IcntModelInfo {
        n_class: c.n_class(),
        in_channels: c.in_channels(),
        image_size: c.image_size,
        feature_dim: c.head.hidden,
    }
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn icnt_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Fixes the global worker pool size. Only the first call before any
/// inference can succeed.
#[no_mangle]
pub extern "C" fn icnt_set_worker_threads(n: usize) -> IcntStatus {
    guard(|| iconvnext::parallel::set_worker_threads(n).map_err(lift))
}

/// Loads a checkpoint written by `iconvnext train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn icnt_model_load(path: *const c_char, out: *mut *mut IcntModel) -> IcntStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (IcntStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (model, _, _) = open_checkpoint(Path::new(path), None, &Settings::new()).map_err(lift)?;
        *out = Box::into_raw(Box::new(IcntModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`icnt_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn icnt_model_free(model: *mut IcntModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn icnt_model_info(model: *const IcntModel, info: *mut IcntModelInfo) -> IcntStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        *info = info_of(&m.model);
        Ok(())
    })
}

unsafe fn run(
    model: *const IcntModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
    features: bool,
) -> Result<(), (IcntStatus, String)> {
    let m = model.as_ref().ok_or_else(|| null("model"))?;
    if images.is_null() {
        return Err(null("images"));
    }
    if out.is_null() {
        return Err(null("out"));
    }
    if n == 0 {
        return Err((IcntStatus::InvalidArgument, "batch size must be >= 1".into()));
    }
    let info = info_of(&m.model);
    let width = if features { info.feature_dim } else { info.n_class };
    if out_len < n * width {
        return Err((IcntStatus::BufferTooSmall, format!("output needs {} floats, got {out_len}", n * width)));
    }
    let s = info.image_size;
    let input = std::slice::from_raw_parts(images, n * info.in_channels * s * s).to_vec();
    let x = Tensor::new([n, info.in_channels, s, s], input).map_err(lift)?;
    let result = m.model.infer(&x).map_err(lift)?;
    let src = if features { result.prelogits } else { result.logits };
    std::slice::from_raw_parts_mut(out, n * width).copy_from_slice(src.data());
    Ok(())
}

/// Eval-mode logits for `n` images into `logits` (`n * n_class` floats).
///
/// # Safety
/// `images` must hold `n * in_channels * image_size^2` floats and `logits`
/// be valid for `logits_len` writes.
#[no_mangle]
pub unsafe extern "C" fn icnt_model_predict(
    model: *const IcntModel,
    images: *const f32,
    n: usize,
    logits: *mut f32,
    logits_len: usize,
) -> IcntStatus {
    guard(|| run(model, images, n, logits, logits_len, false))
}

/// Pre-logits features for `n` images into `features` (`n * feature_dim` floats).
///
/// # Safety
/// As for [`icnt_model_predict`].
#[no_mangle]
pub unsafe extern "C" fn icnt_model_features(
    model: *const IcntModel,
    images: *const f32,
    n: usize,
    features: *mut f32,
    features_len: usize,
) -> IcntStatus {
    guard(|| run(model, images, n, features, features_len, true))
}

/// Area under the ROC curve of `scores` against 0/1 `positive` flags.
/// Fails with `ICNT_STATUS_INVALID_ARGUMENT` when only one class is present.
///
/// # Safety
/// `scores` and `positive` must hold `n` elements; `auc` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn icnt_binary_auc(scores: *const f64, positive: *const u8, n: usize, auc: *mut f64) -> IcntStatus {
    guard(|| {
        if scores.is_null() || positive.is_null() || auc.is_null() {
            return Err(null("scores, positive or auc"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let p: Vec<bool> = std::slice::from_raw_parts(positive, n).iter().map(|&v| v != 0).collect();
        let (_, a) = binary_roc(s, &p)
            .ok_or_else(|| (IcntStatus::InvalidArgument, "AUC needs both positive and negative samples".to_string()))?;
        *auc = a;
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn icnt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
