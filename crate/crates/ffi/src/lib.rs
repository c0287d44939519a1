//! C ABI over the madun reconstruction library.
//!
//! Conventions:
//! - Every fallible call returns a [`MadunStatus`]; `MADUN_STATUS_OK` is 0.
//! - On failure, a thread-local message is readable through
//!   [`madun_last_error_message`] until the next failing call on the same
//!   thread.
//! - `MadunModel` is an opaque handle created by [`madun_model_load`] and
//!   released by [`madun_model_free`]. Handles are immutable after load and
//!   safe to share across threads for concurrent reconstruction only if the
//!   caller serializes access (the API takes `&mut` nowhere, but no internal
//!   locking is promised).
//! - Images are row-major `double` buffers of `height * width` luminance
//!   samples on the 8-bit scale (0..=255).

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use madun_core::checkpoint::{load_checkpoint, CheckpointMeta};
use madun_core::config::{read_mask, LoadedOperator};
use madun_core::cs::{GaussianOperator, MRIOperator};
use madun_core::metrics::{psnr, reconstruct_image, ssim};
use madun_core::model::{ModelParams, OperatorKind};
use madun_core::tensor::Tensor;
use madun_core::Error;

/// Status code of every fallible API call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[allow(non_camel_case_types)] // C-facing constant names
pub enum MadunStatus {
    /// Success.
    MADUN_STATUS_OK = 0,
    /// Tensor or buffer shapes do not line up.
    MADUN_STATUS_SHAPE = 1,
    /// An API contract was violated (wrong call order, missing state).
    MADUN_STATUS_CONTRACT = 2,
    /// A configuration value is out of range or inconsistent.
    MADUN_STATUS_CONFIG = 3,
    /// Input data is unusable.
    MADUN_STATUS_DATA = 4,
    /// A checkpoint file is corrupt, truncated, or has an unknown version.
    MADUN_STATUS_CHECKPOINT = 5,
    /// An I/O operation failed.
    MADUN_STATUS_IO = 6,
    /// A required pointer argument was null.
    MADUN_STATUS_NULL_ARGUMENT = 7,
    /// A string argument was not valid UTF-8.
    MADUN_STATUS_INVALID_UTF8 = 8,
    /// An internal invariant failed; the handle should be discarded.
    MADUN_STATUS_INTERNAL = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', "?"))
        .unwrap_or_else(|_| CString::new("invalid error message").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> MadunStatus {
    match err {
        Error::Shape { .. } => MadunStatus::MADUN_STATUS_SHAPE,
        Error::Contract(_) => MadunStatus::MADUN_STATUS_CONTRACT,
        Error::Config(_) => MadunStatus::MADUN_STATUS_CONFIG,
        Error::Data(_) => MadunStatus::MADUN_STATUS_DATA,
        Error::Checkpoint(_) => MadunStatus::MADUN_STATUS_CHECKPOINT,
        Error::Io { .. } => MadunStatus::MADUN_STATUS_IO,
    }
}

fn fail(err: Error) -> MadunStatus {
    let status = status_of(&err);
    set_last_error(err.to_string());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guarded(f: impl FnOnce() -> Result<MadunStatus, Error>) -> MadunStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(err)) => fail(err),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("internal panic: {msg}"));
            MadunStatus::MADUN_STATUS_INTERNAL
        }
    }
}

fn null_arg(name: &str) -> MadunStatus {
    set_last_error(format!("{name} must not be null"));
    MadunStatus::MADUN_STATUS_NULL_ARGUMENT
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn path_arg(ptr: *const c_char, name: &str) -> Result<PathBuf, MadunStatus> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_last_error(format!("{name} is not valid UTF-8"));
            Err(MadunStatus::MADUN_STATUS_INVALID_UTF8)
        }
    }
}

/// An opaque, loaded reconstruction model (checkpoint + sampling operator).
pub struct MadunModel {
    meta: CheckpointMeta,
    params: ModelParams<f64>,
    op: LoadedOperator,
}

/// Returns the thread-local message of the most recent failure, or an empty
/// string when no failure has been recorded. The pointer stays valid until
/// the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn madun_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        let mut borrow = slot.borrow_mut();
        if borrow.is_none() {
            *borrow = Some(CString::new("").unwrap());
        }
        borrow.as_ref().unwrap().as_ptr()
    })
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn madun_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

fn load_model_impl(path: &Path, mask: Option<&Path>) -> Result<MadunModel, Error> {
    let mut ckpt = load_checkpoint::<f64>(path)?;
    let meta = ckpt.meta.clone();
    let mut params = ModelParams::<f64>::zeros(&meta.config);
    let mut problems = Vec::new();
    params.walk_mut(|name, t| match ckpt.get(name) {
        Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
        Some(src) => problems.push(format!(
            "{} has shape {:?}, expected {:?}",
            name,
            src.shape(),
            t.shape()
        )),
        None => problems.push(format!("{} is missing", name)),
    });
    if !problems.is_empty() {
        return Err(Error::checkpoint(format!(
            "{}: {}",
            path.display(),
            problems.join("; ")
        )));
    }
    let phi = ckpt
        .take("phi")
        .ok_or_else(|| Error::checkpoint(format!("{}: tensor 'phi' is missing", path.display())))?;
    let op = match meta.config.operator {
        OperatorKind::Gaussian => LoadedOperator::Gaussian(GaussianOperator::from_phi(
            phi,
            meta.config.ratio,
            meta.learn_phi,
            meta.seed,
        )?),
        OperatorKind::Mri => {
            let mask = mask.ok_or_else(|| {
                Error::config("this checkpoint holds an MRI model; a sampling mask is required")
            })?;
            LoadedOperator::Mri(MRIOperator::new(read_mask(mask)?)?)
        }
    };
    Ok(MadunModel { meta, params, op })
}

/// Loads a model checkpoint.
///
/// `mask_path` supplies the k-space sampling mask (8-bit PGM, nonzero =
/// sampled) for MRI models and must be null for Gaussian models (it is
/// ignored there). On success `*out` owns the handle; free it with
/// [`madun_model_free`].
///
/// # Safety
/// `path` (and `mask_path` when non-null) must be NUL-terminated strings;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn madun_model_load(
    path: *const c_char,
    mask_path: *const c_char,
    out: *mut *mut MadunModel,
) -> MadunStatus {
    guarded(|| {
        if out.is_null() {
            return Ok(null_arg("out"));
        }
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return Ok(status),
        };
        let mask = if mask_path.is_null() {
            None
        } else {
            match path_arg(mask_path, "mask_path") {
                Ok(p) => Some(p),
                Err(status) => return Ok(status),
            }
        };
        let model = load_model_impl(&path, mask.as_deref())?;
        *out = Box::into_raw(Box::new(model));
        Ok(MadunStatus::MADUN_STATUS_OK)
    })
}

/// Releases a model handle. Passing null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer returned by [`madun_model_load`] that
/// has not already been freed.
#[no_mangle]
pub unsafe extern "C" fn madun_model_free(model: *mut MadunModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of unfolded stages (K). Returns 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn madun_model_stages(model: *const MadunModel) -> usize {
    model.as_ref().map_or(0, |m| m.meta.config.stages)
}

/// Feature channels per stage (C). Returns 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn madun_model_channels(model: *const MadunModel) -> usize {
    model.as_ref().map_or(0, |m| m.meta.config.channels)
}

/// Measurement ratio M/N. Returns 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn madun_model_ratio(model: *const MadunModel) -> f64 {
    model.as_ref().map_or(0.0, |m| m.meta.config.ratio)
}

/// Sampling block edge in pixels for Gaussian models; 0 for MRI models
/// (they sample whole images at the mask size) and null handles.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn madun_model_block(model: *const MadunModel) -> usize {
    match model.as_ref() {
        Some(MadunModel {
            op: LoadedOperator::Gaussian(g),
            ..
        }) => (g.n() as f64).sqrt().round() as usize,
        _ => 0,
    }
}

/// 0 for Gaussian models, 1 for MRI models, -1 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn madun_model_kind(model: *const MadunModel) -> i32 {
    match model.as_ref() {
        Some(m) => match m.meta.config.operator {
            OperatorKind::Gaussian => 0,
            OperatorKind::Mri => 1,
        },
        None => -1,
    }
}

unsafe fn image_arg<'a>(
    ptr: *const f64,
    height: usize,
    width: usize,
    name: &str,
) -> Result<&'a [f64], MadunStatus> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    if height == 0 || width == 0 {
        set_last_error(format!("{name}: image dimensions must be nonzero"));
        return Err(MadunStatus::MADUN_STATUS_SHAPE);
    }
    Ok(std::slice::from_raw_parts(ptr, height * width))
}

/// Reconstructs one image through the model.
///
/// `pixels` holds `height * width` row-major luminance samples on the 8-bit
/// scale; the reconstruction is written to `out_pixels` (same layout, same
/// size, clamped to [0, 255]). `stride` is the overlapping-block stride for
/// Gaussian models (1..=block edge; the published setting is 22) and is
/// ignored for MRI models, which require `height`/`width` to equal the mask
/// size.
///
/// # Safety
/// `model` must be a live handle; `pixels` and `out_pixels` must reference
/// `height * width` readable/writable doubles.
#[no_mangle]
pub unsafe extern "C" fn madun_reconstruct(
    model: *const MadunModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    stride: usize,
    out_pixels: *mut f64,
) -> MadunStatus {
    guarded(|| {
        let model = match model.as_ref() {
            Some(m) => m,
            None => return Ok(null_arg("model")),
        };
        let data = match image_arg(pixels, height, width, "pixels") {
            Ok(d) => d,
            Err(status) => return Ok(status),
        };
        if out_pixels.is_null() {
            return Ok(null_arg("out_pixels"));
        }
        let img = Tensor::new(&[height, width], data.to_vec())?;
        let rec = reconstruct_image(
            &img,
            model.op.as_operator_ref(),
            &model.params,
            &model.meta.config,
            stride,
        )?;
        std::slice::from_raw_parts_mut(out_pixels, height * width)
            .copy_from_slice(rec.data());
        Ok(MadunStatus::MADUN_STATUS_OK)
    })
}

/// Peak signal-to-noise ratio between two 8-bit-scale images, in dB, written
/// to `*out`. Identical images yield +infinity.
///
/// # Safety
/// `reference` and `test` must reference `height * width` doubles; `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn madun_psnr(
    reference: *const f64,
    test: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
) -> MadunStatus {
    guarded(|| {
        if out.is_null() {
            return Ok(null_arg("out"));
        }
        let a = match image_arg(reference, height, width, "reference") {
            Ok(d) => d,
            Err(status) => return Ok(status),
        };
        let b = match image_arg(test, height, width, "test") {
            Ok(d) => d,
            Err(status) => return Ok(status),
        };
        let ta = Tensor::new(&[height, width], a.to_vec())?;
        let tb = Tensor::new(&[height, width], b.to_vec())?;
        *out = psnr(&ta, &tb)?;
        Ok(MadunStatus::MADUN_STATUS_OK)
    })
}

/// Structural similarity between two 8-bit-scale images (11×11 Gaussian
/// window, σ = 1.5), written to `*out`. Both dimensions must be at least 11.
///
/// # Safety
/// `reference` and `test` must reference `height * width` doubles; `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn madun_ssim(
    reference: *const f64,
    test: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
) -> MadunStatus {
    guarded(|| {
        if out.is_null() {
            return Ok(null_arg("out"));
        }
        let a = match image_arg(reference, height, width, "reference") {
            Ok(d) => d,
            Err(status) => return Ok(status),
        };
        let b = match image_arg(test, height, width, "test") {
            Ok(d) => d,
            Err(status) => return Ok(status),
        };
        let ta = Tensor::new(&[height, width], a.to_vec())?;
        let tb = Tensor::new(&[height, width], b.to_vec())?;
        *out = ssim(&ta, &tb)?;
        Ok(MadunStatus::MADUN_STATUS_OK)
    })
}
