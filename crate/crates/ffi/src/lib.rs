//! C ABI for austkit.
//!
//! Every fallible function returns an [`AustkitStatus`]. On failure the
//! message is kept per thread and read with [`austkit_last_error_message`].
//! Panics are caught at the boundary and reported as `AUSTKIT_STATUS_PANIC`.
//!
//! Images cross the boundary as interleaved 8-bit RGB, row-major, and masks
//! as `double` arrays of `height * width` values.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use austkit::colorspace::ImagePlane;
use austkit::datagen::{generate, GeneratorConfig};
use austkit::dataset::write_dataset;
use austkit::mask::RegionMask;
use austkit::metrics::{average_precision, f1_and_iou};
use austkit::model::AustNet;
use austkit::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AustkitStatus {
    Ok = 0,
    /// Null pointer, bad size or out-of-range value.
    InvalidArgument = 1,
    Io = 2,
    /// Malformed checkpoint, image, manifest or config.
    Format = 3,
    /// NaN or infinity inside the computation.
    Numeric = 4,
    Panic = 5,
}

/// Opaque model handle.
pub struct AustkitModel {
    model: AustNet,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AustkitMetrics {
    /// Average precision in percent; meaningful only when `has_ap` is 1.
    pub ap: f64,
    /// 0 when the ground truth has no positive pixel.
    pub has_ap: i32,
    pub f1: f64,
    /// Percent.
    pub iou: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with_borrow_mut(|e| *e = Some(c));
}

fn status_of(e: &Error) -> AustkitStatus {
    match e {
        Error::Io { .. } => AustkitStatus::Io,
        Error::Image { .. } | Error::Checkpoint(_) | Error::Config(_) | Error::Manifest { .. } => AustkitStatus::Format,
        Error::NonFinite { .. } => AustkitStatus::Numeric,
        _ => AustkitStatus::InvalidArgument,
    }
}

struct Fail(AustkitStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(AustkitStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AustkitStatus {
    LAST_ERROR.with_borrow_mut(|e| *e = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AustkitStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AustkitStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn pixels(height: usize, width: usize) -> Result<usize, Fail> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("bad image size {height}x{width}")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn austkit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next austkit call on the same thread.
#[no_mangle]
pub extern "C" fn austkit_last_error_message() -> *const c_char {
    LAST_ERROR.with_borrow(|e| e.as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a checkpoint written by `austkit train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn austkit_model_load(path: *const c_char, out: *mut *mut AustkitModel) -> AustkitStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let model = austkit::checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(AustkitModel { model }));
        Ok(())
    })
}

/// Release a handle from [`austkit_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from `austkit_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn austkit_model_free(model: *mut AustkitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input size the model was trained at.
///
/// # Safety
/// All pointers must be valid; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn austkit_model_input_size(
    model: *const AustkitModel,
    height: *mut usize,
    width: *mut usize,
) -> AustkitStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        if height.is_null() || width.is_null() {
            return Err(invalid("height or width is null"));
        }
        *height = m.model.config().height;
        *width = m.model.config().width;
        Ok(())
    })
}

/// Predict the inharmonious-region mask of one image.
///
/// `rgb` holds `height * width * 3` bytes; `labels` holds `height * width`
/// class ids and may be null unless the model uses semantic voting.
/// `out_mask` receives `height * width` probabilities.
///
/// # Safety
/// Buffers must have the stated lengths; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn austkit_model_predict(
    model: *const AustkitModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    labels: *const u8,
    out_mask: *mut f64,
) -> AustkitStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| invalid("model is null"))?.model;
        let n = pixels(height, width)?;
        let (mh, mw) = (m.config().height, m.config().width);
        if (height, width) != (mh, mw) {
            return Err(invalid(format!("image is {height}x{width}, model expects {mh}x{mw}")));
        }
        let bytes = slice_arg(rgb, n * 3, "rgb")?;
        if out_mask.is_null() {
            return Err(invalid("out_mask is null"));
        }
        let labels = if labels.is_null() { None } else { Some(slice_arg(labels, n, "labels")?) };
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[c * n + p] = bytes[3 * p + c] as f64 / 255.0;
            }
        }
        let image = ImagePlane::rgb(Tensor::new([3, height, width], data)?)?;
        let mask = m.forward(&image, labels, None)?.final_mask;
        std::slice::from_raw_parts_mut(out_mask, n).copy_from_slice(mask.data());
        Ok(())
    })
}

/// AP, F1 and IoU of one prediction. `gt` is nonzero for inharmonious
/// pixels; `pred` values must lie in `[0, 1]`.
///
/// # Safety
/// `pred` and `gt` must hold `height * width` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn austkit_metrics(
    pred: *const f64,
    gt: *const u8,
    height: usize,
    width: usize,
    threshold: f64,
    out: *mut AustkitMetrics,
) -> AustkitStatus {
    guard(|| {
        let n = pixels(height, width)?;
        let pred = RegionMask::new(height, width, slice_arg(pred, n, "pred")?.to_vec())?;
        let gt = RegionMask::new(
            height,
            width,
            slice_arg(gt, n, "gt")?.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect(),
        )?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(invalid(format!("threshold {threshold} outside [0, 1]")));
        }
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        let ap = average_precision(&pred, &gt)?;
        let (f1, iou) = f1_and_iou(&pred, &gt, threshold)?;
        *out = AustkitMetrics {
            ap: ap.unwrap_or(0.0),
            has_ap: ap.is_some() as i32,
            f1,
            iou,
        };
        Ok(())
    })
}

/// Write `n` synthetic composites to `out_dir` in the layout `austkit gen`
/// produces. Regions per image are drawn from `min_regions..=max_regions`.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn austkit_dataset_generate(
    out_dir: *const c_char,
    n: usize,
    seed: u64,
    min_regions: usize,
    max_regions: usize,
) -> AustkitStatus {
    guard(|| {
        let dir = path_arg(out_dir, "out_dir")?;
        if n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        let base = if max_regions > 1 { GeneratorConfig::multi_region() } else { GeneratorConfig::default() };
        let config = GeneratorConfig {
            min_regions,
            max_regions,
            seed,
            ..base
        };
        let samples = generate(&config, n)?;
        write_dataset(&dir, &samples)?;
        Ok(())
    })
}
