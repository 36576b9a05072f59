//! C interface to the radio-map predictor.
//!
//! Fallible calls return an [`RmtStatus`]. After a failure,
//! [`rmt_last_error`] describes it until the next failing call on the same
//! thread. Models are opaque [`RmtModel`] handles released with
//! [`rmt_model_free`]. Maps are row-major `height * width` arrays; RoI masks
//! use 1 for free cells and 0 for buildings.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rmt_core::data::{denormalize_dbm, normalize_dbm, GenerateOptions, GeoMap, RadioMap};
use rmt_core::model::{read_card, Model, ModelConfig, ModelKind};
use rmt_core::train::{metric_channel_error, metric_coverage_error, metric_rmse, predict_maps};
use rmt_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Data = 6,
    Internal = 7,
}

/// Opaque model handle.
pub struct RmtModel {
    inner: Model<f32>,
}

/// Metrics over one map, normalized units.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RmtMetrics {
    pub rmse: f64,
    pub ch_pred_err: f64,
    pub cov_pred_err: f64,
    pub n_roi_pixels: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(RmtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) | Error::Geometry(_) => RmtStatus::Shape,
            Error::Config(_) | Error::Metric(_) => RmtStatus::InvalidArgument,
            Error::Io { .. } | Error::Json(_) => RmtStatus::Io,
            Error::Checkpoint(_) => RmtStatus::Checkpoint,
            Error::Dataset(_) | Error::Pgm(_) => RmtStatus::Data,
            _ => RmtStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RmtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RmtStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(RmtStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(RmtStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn parse_kind(s: &str) -> Result<ModelKind, Failure> {
    s.parse().map_err(Failure::from)
}

/// Message of the last failure on this thread; empty if none. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn rmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Maps received power in dBm onto `[0, 1]`.
#[no_mangle]
pub extern "C" fn rmt_normalize_dbm(p_rx_dbm: f64) -> f64 {
    normalize_dbm(p_rx_dbm)
}

/// Inverse of [`rmt_normalize_dbm`] on `[0, 1]`.
#[no_mangle]
pub extern "C" fn rmt_denormalize_dbm(value: f64) -> f64 {
    denormalize_dbm(value)
}

/// Creates a freshly initialized model. `profile` is `desk`, `desk-mini` or
/// `paper`; `kind` is `rmt` or `baseline`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_new(
    profile: *const c_char,
    kind: *const c_char,
    seed: u64,
    out: *mut *mut RmtModel,
) -> RmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ModelConfig::from_profile(str_arg(profile, "profile")?)?;
        let kind = parse_kind(str_arg(kind, "kind")?)?;
        let inner = Model::new(cfg, kind, seed)?;
        *out = Box::into_raw(Box::new(RmtModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint. The architecture comes from the checkpoint's JSON
/// card when present; non-null `profile` / `kind` override it.
///
/// # Safety
/// String arguments must be NUL-terminated or null where allowed; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_load(
    checkpoint: *const c_char,
    profile: *const c_char,
    kind: *const c_char,
    out: *mut *mut RmtModel,
) -> RmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(checkpoint, "checkpoint")?;
        let card = read_card(path)?;
        let cfg = match (opt_str_arg(profile, "profile")?, &card) {
            (Some(p), _) => ModelConfig::from_profile(p)?,
            (None, Some(c)) => c.config.clone(),
            (None, None) => return Err(invalid("no model card next to the checkpoint; pass a profile")),
        };
        let kind = match (opt_str_arg(kind, "kind")?, &card) {
            (Some(k), _) => parse_kind(k)?,
            (None, Some(c)) => c.kind,
            (None, None) => ModelKind::Rmt,
        };
        let inner = Model::load(cfg, kind, path)?;
        *out = Box::into_raw(Box::new(RmtModel { inner }));
        Ok(())
    })
}

/// Writes the parameters as an RMTC checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_save(model: *const RmtModel, path: *const c_char) -> RmtStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        model.inner.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_free(model: *mut RmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input extent the model expects.
///
/// # Safety
/// `model` must come from this library; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_input_size(
    model: *const RmtModel,
    height: *mut usize,
    width: *mut usize,
) -> RmtStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        *height = model.inner.cfg.height;
        *width = model.inner.cfg.width;
        Ok(())
    })
}

/// Number of scalar parameters.
///
/// # Safety
/// `model` must come from this library; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_param_count(model: *const RmtModel, count: *mut usize) -> RmtStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let count = count.as_mut().ok_or_else(|| null("count"))?;
        *count = model.inner.params.numel();
        Ok(())
    })
}

/// Predicts the normalized radio map for one layout. `roi` and `out` hold
/// `height * width` values. Outputs lie in `[0, 1]`: the single-precision
/// sigmoid rounds to the endpoints for large logits.
///
/// # Safety
/// `model` must come from this library; `roi` must be readable and `out`
/// writable for `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn rmt_model_predict(
    model: *const RmtModel,
    roi: *const u8,
    height: usize,
    width: usize,
    tx_row: usize,
    tx_col: usize,
    out: *mut f32,
) -> RmtStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let n = height.checked_mul(width).ok_or_else(|| invalid("extent overflows"))?;
        let roi = slice_arg(roi, n, "roi")?;
        let out = slice_mut_arg(out, n, "out")?;
        let geo = GeoMap::new(height, width, 1.0, roi.iter().map(|&v| v != 0).collect(), (tx_row, tx_col))?;
        model.inner.cfg.check_input(height, width)?;
        let pred = predict_maps(&model.inner, std::slice::from_ref(&geo), 1)?;
        out.copy_from_slice(pred[0].values());
        Ok(())
    })
}

/// Synthesizes one `size x size` sample from `seed`: the RoI mask, the
/// normalized radio map and the transmitter cell.
///
/// # Safety
/// `roi_out` and `map_out` must be writable for `size * size` elements; the
/// transmitter outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmt_generate_sample(
    seed: u64,
    size: usize,
    roi_out: *mut u8,
    map_out: *mut f32,
    tx_row: *mut usize,
    tx_col: *mut usize,
) -> RmtStatus {
    guard(|| {
        let n = size.checked_mul(size).ok_or_else(|| invalid("extent overflows"))?;
        let roi_out = slice_mut_arg(roi_out, n, "roi_out")?;
        let map_out = slice_mut_arg(map_out, n, "map_out")?;
        if tx_row.is_null() || tx_col.is_null() {
            return Err(null("tx_row/tx_col"));
        }
        let sample = GenerateOptions::new(1, size, seed).sample(0)?;
        for (d, &free) in roi_out.iter_mut().zip(sample.geo.roi()) {
            *d = u8::from(free);
        }
        map_out.copy_from_slice(sample.map.values());
        (*tx_row, *tx_col) = sample.geo.tx();
        Ok(())
    })
}

/// RMSE, RoI channel error and coverage error of one predicted map.
///
/// # Safety
/// `pred`, `truth` and `roi` must be readable for `height * width` elements;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmt_metrics(
    pred: *const f32,
    truth: *const f32,
    roi: *const u8,
    height: usize,
    width: usize,
    threshold: f64,
    out: *mut RmtMetrics,
) -> RmtStatus {
    guard(|| {
        let n = height.checked_mul(width).ok_or_else(|| invalid("extent overflows"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = [RadioMap::new(height, width, slice_arg(pred, n, "pred")?.to_vec())?];
        let t = [RadioMap::new(height, width, slice_arg(truth, n, "truth")?.to_vec())?];
        let mask: Vec<bool> = slice_arg(roi, n, "roi")?.iter().map(|&v| v != 0).collect();
        let rois = [mask.as_slice()];
        *out = RmtMetrics {
            rmse: metric_rmse(&p, &t)?,
            ch_pred_err: metric_channel_error(&p, &t, &rois)?,
            cov_pred_err: metric_coverage_error(&p, &t, &rois, threshold)?,
            n_roi_pixels: mask.iter().filter(|&&f| f).count(),
        };
        Ok(())
    })
}
