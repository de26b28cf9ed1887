//! C interface to the heatcast core: GA fitting, checkpoint inference,
//! scattering transforms and the scalar forecast metrics.
//!
//! Every fallible function returns an [`HcStatus`]. On failure the message is
//! available from [`hc_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use heatcast::ga::{fit_ga, GaModel, GaOptions};
use heatcast::linalg::SampleMatrix;
use heatcast::metrics::{bce, crps_gaussian, nll_gaussian, GaussianPrediction};
use heatcast::nnet::{load_checkpoint, CheckpointModel, Predictor};
use heatcast::scattering::{build_filter_bank, FilterBank};
use heatcast::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

/// Fitted linear pattern model.
pub struct HcGaModel(GaModel);

/// Any model restored from a checkpoint directory.
pub struct HcModel(CheckpointModel);

/// Precomputed wavelet filters for one grid.
pub struct HcFilterBank(FilterBank);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HcStatus {
    match e {
        Error::ShapeMismatch { .. } => HcStatus::ShapeMismatch,
        Error::NotConverged { .. }
        | Error::InconsistentVariance(_)
        | Error::DegenerateBaseline { .. }
        | Error::NonFiniteLoss { .. }
        | Error::Diverged { .. } => HcStatus::Numerical,
        Error::Io { .. } | Error::Json { .. } | Error::Image(_) => HcStatus::Io,
        Error::Stage { source, .. } => status_of(source),
        _ => HcStatus::InvalidArgument,
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (HcStatus, String)>) -> HcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HcStatus::Panic
        }
    }
}

fn core(e: Error) -> (HcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (HcStatus, String) {
    (HcStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (HcStatus, String) {
    (HcStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (HcStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (HcStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn rows(x: &[f64], n: usize, d: usize) -> Result<SampleMatrix, (HcStatus, String)> {
    SampleMatrix::new(n, d, x.to_vec()).map_err(core)
}

/// Message of the last failed call on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn hc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fit a GA model on `n` row-major samples of length `n_lat * n_lon * channels`.
///
/// # Safety
/// `x` must hold `n * d` values, `targets` `n` values, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hc_ga_fit(
    x: *const f64,
    n: usize,
    targets: *const f64,
    n_lat: usize,
    n_lon: usize,
    channels: usize,
    epsilon: f64,
    out: *mut *mut HcGaModel,
) -> HcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = n_lat
            .checked_mul(n_lon)
            .and_then(|c| c.checked_mul(channels))
            .filter(|&d| d > 0)
            .ok_or_else(|| invalid("grid dimensions must be positive"))?;
        let len = n.checked_mul(d).ok_or_else(|| invalid("sample matrix too large"))?;
        let xs = unsafe { slice(x, len, "x")? };
        let ys = unsafe { slice(targets, n, "targets")? };
        let model = fit_ga(&rows(xs, n, d)?, ys, epsilon, GaOptions::new(n_lat, n_lon, channels)).map_err(core)?;
        unsafe { *out = Box::into_raw(Box::new(HcGaModel(model))) };
        Ok(())
    })
}

/// Input length expected by a GA model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hc_ga_dim(model: *const HcGaModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.0.dim())
}

/// Copy the pattern into `out` (length `hc_ga_dim`) and the residual scale into `sigma`.
///
/// # Safety
/// `model` must be a live handle, `out` valid for `len` writes, `sigma` writable or null.
#[no_mangle]
pub unsafe extern "C" fn hc_ga_pattern(
    model: *const HcGaModel,
    out: *mut f64,
    len: usize,
    sigma: *mut f64,
) -> HcStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if len != m.0.dim() {
            return Err(core(Error::shape(m.0.dim(), len)));
        }
        unsafe { slice_mut(out, len, "out")? }.copy_from_slice(&m.0.pattern);
        if let Some(s) = unsafe { sigma.as_mut() } {
            *s = m.0.sigma;
        }
        Ok(())
    })
}

fn predict_into(
    model: &dyn Predictor,
    x: &[f64],
    n: usize,
    mu: &mut [f64],
    sigma: &mut [f64],
) -> Result<(), (HcStatus, String)> {
    let preds = model.predict_batch(&rows(x, n, model.input_dim())?).map_err(core)?;
    for (k, p) in preds.iter().enumerate() {
        mu[k] = p.mu;
        sigma[k] = p.sigma;
    }
    Ok(())
}

/// Predict mean and spread for `n` samples.
///
/// # Safety
/// `x` must hold `n * hc_ga_dim` values; `mu` and `sigma` must be valid for `n` writes.
#[no_mangle]
pub unsafe extern "C" fn hc_ga_predict(
    model: *const HcGaModel,
    x: *const f64,
    n: usize,
    mu: *mut f64,
    sigma: *mut f64,
) -> HcStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let xs = unsafe { slice(x, n * m.0.dim(), "x")? };
        let (mu, sigma) = unsafe { (slice_mut(mu, n, "mu")?, slice_mut(sigma, n, "sigma")?) };
        predict_into(&m.0, xs, n, mu, sigma)
    })
}

/// # Safety
/// `model` must be null or a handle from `hc_ga_fit` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hc_ga_free(model: *mut HcGaModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Load a model from a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated UTF-8 path and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_model_load(dir: *const c_char, out: *mut *mut HcModel) -> HcStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(dir) }
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let ckpt = load_checkpoint(Path::new(path)).map_err(core)?;
        unsafe { *out = Box::into_raw(Box::new(HcModel(ckpt.model))) };
        Ok(())
    })
}

/// Input length expected by a loaded model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hc_model_input_dim(model: *const HcModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.0.as_predictor().input_dim())
}

/// # Safety
/// As for `hc_ga_predict`, with `hc_model_input_dim` as the row length.
#[no_mangle]
pub unsafe extern "C" fn hc_model_predict(
    model: *const HcModel,
    x: *const f64,
    n: usize,
    mu: *mut f64,
    sigma: *mut f64,
) -> HcStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let p = m.0.as_predictor();
        let xs = unsafe { slice(x, n * p.input_dim(), "x")? };
        let (mu, sigma) = unsafe { (slice_mut(mu, n, "mu")?, slice_mut(sigma, n, "sigma")?) };
        predict_into(p, xs, n, mu, sigma)
    })
}

/// # Safety
/// `model` must be null or a handle from `hc_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hc_model_free(model: *mut HcModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Build filters for an `n_lat x n_lon` field; both sides must be multiples of `2^scales`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hc_filter_bank_new(
    scales: usize,
    orientations: usize,
    n_lat: usize,
    n_lon: usize,
    out: *mut *mut HcFilterBank,
) -> HcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bank = build_filter_bank(scales, orientations, n_lat, n_lon).map_err(core)?;
        unsafe { *out = Box::into_raw(Box::new(HcFilterBank(bank))) };
        Ok(())
    })
}

/// Output shape `(height, width, channels)` of a transform up to `max_order`.
///
/// # Safety
/// `bank` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn hc_filter_bank_output_shape(
    bank: *const HcFilterBank,
    max_order: usize,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> HcStatus {
    guard(|| {
        let b = unsafe { bank.as_ref() }.ok_or_else(|| null("bank"))?;
        if height.is_null() || width.is_null() || channels.is_null() {
            return Err(null("shape output"));
        }
        if max_order > 2 {
            return Err(invalid("max_order must be 0, 1 or 2"));
        }
        let (h, w) = b.0.output_shape();
        unsafe {
            *height = h;
            *width = w;
            *channels = b.0.channel_count(max_order);
        }
        Ok(())
    })
}

/// Scattering coefficients of one field, layout `(height, width, channel)` with channel fastest.
///
/// # Safety
/// `x` must hold `n_lat * n_lon` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn hc_filter_bank_scatter(
    bank: *const HcFilterBank,
    x: *const f64,
    max_order: usize,
    out: *mut f64,
    out_len: usize,
) -> HcStatus {
    guard(|| {
        let b = unsafe { bank.as_ref() }.ok_or_else(|| null("bank"))?;
        if max_order > 2 {
            return Err(invalid("max_order must be 0, 1 or 2"));
        }
        let (h, w) = b.0.input_shape();
        let xs = unsafe { slice(x, h * w, "x")? };
        let f = b.0.scatter(xs, max_order).map_err(core)?;
        if out_len != f.values.len() {
            return Err(core(Error::shape(f.values.len(), out_len)));
        }
        unsafe { slice_mut(out, out_len, "out")? }.copy_from_slice(&f.values);
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a handle from `hc_filter_bank_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hc_filter_bank_free(bank: *mut HcFilterBank) {
    if !bank.is_null() {
        drop(unsafe { Box::from_raw(bank) });
    }
}

fn metric(mu: f64, sigma: f64, out: *mut f64, f: impl FnOnce(GaussianPrediction) -> f64) -> HcStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = f(GaussianPrediction::new(mu, sigma).map_err(core)?);
        Ok(())
    })
}

/// CRPS of a normal forecast.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hc_crps_gaussian(mu: f64, sigma: f64, y: f64, out: *mut f64) -> HcStatus {
    metric(mu, sigma, out, |p| crps_gaussian(p, y))
}

/// Negative log-likelihood of a normal forecast.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hc_nll_gaussian(mu: f64, sigma: f64, y: f64, out: *mut f64) -> HcStatus {
    metric(mu, sigma, out, |p| nll_gaussian(p, y))
}

/// Binary cross entropy of the event `y >= threshold`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hc_bce_gaussian(mu: f64, sigma: f64, y: f64, threshold: f64, out: *mut f64) -> HcStatus {
    metric(mu, sigma, out, |p| bce(p, y, threshold))
}
