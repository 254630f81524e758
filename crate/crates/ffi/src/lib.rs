//! C ABI over the plab engine.
//!
//! Every entry point returns a [`PlabStatus`]; on failure the message is
//! available from [`plab_last_error`] until the next call on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use plab::exp::{run_experiment, ExperimentConfig};
use plab::verify::{verify, VerifyOptions};
use plab::{
    build, classify, ActivityAccumulator, ArchSpec, Metric, Model, PlabError, RngState, Tensor,
};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidShape = 4,
    NumericOverflow = 5,
    StateError = 6,
    InconsistentSites = 7,
    EmptyWindow = 8,
    InvalidThreshold = 9,
    TooFewSites = 10,
    NotFound = 11,
    InvalidArch = 12,
    NotStarted = 13,
    IoError = 14,
    BufferTooSmall = 15,
    Panic = 16,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlabMetric {
    Redo = 0,
    Grama = 1,
}

impl From<PlabMetric> for Metric {
    fn from(m: PlabMetric) -> Self {
        match m {
            PlabMetric::Redo => Metric::Redo,
            PlabMetric::Grama => Metric::Grama,
        }
    }
}

/// A network plus the cache of its last forward pass.
pub struct PlabModel {
    model: Model,
}

/// Running per-site activity sums for one model.
pub struct PlabAccumulator {
    acc: ActivityAccumulator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &PlabError) -> PlabStatus {
    match e {
        PlabError::InvalidShape(_) => PlabStatus::InvalidShape,
        PlabError::NumericOverflow(_) => PlabStatus::NumericOverflow,
        PlabError::State(_) => PlabStatus::StateError,
        PlabError::InconsistentSites(_) => PlabStatus::InconsistentSites,
        PlabError::EmptyWindow => PlabStatus::EmptyWindow,
        PlabError::InvalidThreshold(_) => PlabStatus::InvalidThreshold,
        PlabError::TooFewSites(_) => PlabStatus::TooFewSites,
        PlabError::NotFound(_) => PlabStatus::NotFound,
        PlabError::InvalidArch(_) => PlabStatus::InvalidArch,
        PlabError::NotStarted(_) => PlabStatus::NotStarted,
        PlabError::Config { .. } => PlabStatus::InvalidConfig,
        PlabError::Io { .. } => PlabStatus::IoError,
    }
}

struct Fail(PlabStatus, String);

impl From<PlabError> for Fail {
    fn from(e: PlabError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> PlabStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PlabStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PlabStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PlabStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            PlabStatus::InvalidUtf8,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(
    p: *mut f64,
    len: usize,
    need: usize,
    what: &str,
) -> FfiResult<&'a mut [f64]> {
    if len < need {
        return Err(Fail(
            PlabStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn plab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn plab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a network from an architecture JSON object. `input_dim` and
/// `output_dim` must be set in the JSON.
///
/// # Safety
/// `arch_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plab_model_new(
    arch_json: *const c_char,
    seed: u64,
    out: *mut *mut PlabModel,
) -> PlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(arch_json, "arch_json")?;
        let spec: ArchSpec = serde_json::from_str(text)
            .map_err(|e| Fail(PlabStatus::InvalidConfig, format!("arch: {e}")))?;
        let model = build(&spec, &mut RngState::new(seed, plab::rng::streams::INIT))?;
        *out = Box::into_raw(Box::new(PlabModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`plab_model_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn plab_model_free(model: *mut PlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width, output width and number of neuron sites.
///
/// # Safety
/// `model` must be a live handle; the out pointers may be NULL.
#[no_mangle]
pub unsafe extern "C" fn plab_model_dims(
    model: *const PlabModel,
    input_dim: *mut usize,
    output_dim: *mut usize,
    num_sites: *mut usize,
) -> PlabStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if let Some(p) = input_dim.as_mut() {
            *p = m.input_dim();
        }
        if let Some(p) = output_dim.as_mut() {
            *p = m.output_dim();
        }
        if let Some(p) = num_sites.as_mut() {
            *p = m.active_sites().len();
        }
        Ok(())
    })
}

/// Forward pass on a row-major `[rows, input_dim]` batch; writes the
/// `[rows, output_dim]` result into `out`.
///
/// # Safety
/// `input` must hold `rows * input_dim` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn plab_model_forward(
    model: *mut PlabModel,
    input: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> PlabStatus {
    guard(|| {
        let m = &mut handle(model, "model")?.model;
        let x = slice_arg(input, rows * m.input_dim(), "input")?;
        let x = Tensor::from_vec(&[rows, m.input_dim()], x.to_vec())?;
        let y = m.forward(&x)?;
        out_slice(out, out_len, y.len(), "out")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Backward pass from the gradient at the output of the last forward. Tap
/// records go into `acc` when it is non-NULL.
///
/// # Safety
/// `grad` must hold `rows * output_dim` values of the last forward.
#[no_mangle]
pub unsafe extern "C" fn plab_model_backward(
    model: *mut PlabModel,
    grad: *const f64,
    len: usize,
    acc: *mut PlabAccumulator,
) -> PlabStatus {
    guard(|| {
        let m = &mut handle(model, "model")?.model;
        let g = slice_arg(grad, len, "grad")?;
        let out_dim = m.output_dim();
        if out_dim == 0 || !len.is_multiple_of(out_dim) {
            return Err(Fail(
                PlabStatus::InvalidShape,
                format!("gradient length {len} is not a multiple of {out_dim}"),
            ));
        }
        let g = Tensor::from_vec(&[len / out_dim, out_dim], g.to_vec())?;
        let bw = m.backward(&g)?;
        if let Some(a) = acc.as_mut() {
            a.acc.accumulate(&bw.taps)?;
        }
        Ok(())
    })
}

/// Empty accumulator over the active sites of `model`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plab_accumulator_new(
    model: *const PlabModel,
    out: *mut *mut PlabAccumulator,
) -> PlabStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(PlabAccumulator {
            acc: ActivityAccumulator::new(m.active_sites()),
        }));
        Ok(())
    })
}

/// # Safety
/// `acc` must come from [`plab_accumulator_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn plab_accumulator_free(acc: *mut PlabAccumulator) {
    if !acc.is_null() {
        drop(Box::from_raw(acc));
    }
}

/// Normalized scores of every site in site order.
///
/// # Safety
/// `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn plab_accumulator_scores(
    acc: *const PlabAccumulator,
    metric: PlabMetric,
    out: *mut f64,
    out_len: usize,
) -> PlabStatus {
    guard(|| {
        let a = &acc.as_ref().ok_or_else(|| null("acc"))?.acc;
        let scores = a.compute_scores()?;
        let values: Vec<f64> = plab::metrics::site_scores(&scores, metric.into())
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        out_slice(out, out_len, values.len(), "out")?.copy_from_slice(&values);
        Ok(())
    })
}

/// Fraction of sites whose score is `<= tau`.
///
/// # Safety
/// `acc` must be a live handle; `ratio` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plab_accumulator_inactive_ratio(
    acc: *const PlabAccumulator,
    metric: PlabMetric,
    tau: f64,
    ratio: *mut f64,
) -> PlabStatus {
    guard(|| {
        let a = &acc.as_ref().ok_or_else(|| null("acc"))?.acc;
        let r = ratio.as_mut().ok_or_else(|| null("ratio"))?;
        *r = classify(&a.compute_scores()?, tau, metric.into())?.ratio;
        Ok(())
    })
}

/// Clears the accumulated sums.
///
/// # Safety
/// `acc` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn plab_accumulator_clear(acc: *mut PlabAccumulator) -> PlabStatus {
    guard(|| {
        let a = &mut handle(acc, "acc")?.acc;
        if a.count() > 0 {
            a.drain()?;
        }
        Ok(())
    })
}

/// Runs an experiment config (JSON text) into `out_dir`. On success
/// `summary_json` (when non-NULL) receives the summary, to be released with
/// [`plab_string_free`].
///
/// # Safety
/// String arguments must be NUL-terminated; `summary_json` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn plab_run_config(
    config_json: *const c_char,
    out_dir: *const c_char,
    summary_json: *mut *mut c_char,
) -> PlabStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_json(str_arg(config_json, "config_json")?)?;
        let dir = str_arg(out_dir, "out_dir")?;
        let report = run_experiment(&cfg, Path::new(dir))?;
        if let Some(p) = summary_json.as_mut() {
            *p = into_c_string(serde_json::to_string(&report.summary).expect("summary serializes"));
        }
        Ok(())
    })
}

/// Runs the invariant battery; `passed` receives 1 when every property holds.
///
/// # Safety
/// `passed` must be writable; `report` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn plab_verify(
    seed: u64,
    passed: *mut i32,
    report: *mut *mut c_char,
) -> PlabStatus {
    guard(|| {
        let p = passed.as_mut().ok_or_else(|| null("passed"))?;
        let r = verify(&VerifyOptions { seed, fault: None })?;
        *p = i32::from(r.passed());
        if let Some(out) = report.as_mut() {
            *out = into_c_string(r.to_string());
        }
        Ok(())
    })
}
