//! C ABI over the fedsim engine.
//!
//! Every fallible function returns a [`FedsimStatus`] and writes its result
//! through an out-pointer. On failure, [`fedsim_last_error_message`] returns
//! a description of the most recent error on the calling thread. Handles are
//! opaque and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use fedsim::analysis::weight_divergence;
use fedsim::harness::{self, ExperimentConfig, ExperimentResult};
use fedsim::model::ParamSet;
use fedsim::partition::ks_statistic;
use fedsim::FedError;

/// Status codes. `CONFIG` and `RUNTIME` match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FedsimStatus {
    Ok = 0,
    Config = 2,
    Runtime = 3,
    NullPointer = 4,
    InvalidUtf8 = 5,
    Panic = 6,
    OutOfRange = 7,
}

/// Parsed and validated experiment configuration.
pub struct FedsimConfig {
    inner: ExperimentConfig,
}

/// Outcome of a federated run over all configured seeds.
pub struct FedsimResult {
    inner: ExperimentResult,
}

/// Named parameter tensors.
pub struct FedsimParams {
    inner: ParamSet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

struct Failure(FedsimStatus, String);

impl From<FedError> for Failure {
    fn from(e: FedError) -> Self {
        let code = if e.is_config() { FedsimStatus::Config } else { FedsimStatus::Runtime };
        Failure(code, e.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> Outcome<()>) -> FedsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FedsimStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            FedsimStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FedsimStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(FedsimStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Outcome<PathBuf> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Outcome<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T) -> Outcome<()> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_box<T>(out: *mut *mut T, value: T) -> Outcome<()> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next fedsim call on the same thread.
#[no_mangle]
pub extern "C" fn fedsim_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a JSON experiment config from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_load(path: *const c_char, out: *mut *mut FedsimConfig) -> FedsimStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let inner = harness::load_config(&path, &[])?;
        put_box(out, FedsimConfig { inner })
    })
}

/// Parses a JSON experiment config from a string.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_parse(json: *const c_char, out: *mut *mut FedsimConfig) -> FedsimStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let inner = harness::parse_config(text, Path::new("<string>"), &[])?;
        put_box(out, FedsimConfig { inner })
    })
}

/// Applies a `key=value` override (dotted keys, JSON values). On failure
/// the config is left unchanged.
///
/// # Safety
/// `config` must come from this library; `assignment` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_set(config: *mut FedsimConfig, assignment: *const c_char) -> FedsimStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| null("config"))?;
        let assignment = str_arg(assignment, "assignment")?.to_string();
        cfg.inner = harness::parse_config(&cfg.inner.to_json(), Path::new("<config>"), &[assignment])?;
        Ok(())
    })
}

/// Resolved config as JSON. Free the string with [`fedsim_string_free`].
///
/// # Safety
/// `config` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_to_json(config: *const FedsimConfig, out: *mut *mut c_char) -> FedsimStatus {
    guard(|| {
        let cfg = handle(config, "config")?;
        let s = CString::new(cfg.inner.to_json()).expect("JSON has no interior nul");
        put(out, s.into_raw())
    })
}

/// # Safety
/// `config` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_free(config: *mut FedsimConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// # Safety
/// `s` must be a string returned by this library or null.
#[no_mangle]
pub unsafe extern "C" fn fedsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs the experiment for every configured seed.
///
/// # Safety
/// `config` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run(config: *const FedsimConfig, parallel_seeds: bool, out: *mut *mut FedsimResult) -> FedsimStatus {
    guard(|| {
        let cfg = handle(config, "config")?;
        let inner = harness::run_experiment(&cfg.inner, parallel_seeds)?;
        put_box(out, FedsimResult { inner })
    })
}

/// Number of seeds in the result.
///
/// # Safety
/// `result` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_result_num_seeds(result: *const FedsimResult, out: *mut usize) -> FedsimStatus {
    guard(|| put(out, handle(result, "result")?.inner.runs.len()))
}

/// Rounds per seed.
///
/// # Safety
/// `result` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_result_num_rounds(result: *const FedsimResult, out: *mut usize) -> FedsimStatus {
    guard(|| put(out, handle(result, "result")?.inner.config.rounds))
}

unsafe fn run_at<'a>(result: *const FedsimResult, seed_index: usize) -> Outcome<&'a harness::SeedRun> {
    let r = handle(result, "result")?;
    r.inner
        .runs
        .get(seed_index)
        .ok_or_else(|| Failure(FedsimStatus::OutOfRange, format!("seed index {seed_index} out of range")))
}

/// Test accuracy after `round` (1-based) for the seed at `seed_index`.
///
/// # Safety
/// `result` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_result_accuracy(
    result: *const FedsimResult,
    seed_index: usize,
    round: usize,
    out: *mut f64,
) -> FedsimStatus {
    guard(|| {
        let run = run_at(result, seed_index)?;
        let row = round
            .checked_sub(1)
            .and_then(|i| run.rows.get(i))
            .ok_or_else(|| Failure(FedsimStatus::OutOfRange, format!("round {round} out of range")))?;
        put(out, row.global_test_acc)
    })
}

/// Mean and population standard deviation of the final accuracy over seeds.
///
/// # Safety
/// `result` must come from this library; both out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_result_final_accuracy(
    result: *const FedsimResult,
    mean: *mut f64,
    std: *mut f64,
) -> FedsimStatus {
    guard(|| {
        let s = harness::output::summarize(&handle(result, "result")?.inner);
        put(mean, s.final_acc.mean)?;
        put(std, s.final_acc.std)
    })
}

/// Writes the run artifacts (round CSV, summary, config echo, ...) to `dir`.
///
/// # Safety
/// `result` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fedsim_result_write(result: *const FedsimResult, dir: *const c_char) -> FedsimStatus {
    guard(|| {
        let r = handle(result, "result")?;
        harness::write_results(&r.inner, &path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// Copy of the final global parameters for the seed at `seed_index`.
///
/// # Safety
/// `result` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_result_params(
    result: *const FedsimResult,
    seed_index: usize,
    out: *mut *mut FedsimParams,
) -> FedsimStatus {
    guard(|| {
        let run = run_at(result, seed_index)?;
        put_box(out, FedsimParams { inner: run.final_params.clone() })
    })
}

/// # Safety
/// `result` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn fedsim_result_free(result: *mut FedsimResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Loads a parameter file written by `fedsim run` or `fedsim baseline`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_params_load(path: *const c_char, out: *mut *mut FedsimParams) -> FedsimStatus {
    guard(|| {
        let inner = ParamSet::load(&path_arg(path, "path")?)?;
        put_box(out, FedsimParams { inner })
    })
}

/// Saves parameters (binary plus JSON manifest).
///
/// # Safety
/// `params` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fedsim_params_save(params: *const FedsimParams, path: *const c_char) -> FedsimStatus {
    guard(|| {
        handle(params, "params")?.inner.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of named tensors.
///
/// # Safety
/// `params` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_params_len(params: *const FedsimParams, out: *mut usize) -> FedsimStatus {
    guard(|| put(out, handle(params, "params")?.inner.len()))
}

/// Total scalar count over all tensors.
///
/// # Safety
/// `params` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_params_numel(params: *const FedsimParams, out: *mut usize) -> FedsimStatus {
    guard(|| put(out, handle(params, "params")?.inner.numel()))
}

/// # Safety
/// `params` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn fedsim_params_free(params: *mut FedsimParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Relative L2 distance `‖fed − reference‖ / ‖reference‖` over trainable
/// entries.
///
/// # Safety
/// Both handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_weight_divergence(
    fed: *const FedsimParams,
    reference: *const FedsimParams,
    out: *mut f64,
) -> FedsimStatus {
    guard(|| {
        let report = weight_divergence(&handle(fed, "fed")?.inner, &handle(reference, "reference")?.inner, 0)?;
        put(out, report.global)
    })
}

/// KS statistic between two class distributions of length `len`. Inputs
/// are normalized internally.
///
/// # Safety
/// `p` and `q` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_ks_statistic(p: *const f64, q: *const f64, len: usize, out: *mut f64) -> FedsimStatus {
    guard(|| {
        if p.is_null() || q.is_null() {
            return Err(null("distribution"));
        }
        let (p, q) = (std::slice::from_raw_parts(p, len), std::slice::from_raw_parts(q, len));
        put(out, ks_statistic(p, q)?)
    })
}
