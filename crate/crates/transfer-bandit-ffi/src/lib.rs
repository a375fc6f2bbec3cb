//! C ABI for the transfer-bandit simulator.
//!
//! The surface is handle-based: load a config into an opaque `TbExperiment`,
//! adjust run parameters, execute, then query the aggregated curves. Every
//! call returns a [`TbStatus`]; on failure the thread-local message behind
//! [`tb_last_error_message`] explains what went wrong. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use transfer_bandit::harness::{self, ExperimentConfig, ResultSet};
use transfer_bandit::Error;

/// Status codes returned by every API call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum TbStatus {
    Ok = 0,
    /// A pointer or index argument was null or out of range.
    InvalidArgument = 1,
    /// The configuration file is missing or malformed.
    ConfigError = 2,
    /// A factorization or solve failed.
    NumericalError = 3,
    /// A run aborted mid-simulation or an invariant was violated.
    RuntimeError = 4,
    /// A panic was caught at the boundary.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> TbStatus {
    match err {
        Error::Config { .. } | Error::Input(_) | Error::Io { .. } => TbStatus::ConfigError,
        Error::Numerical(_) => TbStatus::NumericalError,
        _ => TbStatus::RuntimeError,
    }
}

fn guarded(f: impl FnOnce() -> TbStatus) -> TbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic caught at the FFI boundary");
            TbStatus::Panic
        }
    }
}

/// An experiment handle: a validated configuration plus, after
/// [`tb_experiment_run`], the aggregated result curves.
pub struct TbExperiment {
    config: ExperimentConfig,
    results: Option<ResultSet>,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message on this thread into `buf` (truncated to
/// `len - 1` bytes, always NUL-terminated) and returns the full message
/// length in bytes.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (then only the
/// length is returned).
#[no_mangle]
pub unsafe extern "C" fn tb_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Parses and validates a config file. On success `*out` owns a new handle
/// that must be released with [`tb_experiment_free`]. `expand_sweep`
/// instantiates the `[sweep]` scenarios; otherwise only the base scenario is
/// kept.
///
/// # Safety
/// `config_path` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tb_experiment_load(
    config_path: *const c_char,
    expand_sweep: bool,
    out: *mut *mut TbExperiment,
) -> TbStatus {
    guarded(|| {
        if config_path.is_null() || out.is_null() {
            set_error("null pointer argument");
            return TbStatus::InvalidArgument;
        }
        let path = match CStr::from_ptr(config_path).to_str() {
            Ok(p) => p,
            Err(_) => {
                set_error("config path is not valid UTF-8");
                return TbStatus::InvalidArgument;
            }
        };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                set_error(&format!("cannot read `{path}`: {e}"));
                return TbStatus::ConfigError;
            }
        };
        match harness::load_experiment(&text, expand_sweep) {
            Ok(config) => {
                *out = Box::into_raw(Box::new(TbExperiment {
                    config,
                    results: None,
                }));
                TbStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

unsafe fn with_experiment<T>(
    handle: *mut TbExperiment,
    f: impl FnOnce(&mut TbExperiment) -> T,
) -> Option<T> {
    if handle.is_null() {
        set_error("null experiment handle");
        return None;
    }
    Some(f(&mut *handle))
}

/// Overrides the base seed.
///
/// # Safety
/// `handle` must come from [`tb_experiment_load`] and not be freed.
#[no_mangle]
pub unsafe extern "C" fn tb_experiment_set_seed(handle: *mut TbExperiment, seed: u64) -> TbStatus {
    guarded(
        || match with_experiment(handle, |exp| exp.config.base_seed = seed) {
            Some(()) => TbStatus::Ok,
            None => TbStatus::InvalidArgument,
        },
    )
}

/// Overrides the number of runs per (scenario, policy).
///
/// # Safety
/// As for [`tb_experiment_set_seed`].
#[no_mangle]
pub unsafe extern "C" fn tb_experiment_set_runs(
    handle: *mut TbExperiment,
    runs: usize,
) -> TbStatus {
    guarded(|| {
        if runs == 0 {
            set_error("need at least one run");
            return TbStatus::InvalidArgument;
        }
        match with_experiment(handle, |exp| exp.config.n_runs = runs) {
            Some(()) => TbStatus::Ok,
            None => TbStatus::InvalidArgument,
        }
    })
}

/// Caps worker threads.
///
/// # Safety
/// As for [`tb_experiment_set_seed`].
#[no_mangle]
pub unsafe extern "C" fn tb_experiment_set_threads(
    handle: *mut TbExperiment,
    threads: usize,
) -> TbStatus {
    guarded(
        || match with_experiment(handle, |exp| exp.config.threads = threads.max(1)) {
            Some(()) => TbStatus::Ok,
            None => TbStatus::InvalidArgument,
        },
    )
}

/// Redirects all output files.
///
/// # Safety
/// `handle` as above; `out_dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tb_experiment_set_out_dir(
    handle: *mut TbExperiment,
    out_dir: *const c_char,
) -> TbStatus {
    guarded(|| {
        if out_dir.is_null() {
            set_error("null out_dir");
            return TbStatus::InvalidArgument;
        }
        let path = match CStr::from_ptr(out_dir).to_str() {
            Ok(p) => PathBuf::from(p),
            Err(_) => {
                set_error("out_dir is not valid UTF-8");
                return TbStatus::InvalidArgument;
            }
        };
        match with_experiment(handle, |exp| exp.config.out_dir = path) {
            Some(()) => TbStatus::Ok,
            None => TbStatus::InvalidArgument,
        }
    })
}

/// Enables or disables the SVG plot.
///
/// # Safety
/// As for [`tb_experiment_set_seed`].
#[no_mangle]
pub unsafe extern "C" fn tb_experiment_set_svg(handle: *mut TbExperiment, svg: bool) -> TbStatus {
    guarded(
        || match with_experiment(handle, |exp| exp.config.svg = svg) {
            Some(()) => TbStatus::Ok,
            None => TbStatus::InvalidArgument,
        },
    )
}

/// Runs the full experiment grid and writes the output files. Returns
/// `RuntimeError` if any run failed its invariants (the remaining runs still
/// complete and are written).
///
/// # Safety
/// As for [`tb_experiment_set_seed`].
#[no_mangle]
pub unsafe extern "C" fn tb_experiment_run(handle: *mut TbExperiment) -> TbStatus {
    guarded(|| {
        let Some(result) = with_experiment(handle, |exp| {
            harness::run_experiment(&exp.config).map(|r| {
                let failures = r.failures;
                exp.results = Some(r);
                failures
            })
        }) else {
            return TbStatus::InvalidArgument;
        };
        match result {
            Ok(0) => TbStatus::Ok,
            Ok(failures) => {
                set_error(&format!("{failures} run(s) failed; see diagnostics.json"));
                TbStatus::RuntimeError
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Number of aggregated (scenario, policy) curves after a successful run;
/// 0 before [`tb_experiment_run`].
///
/// # Safety
/// As for [`tb_experiment_set_seed`].
#[no_mangle]
pub unsafe extern "C" fn tb_experiment_curve_count(handle: *mut TbExperiment) -> usize {
    match catch_unwind(AssertUnwindSafe(|| {
        with_experiment(handle, |exp| {
            exp.results.as_ref().map(|r| r.curves.len()).unwrap_or(0)
        })
        .unwrap_or(0)
    })) {
        Ok(n) => n,
        Err(_) => 0,
    }
}

/// Copies the `"scenario/policy"` label of curve `index` into `buf`
/// (truncated, NUL-terminated) and returns the full label length, or 0 if the
/// index is out of range.
///
/// # Safety
/// `handle` as above; `buf` must point to `len` writable bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn tb_experiment_curve_name(
    handle: *mut TbExperiment,
    index: usize,
    buf: *mut c_char,
    len: usize,
) -> usize {
    match catch_unwind(AssertUnwindSafe(|| {
        with_experiment(handle, |exp| {
            let Some(results) = exp.results.as_ref() else {
                return 0;
            };
            let Some(curve) = results.curves.get(index) else {
                return 0;
            };
            let label = format!("{}/{}", curve.scenario, curve.policy);
            let bytes = label.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        })
        .unwrap_or(0)
    })) {
        Ok(n) => n,
        Err(_) => 0,
    }
}

/// Writes the mean final cumulative regret of curve `index` into `out`.
///
/// # Safety
/// `handle` as above; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tb_experiment_final_regret(
    handle: *mut TbExperiment,
    index: usize,
    out: *mut f64,
) -> TbStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return TbStatus::InvalidArgument;
        }
        let Some(status) = with_experiment(handle, |exp| {
            let Some(results) = exp.results.as_ref() else {
                set_error("experiment has not been run");
                return TbStatus::InvalidArgument;
            };
            let Some(curve) = results.curves.get(index) else {
                set_error("curve index out of range");
                return TbStatus::InvalidArgument;
            };
            *out = curve.final_mean();
            TbStatus::Ok
        }) else {
            return TbStatus::InvalidArgument;
        };
        status
    })
}

/// Releases a handle. Passing null is a no-op.
///
/// # Safety
/// `handle` must come from [`tb_experiment_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tb_experiment_free(handle: *mut TbExperiment) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Runs the reduced-scale verification suite (the CLI's `selftest`).
#[no_mangle]
pub extern "C" fn tb_selftest() -> TbStatus {
    guarded(|| match harness::selftest(std::io::sink()) {
        Ok(()) => TbStatus::Ok,
        Err(e) => {
            set_error(&e.to_string());
            TbStatus::RuntimeError
        }
    })
}
