//! C ABI for embedding the lab in other languages.
//!
//! The surface follows the usual opaque-handle convention: configs and
//! finished runs are heap objects behind `mcl_config` / `mcl_run` pointers,
//! every fallible call returns an `mcl_status`, and the last error message
//! is kept per thread for `mcl_last_error`. The matching declarations live
//! in `include/mcl.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mcl::config::RunConfig;
use mcl::data::export_csv;
use mcl::trainer::{self, metrics_to_csv, MetricsRecord};

/// Status codes mirror the CLI exit codes: 0 ok, 2 config error, 3 runtime
/// error, 1 anything else.
pub const MCL_OK: i32 = 0;
pub const MCL_ERR: i32 = 1;
pub const MCL_ERR_CONFIG: i32 = 2;
pub const MCL_ERR_RUNTIME: i32 = 3;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &mcl::Error) -> i32 {
    match err.exit_code() {
        2 => MCL_ERR_CONFIG,
        3 => MCL_ERR_RUNTIME,
        _ => MCL_ERR,
    }
}

/// Opaque run configuration.
pub struct MclConfig {
    inner: RunConfig,
}

/// Opaque finished training run.
pub struct MclRun {
    metrics: Vec<MetricsRecord>,
    accuracy: f64,
    mean_class_accuracy: f64,
    diverged: bool,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, i32> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(MCL_ERR_CONFIG);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(MCL_ERR_CONFIG)
        }
    }
}

fn guard(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            MCL_ERR
        }
    }
}

/// Library version string; static storage, do not free.
#[no_mangle]
pub extern "C" fn mcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Last error message for this thread; valid until the next failing call.
#[no_mangle]
pub extern "C" fn mcl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Fresh configuration with every key at its default.
#[no_mangle]
pub extern "C" fn mcl_config_new() -> *mut MclConfig {
    Box::into_raw(Box::new(MclConfig {
        inner: RunConfig::default(),
    }))
}

/// # Safety
/// `cfg` must be a pointer from `mcl_config_new` (or null).
#[no_mangle]
pub unsafe extern "C" fn mcl_config_free(cfg: *mut MclConfig) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg) });
    }
}

/// Set one `key = value` pair; unknown keys are rejected.
///
/// # Safety
/// `cfg` must come from `mcl_config_new`; `key`/`value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mcl_config_set(
    cfg: *mut MclConfig,
    key: *const c_char,
    value: *const c_char,
) -> i32 {
    guard(|| {
        if cfg.is_null() {
            set_error("config handle is null");
            return MCL_ERR_CONFIG;
        }
        let key = match unsafe { cstr_arg(key, "key") } {
            Ok(s) => s,
            Err(c) => return c,
        };
        let value = match unsafe { cstr_arg(value, "value") } {
            Ok(s) => s,
            Err(c) => return c,
        };
        match unsafe { &mut *cfg }.inner.set(key, value) {
            Ok(()) => MCL_OK,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Load a flat `key = value` config file into the handle.
///
/// # Safety
/// `cfg` must come from `mcl_config_new`; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mcl_config_load(cfg: *mut MclConfig, path: *const c_char) -> i32 {
    guard(|| {
        if cfg.is_null() {
            set_error("config handle is null");
            return MCL_ERR_CONFIG;
        }
        let path = match unsafe { cstr_arg(path, "path") } {
            Ok(s) => s,
            Err(c) => return c,
        };
        match RunConfig::parse_file(Path::new(path)) {
            Ok(parsed) => {
                unsafe { &mut *cfg }.inner = parsed;
                MCL_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Generate the configured benchmark and write
/// `<out_prefix>_source.csv` / `<out_prefix>_target.csv`.
///
/// # Safety
/// `cfg` must come from `mcl_config_new`; `out_prefix` must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mcl_generate_csv(
    cfg: *const MclConfig,
    out_prefix: *const c_char,
) -> i32 {
    guard(|| {
        if cfg.is_null() {
            set_error("config handle is null");
            return MCL_ERR_CONFIG;
        }
        let prefix = match unsafe { cstr_arg(out_prefix, "out_prefix") } {
            Ok(s) => s,
            Err(c) => return c,
        };
        let cfg = unsafe { &*cfg };
        let result = (|| -> mcl::Result<()> {
            let (source, target) = cfg.inner.datasets_at(cfg.inner.seed)?;
            export_csv(&source, Path::new(&format!("{prefix}_source.csv")))?;
            export_csv(&target, Path::new(&format!("{prefix}_target.csv")))?;
            Ok(())
        })();
        match result {
            Ok(()) => MCL_OK,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Train with the given configuration. On success `*out` owns the finished
/// run; free it with `mcl_run_free`.
///
/// # Safety
/// `cfg` must come from `mcl_config_new`; `out` must point to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn mcl_train(cfg: *const MclConfig, out: *mut *mut MclRun) -> i32 {
    guard(|| {
        if cfg.is_null() || out.is_null() {
            set_error("null handle passed to mcl_train");
            return MCL_ERR_CONFIG;
        }
        let cfg = unsafe { &*cfg };
        let result = (|| -> mcl::Result<MclRun> {
            let (source, target) = cfg.inner.datasets_at(cfg.inner.seed)?;
            let outcome = trainer::train_run(&cfg.inner.train_config(), &source, &target)?;
            Ok(MclRun {
                metrics: outcome.metrics,
                accuracy: outcome.final_eval.as_ref().map_or(f64::NAN, |e| e.overall),
                mean_class_accuracy: outcome.final_eval.as_ref().map_or(f64::NAN, |e| e.mca),
                diverged: outcome.divergence.is_some(),
            })
        })();
        match result {
            Ok(run) => {
                unsafe { *out = Box::into_raw(Box::new(run)) };
                MCL_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `run` must be a pointer from `mcl_train` (or null).
#[no_mangle]
pub unsafe extern "C" fn mcl_run_free(run: *mut MclRun) {
    if !run.is_null() {
        drop(unsafe { Box::from_raw(run) });
    }
}

/// Final overall accuracy on the evaluation pool.
///
/// # Safety
/// `run` must come from `mcl_train`.
#[no_mangle]
pub unsafe extern "C" fn mcl_run_accuracy(run: *const MclRun) -> f64 {
    if run.is_null() {
        return f64::NAN;
    }
    unsafe { &*run }.accuracy
}

/// Final mean class-wise accuracy.
///
/// # Safety
/// `run` must come from `mcl_train`.
#[no_mangle]
pub unsafe extern "C" fn mcl_run_mean_class_accuracy(run: *const MclRun) -> f64 {
    if run.is_null() {
        return f64::NAN;
    }
    unsafe { &*run }.mean_class_accuracy
}

/// 1 if the run stopped on a non-finite loss, else 0.
///
/// # Safety
/// `run` must come from `mcl_train`.
#[no_mangle]
pub unsafe extern "C" fn mcl_run_diverged(run: *const MclRun) -> i32 {
    if run.is_null() {
        return 0;
    }
    i32::from(unsafe { &*run }.diverged)
}

/// Number of metrics rows recorded during the run.
///
/// # Safety
/// `run` must come from `mcl_train`.
#[no_mangle]
pub unsafe extern "C" fn mcl_run_metrics_rows(run: *const MclRun) -> usize {
    if run.is_null() {
        return 0;
    }
    unsafe { &*run }.metrics.len()
}

/// The full metrics table as a CSV string; free with `mcl_string_free`.
///
/// # Safety
/// `run` must come from `mcl_train`.
#[no_mangle]
pub unsafe extern "C" fn mcl_run_metrics_csv(run: *const MclRun) -> *mut c_char {
    if run.is_null() {
        return std::ptr::null_mut();
    }
    let csv = metrics_to_csv(&unsafe { &*run }.metrics);
    CString::new(csv)
        .map(|s| s.into_raw())
        .unwrap_or(std::ptr::null_mut())
}

/// # Safety
/// `s` must be a pointer returned by `mcl_run_metrics_csv` (or null).
#[no_mangle]
pub unsafe extern "C" fn mcl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
