//! C ABI over the `safeagg` simulator.
//!
//! Scenarios are created from TOML text, stepped round by round and turned
//! into a report. Every handle returned here must be released with its
//! matching `*_free` function. Strings returned to the caller are owned by
//! the caller and released with [`safeagg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use safeagg::detection;
use safeagg::sim::{RunReport, ScenarioConfig, Simulation};

/// Status codes returned by fallible calls.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafeaggStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    Simulation = 4,
    Finished = 5,
    InvalidArgument = 6,
    Panic = 7,
}

/// Opaque scenario handle.
pub struct SafeaggScenario {
    sim: Option<Simulation>,
}

/// Opaque report handle.
pub struct SafeaggReport {
    report: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn guard(f: impl FnOnce() -> SafeaggStatus) -> SafeaggStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(msg);
            SafeaggStatus::Panic
        }
    }
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, SafeaggStatus> {
    if p.is_null() {
        set_error("null string argument");
        return Err(SafeaggStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        SafeaggStatus::InvalidUtf8
    })
}

/// Message for the last failed call on this thread, or NULL.
///
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn safeagg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn safeagg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parse a TOML scenario and build a simulation.
///
/// # Safety
/// `toml` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn safeagg_scenario_new(toml: *const c_char, out: *mut *mut SafeaggScenario) -> SafeaggStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return SafeaggStatus::NullPointer;
        }
        *out = ptr::null_mut();
        let text = match read_str(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match ScenarioConfig::from_toml(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(e.to_string());
                return SafeaggStatus::InvalidConfig;
            }
        };
        match Simulation::new(cfg) {
            Ok(sim) => {
                *out = Box::into_raw(Box::new(SafeaggScenario { sim: Some(sim) }));
                SafeaggStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                SafeaggStatus::InvalidConfig
            }
        }
    })
}

/// Release a scenario. NULL is ignored.
///
/// # Safety
/// `scenario` must come from [`safeagg_scenario_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn safeagg_scenario_free(scenario: *mut SafeaggScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

unsafe fn live<'a>(scenario: *mut SafeaggScenario) -> Result<&'a mut Simulation, SafeaggStatus> {
    let Some(s) = scenario.as_mut() else {
        set_error("null scenario");
        return Err(SafeaggStatus::NullPointer);
    };
    s.sim.as_mut().ok_or_else(|| {
        set_error("scenario already turned into a report");
        SafeaggStatus::Finished
    })
}

/// Number of completed rounds.
///
/// # Safety
/// `scenario` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn safeagg_scenario_round(scenario: *const SafeaggScenario) -> u32 {
    scenario.as_ref().and_then(|s| s.sim.as_ref()).map_or(0, Simulation::round)
}

/// Run one round. On success `row_json` (if not NULL) receives the round row
/// as a JSON object. Returns `Finished` once the configured rounds are done.
///
/// # Safety
/// `scenario` must be a live handle; `row_json` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn safeagg_scenario_step(scenario: *mut SafeaggScenario, row_json: *mut *mut c_char) -> SafeaggStatus {
    guard(|| {
        if !row_json.is_null() {
            *row_json = ptr::null_mut();
        }
        let sim = match live(scenario) {
            Ok(s) => s,
            Err(s) => return s,
        };
        if sim.round() >= sim.config().rounds {
            set_error("all rounds completed");
            return SafeaggStatus::Finished;
        }
        match sim.step() {
            Ok(row) => {
                if !row_json.is_null() {
                    *row_json = into_c_string(serde_json::to_string(row).unwrap_or_default());
                }
                SafeaggStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                SafeaggStatus::Simulation
            }
        }
    })
}

/// Run the remaining rounds and turn the scenario into a report. The
/// scenario handle stays valid but accepts no further steps.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn safeagg_scenario_finish(scenario: *mut SafeaggScenario, out: *mut *mut SafeaggReport) -> SafeaggStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return SafeaggStatus::NullPointer;
        }
        *out = ptr::null_mut();
        if let Err(s) = live(scenario) {
            return s;
        }
        let sim = (*scenario).sim.take().unwrap();
        match sim.run() {
            Ok(report) => {
                *out = Box::into_raw(Box::new(SafeaggReport { report }));
                SafeaggStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                SafeaggStatus::Simulation
            }
        }
    })
}

/// Release a report. NULL is ignored.
///
/// # Safety
/// `report` must come from [`safeagg_scenario_finish`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn safeagg_report_free(report: *mut SafeaggReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Report as JSON. Free with [`safeagg_string_free`]. NULL on bad input.
///
/// # Safety
/// `report` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn safeagg_report_json(report: *const SafeaggReport) -> *mut c_char {
    report.as_ref().map_or(ptr::null_mut(), |r| into_c_string(r.report.to_json()))
}

/// Per-round table as CSV. Free with [`safeagg_string_free`]. NULL on bad input.
///
/// # Safety
/// `report` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn safeagg_report_csv(report: *const SafeaggReport) -> *mut c_char {
    report.as_ref().map_or(ptr::null_mut(), |r| into_c_string(r.report.to_csv()))
}

/// Detection rates summed over the run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SafeaggRates {
    pub dr: f64,
    pub cr: f64,
    pub fpr: f64,
}

/// Fill `out` with the run-level detection rates.
///
/// # Safety
/// `report` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn safeagg_report_rates(report: *const SafeaggReport, out: *mut SafeaggRates) -> SafeaggStatus {
    guard(|| {
        let (Some(r), Some(o)) = (report.as_ref(), out.as_mut()) else {
            set_error("null argument");
            return SafeaggStatus::NullPointer;
        };
        let m = &r.report.summary.metrics;
        *o = SafeaggRates { dr: m.dr(), cr: m.cr(), fpr: m.fpr() };
        SafeaggStatus::Ok
    })
}

/// Release a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn safeagg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Detection bound R_H for a subgroup of `n` users and parameter range `eps`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn safeagg_compute_rh(n: usize, eps: f64, out: *mut f64) -> SafeaggStatus {
    guard(|| {
        let Some(o) = out.as_mut() else {
            set_error("null output pointer");
            return SafeaggStatus::NullPointer;
        };
        match detection::compute_rh(n, eps) {
            Ok(v) => {
                *o = v;
                SafeaggStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                SafeaggStatus::InvalidArgument
            }
        }
    })
}

/// Adaptive threshold over the last `window` values of `history`.
/// Returns +inf while fewer than `window` values are available.
///
/// # Safety
/// `history` must point to `len` readable doubles (may be NULL when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn safeagg_adaptive_threshold(history: *const f64, len: usize, rho: f64, window: usize) -> f64 {
    let xs = if len == 0 || history.is_null() { &[][..] } else { std::slice::from_raw_parts(history, len) };
    detection::adaptive_threshold(xs, rho, window)
}
