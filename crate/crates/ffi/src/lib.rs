//! C ABI for the simulator.
//!
//! A `CsSimulation` is an opaque handle built from scenario text. Every
//! fallible call returns a `CsStatus`; on failure the message is kept per
//! thread and read back with [`cs_last_error_message`]. Strings handed out by
//! this library must be released with [`cs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use conscientia::scenario::{parse_scenario, validate_scenario};
use conscientia::{Simulation, VirtualTime};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidScenario = 4,
    MetricsError = 5,
    Panic = 6,
}

/// Opaque simulation handle.
pub struct CsSimulation {
    sim: Simulation,
}

/// Run summary. Latencies are in virtual milliseconds.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CsMetrics {
    pub queries_submitted: u64,
    pub queries_serviced: u64,
    pub duplicate_replies: u64,
    pub rescheduled: u64,
    pub elections: u64,
    pub rv_splits: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub latency_mean_ms: f64,
    pub latency_p50_ms: u64,
    pub latency_p95_ms: u64,
    pub latency_max_ms: u64,
    pub pending_depth_max: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn fail(status: CsStatus, msg: impl Into<String>) -> CsStatus {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> CsStatus) -> CsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(CsStatus::Panic, "internal panic"),
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses and validates `scenario_toml`, then builds a simulation seeded
/// with the scenario's own seed.
///
/// # Safety
/// `scenario_toml` must be a nul-terminated string and `out` a writable
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_simulation_new(
    scenario_toml: *const c_char,
    out: *mut *mut CsSimulation,
) -> CsStatus {
    new_impl(scenario_toml, None, out)
}

/// Like [`cs_simulation_new`] with an explicit seed.
///
/// # Safety
/// Same as [`cs_simulation_new`].
#[no_mangle]
pub unsafe extern "C" fn cs_simulation_new_seeded(
    scenario_toml: *const c_char,
    seed: u64,
    out: *mut *mut CsSimulation,
) -> CsStatus {
    new_impl(scenario_toml, Some(seed), out)
}

unsafe fn new_impl(
    text: *const c_char,
    seed: Option<u64>,
    out: *mut *mut CsSimulation,
) -> CsStatus {
    if text.is_null() || out.is_null() {
        return fail(CsStatus::NullArgument, "null argument");
    }
    *out = ptr::null_mut();
    let text = match CStr::from_ptr(text).to_str() {
        Ok(t) => t.to_owned(),
        Err(e) => return fail(CsStatus::InvalidUtf8, e.to_string()),
    };
    guarded(|| {
        let s = match parse_scenario(&text) {
            Ok(s) => s,
            Err(e) => return fail(CsStatus::ParseError, e.to_string()),
        };
        if let Err(v) = validate_scenario(&s) {
            return fail(CsStatus::InvalidScenario, v.join("; "));
        }
        let sim = match Simulation::with_seed(&s, seed.unwrap_or(s.seed)) {
            Ok(sim) => sim,
            Err(e) => return fail(CsStatus::InvalidScenario, e.to_string()),
        };
        *out = Box::into_raw(Box::new(CsSimulation { sim }));
        CsStatus::Ok
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `sim` must come from `cs_simulation_new*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cs_simulation_free(sim: *mut CsSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Runs to the scenario's end. `events` (optional) receives the number of
/// events processed.
///
/// # Safety
/// `sim` must be a live handle; `events` null or writable.
#[no_mangle]
pub unsafe extern "C" fn cs_simulation_run(sim: *mut CsSimulation, events: *mut u64) -> CsStatus {
    let Some(h) = sim.as_mut() else {
        return fail(CsStatus::NullArgument, "null simulation");
    };
    let end = h.sim.scenario().duration_ms;
    run_impl(h, end, events)
}

/// Runs until virtual time `t_ms`.
///
/// # Safety
/// Same as [`cs_simulation_run`].
#[no_mangle]
pub unsafe extern "C" fn cs_simulation_run_until(
    sim: *mut CsSimulation,
    t_ms: u64,
    events: *mut u64,
) -> CsStatus {
    let Some(h) = sim.as_mut() else {
        return fail(CsStatus::NullArgument, "null simulation");
    };
    run_impl(h, t_ms, events)
}

unsafe fn run_impl(h: &mut CsSimulation, t_ms: u64, events: *mut u64) -> CsStatus {
    let mut n = 0;
    let status = guarded(|| {
        n = h.sim.run_until(VirtualTime(t_ms)) as u64;
        CsStatus::Ok
    });
    if let Some(e) = events.as_mut() {
        *e = n;
    }
    status
}

/// Current virtual time in milliseconds, or 0 for a null handle.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_simulation_now(sim: *const CsSimulation) -> u64 {
    sim.as_ref().map_or(0, |h| h.sim.now().as_millis())
}

/// Summarizes the trace so far into `out`.
///
/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cs_simulation_metrics(
    sim: *const CsSimulation,
    out: *mut CsMetrics,
) -> CsStatus {
    let (Some(h), Some(out)) = (sim.as_ref(), out.as_mut()) else {
        return fail(CsStatus::NullArgument, "null argument");
    };
    guarded(|| match h.sim.metrics() {
        Ok(r) => {
            *out = CsMetrics {
                queries_submitted: r.queries_submitted,
                queries_serviced: r.queries_serviced,
                duplicate_replies: r.duplicate_replies,
                rescheduled: r.rescheduled,
                elections: r.elections,
                rv_splits: r.rv_splits,
                messages_sent: r.messages_sent,
                messages_dropped: r.messages_dropped,
                latency_mean_ms: r.latency_ms.mean(),
                latency_p50_ms: r.latency_ms.p50,
                latency_p95_ms: r.latency_ms.p95,
                latency_max_ms: r.latency_ms.max,
                pending_depth_max: r.pending_depth_max,
            };
            CsStatus::Ok
        }
        Err(e) => fail(CsStatus::MetricsError, e.to_string()),
    })
}

/// Number of trace records so far, or 0 for a null handle.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_simulation_trace_len(sim: *const CsSimulation) -> usize {
    sim.as_ref().map_or(0, |h| h.sim.trace().len())
}

/// The trace as JSON lines. Release with [`cs_string_free`].
///
/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cs_simulation_trace_text(
    sim: *const CsSimulation,
    out: *mut *mut c_char,
) -> CsStatus {
    let (Some(h), false) = (sim.as_ref(), out.is_null()) else {
        return fail(CsStatus::NullArgument, "null argument");
    };
    *out = ptr::null_mut();
    guarded(|| match CString::new(h.sim.trace().to_text()) {
        Ok(s) => {
            *out = s.into_raw();
            CsStatus::Ok
        }
        Err(e) => fail(CsStatus::Panic, e.to_string()),
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
