//! C interface to the simulator.
//!
//! A `DvppSim` handle owns one scenario and, after `dvpp_sim_run`, its output.
//! Functions return a `DvppStatus`; on failure the message is available from
//! `dvpp_last_error` on the same thread. Handles are not thread-safe; use
//! one per thread.

#![allow(clippy::missing_safety_doc)]

use dvpp_core::dvpp;
use dvpp_core::engine::{self, EngineError, Scenario, SimOutput};
use dvpp_core::network::LoadEvent;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvppStatus {
    DvppOk = 0,
    DvppErrNull = 1,
    DvppErrConfig = 2,
    DvppErrSimulation = 3,
    DvppErrNotRun = 4,
    DvppErrNotFound = 5,
    DvppErrBufferTooSmall = 6,
    DvppErrIo = 7,
    DvppErrAuditFailed = 8,
    DvppErrPanic = 9,
}

/// Post-event metrics. `damping_ratio` is NaN when no oscillation is
/// visible.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DvppMetrics {
    pub nadir_hz: f64,
    pub nadir_time_s: f64,
    pub max_rocof_hz_per_s: f64,
    pub coherence_hz: f64,
    pub steady_state_dev_hz: f64,
    pub recovery_time_s: f64,
    pub damping_ratio: f64,
}

/// Opaque simulation handle.
pub struct DvppSim {
    scenario: Scenario,
    output: Option<SimOutput>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn fail(status: DvppStatus, msg: impl Into<String>) -> DvppStatus {
    set_error(msg);
    status
}

fn engine_status(e: &EngineError) -> DvppStatus {
    if e.is_config() {
        DvppStatus::DvppErrConfig
    } else {
        DvppStatus::DvppErrSimulation
    }
}

fn guard(f: impl FnOnce() -> DvppStatus) -> DvppStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(DvppStatus::DvppErrPanic, "internal panic"),
    }
}

fn guard_ptr(f: impl FnOnce() -> *mut DvppSim) -> *mut DvppSim {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("internal panic");
        ptr::null_mut()
    })
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, DvppStatus> {
    if p.is_null() {
        return Err(fail(DvppStatus::DvppErrNull, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(DvppStatus::DvppErrConfig, format!("{what} is not valid UTF-8")))
}

fn boxed(scenario: Scenario) -> *mut DvppSim {
    Box::into_raw(Box::new(DvppSim { scenario, output: None }))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn dvpp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dvpp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Built-in experiment 1, 2 or 3. NULL on failure.
#[no_mangle]
pub extern "C" fn dvpp_sim_from_experiment(n: u32) -> *mut DvppSim {
    guard_ptr(|| match engine::build_experiment(n) {
        Ok(s) => boxed(s),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    })
}

/// Scenario from a JSON document. NULL on failure.
///
/// `json` must be NULL or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dvpp_sim_from_json(json: *const c_char) -> *mut DvppSim {
    guard_ptr(|| {
        let text = match str_arg(json, "json") {
            Ok(t) => t,
            Err(_) => return ptr::null_mut(),
        };
        match Scenario::from_json(text).and_then(|s| s.validate().map(|_| s)) {
            Ok(s) => boxed(s),
            Err(e) => {
                set_error(e.to_string());
                ptr::null_mut()
            }
        }
    })
}

/// Releases a handle. NULL is ignored.
///
/// `sim` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dvpp_sim_free(sim: *mut DvppSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Sets step size and horizon, seconds. Discards any previous output.
///
/// `sim` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dvpp_sim_set_solver(sim: *mut DvppSim, dt: f64, t_end: f64) -> DvppStatus {
    guard(|| {
        let Some(s) = sim.as_mut() else { return fail(DvppStatus::DvppErrNull, "sim is null") };
        let mut sc = s.scenario.clone();
        sc.solver.dt = dt;
        sc.solver.t_end = t_end;
        if let Err(e) = sc.validate() {
            return fail(DvppStatus::DvppErrConfig, e.to_string());
        }
        s.scenario = sc;
        s.output = None;
        DvppStatus::DvppOk
    })
}

/// Replaces the event list with a single load step. Discards any previous
/// output.
///
/// `sim` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dvpp_sim_set_load_step(sim: *mut DvppSim, bus: usize, dp: f64, dq: f64, t: f64) -> DvppStatus {
    guard(|| {
        let Some(s) = sim.as_mut() else { return fail(DvppStatus::DvppErrNull, "sim is null") };
        let mut sc = s.scenario.clone();
        sc.events = vec![LoadEvent { bus, dp, dq, t }];
        let valid = sc.validate().and_then(|_| sc.network.load()).and_then(|net| {
            net.index(bus).map(|_| ()).map_err(|e| EngineError::Config(e.to_string()))
        });
        if let Err(e) = valid {
            return fail(DvppStatus::DvppErrConfig, e.to_string());
        }
        s.scenario = sc;
        s.output = None;
        DvppStatus::DvppOk
    })
}

/// Removes all events. Discards any previous output.
///
/// `sim` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dvpp_sim_clear_events(sim: *mut DvppSim) -> DvppStatus {
    guard(|| {
        let Some(s) = sim.as_mut() else { return fail(DvppStatus::DvppErrNull, "sim is null") };
        s.scenario.events.clear();
        s.output = None;
        DvppStatus::DvppOk
    })
}

/// Runs the scenario to its horizon.
///
/// `sim` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dvpp_sim_run(sim: *mut DvppSim) -> DvppStatus {
    guard(|| {
        let Some(s) = sim.as_mut() else { return fail(DvppStatus::DvppErrNull, "sim is null") };
        match engine::run(&s.scenario) {
            Ok(out) => {
                s.output = Some(out);
                DvppStatus::DvppOk
            }
            Err(e) => {
                s.output = None;
                fail(engine_status(&e), e.to_string())
            }
        }
    })
}

unsafe fn output<'a>(sim: *const DvppSim) -> Result<&'a SimOutput, DvppStatus> {
    let s = sim.as_ref().ok_or_else(|| fail(DvppStatus::DvppErrNull, "sim is null"))?;
    s.output.as_ref().ok_or_else(|| fail(DvppStatus::DvppErrNotRun, "scenario has not been run"))
}

/// Number of time samples, written to `*n`.
///
/// `sim` must be NULL or a live handle; `n` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn dvpp_sim_sample_count(sim: *const DvppSim, n: *mut usize) -> DvppStatus {
    guard(|| {
        let out = match output(sim) {
            Ok(o) => o,
            Err(s) => return s,
        };
        let Some(n) = n.as_mut() else { return fail(DvppStatus::DvppErrNull, "n is null") };
        *n = out.t.len();
        DvppStatus::DvppOk
    })
}

/// Copies one timeseries column (`"t"` or `"{id}.f_hz"`, `"{id}.dp_pu"`,
/// `"{id}.dq_pu"`, `"{id}.v_pu"`) into `buf`, which must hold `len` values.
///
/// `sim` must be NULL or a live handle; `column` a NUL-terminated string;
/// `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn dvpp_sim_copy_column(sim: *const DvppSim, column: *const c_char, buf: *mut f64, len: usize) -> DvppStatus {
    guard(|| {
        let out = match output(sim) {
            Ok(o) => o,
            Err(s) => return s,
        };
        let name = match str_arg(column, "column") {
            Ok(n) => n,
            Err(s) => return s,
        };
        let series: &[f64] = if name == "t" {
            &out.t
        } else {
            let found = name.rsplit_once('.').and_then(|(id, q)| {
                let tr = out.trace(id)?;
                match q {
                    "f_hz" => Some(tr.f_hz.as_slice()),
                    "dp_pu" => Some(tr.dp.as_slice()),
                    "dq_pu" => Some(tr.dq.as_slice()),
                    "v_pu" => Some(tr.v.as_slice()),
                    _ => None,
                }
            });
            match found {
                Some(s) => s,
                None => return fail(DvppStatus::DvppErrNotFound, format!("no column `{name}`")),
            }
        };
        if buf.is_null() {
            return fail(DvppStatus::DvppErrNull, "buf is null");
        }
        if len < series.len() {
            return fail(DvppStatus::DvppErrBufferTooSmall, format!("column has {} samples, buffer holds {len}", series.len()));
        }
        ptr::copy_nonoverlapping(series.as_ptr(), buf, series.len());
        DvppStatus::DvppOk
    })
}

/// Metrics for a disturbance at `t_event` seconds.
///
/// `sim` must be NULL or a live handle; `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn dvpp_sim_metrics(sim: *const DvppSim, t_event: f64, out: *mut DvppMetrics) -> DvppStatus {
    guard(|| {
        let o = match output(sim) {
            Ok(o) => o,
            Err(s) => return s,
        };
        let Some(dst) = out.as_mut() else { return fail(DvppStatus::DvppErrNull, "out is null") };
        match engine::compute_metrics(o, t_event) {
            Ok(m) => {
                *dst = DvppMetrics {
                    nadir_hz: m.nadir_hz,
                    nadir_time_s: m.nadir_time_s,
                    max_rocof_hz_per_s: m.max_rocof_hz_per_s,
                    coherence_hz: m.coherence_hz,
                    steady_state_dev_hz: m.steady_state_dev_hz,
                    recovery_time_s: m.recovery_time_s,
                    damping_ratio: m.damping_ratio.unwrap_or(f64::NAN),
                };
                DvppStatus::DvppOk
            }
            Err(e) => fail(DvppStatus::DvppErrConfig, e.to_string()),
        }
    })
}

/// Writes the timeseries CSV to `path`.
///
/// `sim` must be NULL or a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dvpp_sim_write_csv(sim: *const DvppSim, path: *const c_char) -> DvppStatus {
    guard(|| {
        let o = match output(sim) {
            Ok(o) => o,
            Err(s) => return s,
        };
        let p = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match dvpp_core::cli::write_atomic(std::path::Path::new(p), o.to_csv().as_bytes()) {
            Ok(()) => DvppStatus::DvppOk,
            Err(e) => fail(DvppStatus::DvppErrIo, e.to_string()),
        }
    })
}

/// Allocates a DVPP spec (built-in name or JSON document) and writes the
/// largest sum-to-one residual to `*max_residual`. Returns
/// `DVPP_ERR_AUDIT_FAILED` when the residual exceeds the audit tolerance.
///
/// `spec` must be a NUL-terminated string; `max_residual` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn dvpp_audit(spec: *const c_char, max_residual: *mut f64) -> DvppStatus {
    guard(|| {
        let text = match str_arg(spec, "spec") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let parsed = match dvpp::builtin_spec(text) {
            Some(s) => Ok(s),
            None => dvpp::DvppSpec::from_json(text),
        };
        let alloc = match parsed.and_then(|s| dvpp::allocate(&s)) {
            Ok(a) => a,
            Err(e) => return fail(DvppStatus::DvppErrConfig, e.to_string()),
        };
        if let Some(r) = max_residual.as_mut() {
            *r = alloc.audit.max_residual();
        }
        if alloc.audit.pass {
            DvppStatus::DvppOk
        } else {
            fail(DvppStatus::DvppErrAuditFailed, format!("sum-to-one residual {:.3e}", alloc.audit.max_residual()))
        }
    })
}
