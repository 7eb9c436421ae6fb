//! C ABI over `stc-core`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns a
//! [`StcStatus`]; on failure the message is kept per thread and read with
//! [`stc_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stc_core::config::{load_config, ChainConfig};
use stc_core::io::{export, Format};
use stc_core::model::{linearize, ChainState};
use stc_core::nominal::string_stability_check;
use stc_core::safety::{stc_control, Plant, PolicyKind};
use stc_core::sim::{simulate, ControllerKind, ScenarioSpec, SimRecord};
use stc_core::StcError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StcPolicy {
    Th = 0,
    Ttc = 1,
    Sdh = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StcController {
    Nominal = 0,
    Stc = 1,
    ObserverNaive = 2,
    ObserverRobust = 3,
}

/// Chain configuration handle.
pub struct StcConfig {
    inner: ChainConfig,
}

/// Simulation result handle.
pub struct StcRecord {
    inner: SimRecord,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &StcError) -> StcStatus {
    match err {
        StcError::InvalidParameter(_) | StcError::DimensionMismatch { .. } => {
            StcStatus::InvalidArgument
        }
        StcError::Config(_) | StcError::Parse(_) | StcError::Json(_) => StcStatus::Config,
        StcError::Numerical(_) | StcError::NonFinite { .. } => StcStatus::Numerical,
        StcError::Io(_) | StcError::Csv(_) => StcStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(StcError),
}

impl From<StcError> for Fail {
    fn from(e: StcError) -> Self {
        Fail::Core(e)
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StcStatus {
    let status = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return StcStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            StcStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            StcStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            StcStatus::Panic
        }
    };
    status
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a preset name or a JSON config path.
///
/// # Safety
/// `source` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stc_config_load(
    source: *const c_char,
    out: *mut *mut StcConfig,
) -> StcStatus {
    guard(|| {
        let src = as_str(source, "source")?;
        let (cfg, _) = load_config(src)?;
        write_out(
            out,
            Box::into_raw(Box::new(StcConfig { inner: cfg })),
            "out",
        )
    })
}

/// Parse a JSON config document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stc_config_from_json(
    json: *const c_char,
    out: *mut *mut StcConfig,
) -> StcStatus {
    guard(|| {
        let text = as_str(json, "json")?;
        let (cfg, _) = ChainConfig::from_json(text)?;
        write_out(
            out,
            Box::into_raw(Box::new(StcConfig { inner: cfg })),
            "out",
        )
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stc_config_free(cfg: *mut StcConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `cfg` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn stc_config_n_followers(cfg: *const StcConfig) -> usize {
    cfg.as_ref().map_or(0, |c| c.inner.n_followers)
}

/// Replace the spacing policy and its time headway.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn stc_config_set_policy(
    cfg: *mut StcConfig,
    policy: StcPolicy,
    tau: f64,
) -> StcStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or(Fail::Null("cfg"))?;
        let mut filter = c.inner.filter.clone();
        filter.policy.kind = match policy {
            StcPolicy::Th => PolicyKind::Th,
            StcPolicy::Ttc => PolicyKind::Ttc,
            StcPolicy::Sdh => PolicyKind::Sdh,
        };
        filter.policy.tau = tau;
        filter.validate(c.inner.n_followers)?;
        c.inner.filter = filter;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn stc_config_set_saturation(
    cfg: *mut StcConfig,
    enabled: bool,
) -> StcStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or(Fail::Null("cfg"))?;
        c.inner.sim.saturate = enabled;
        Ok(())
    })
}

/// Simulate scenario 1 (`scenario = 1`, head braking at `accel` for
/// `duration`) or scenario 2 (`scenario = 2`, tail follower forced).
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stc_simulate(
    cfg: *const StcConfig,
    scenario: u32,
    accel: f64,
    duration: f64,
    controller: StcController,
    out: *mut *mut StcRecord,
) -> StcStatus {
    guard(|| {
        let c = as_ref(cfg, "cfg")?;
        let spec = match scenario {
            1 => ScenarioSpec::scenario1(accel, duration),
            2 => ScenarioSpec::scenario2(accel, duration),
            other => return Err(Fail::Arg(format!("scenario must be 1 or 2, got {other}"))),
        };
        let mut settings = c.inner.sim.clone();
        settings.controller = match controller {
            StcController::Nominal => ControllerKind::Nominal,
            StcController::Stc => ControllerKind::Stc,
            StcController::ObserverNaive => ControllerKind::StcObserverNaive,
            StcController::ObserverRobust => ControllerKind::StcObserverRobust,
        };
        let rec = simulate(&c.inner, &spec, &settings)?;
        write_out(
            out,
            Box::into_raw(Box::new(StcRecord { inner: rec })),
            "out",
        )
    })
}

/// # Safety
/// `rec` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stc_record_free(rec: *mut StcRecord) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// Number of time samples.
///
/// # Safety
/// `rec` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn stc_record_len(rec: *const StcRecord) -> usize {
    rec.as_ref().map_or(0, |r| r.inner.len())
}

/// # Safety
/// `rec` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stc_record_min_spacing(
    rec: *const StcRecord,
    vehicle: usize,
    out: *mut f64,
) -> StcStatus {
    guard(|| {
        let r = &as_ref(rec, "rec")?.inner;
        if vehicle > r.n_followers {
            return Err(Fail::Arg(format!(
                "vehicle {vehicle} out of range 0..={}",
                r.n_followers
            )));
        }
        write_out(out, r.min_spacing(vehicle), "out")
    })
}

/// Copy the spacing trace of `vehicle` into `buf`, which holds `cap`
/// values. `written` receives the trace length; when it exceeds `cap` only
/// the first `cap` values are copied.
///
/// # Safety
/// `rec` must be a live handle, `buf` must hold `cap` doubles and
/// `written` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stc_record_spacing(
    rec: *const StcRecord,
    vehicle: usize,
    buf: *mut f64,
    cap: usize,
    written: *mut usize,
) -> StcStatus {
    guard(|| {
        let r = &as_ref(rec, "rec")?.inner;
        let trace = r.spacing.get(vehicle).ok_or_else(|| {
            Fail::Arg(format!(
                "vehicle {vehicle} out of range 0..={}",
                r.n_followers
            ))
        })?;
        if buf.is_null() && cap > 0 {
            return Err(Fail::Null("buf"));
        }
        let n = trace.len().min(cap);
        if n > 0 {
            ptr::copy_nonoverlapping(trace.as_ptr(), buf, n);
        }
        write_out(written, trace.len(), "written")
    })
}

/// Number of vehicles that collided.
///
/// # Safety
/// `rec` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn stc_record_collisions(rec: *const StcRecord) -> usize {
    rec.as_ref().map_or(0, |r| r.inner.collided().len())
}

/// Write the record as CSV.
///
/// # Safety
/// `rec` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stc_record_write_csv(
    rec: *const StcRecord,
    path: *const c_char,
) -> StcStatus {
    guard(|| {
        let r = as_ref(rec, "rec")?;
        let p = as_str(path, "path")?;
        export(&r.inner, Path::new(p), Format::Csv)?;
        Ok(())
    })
}

/// One safety-filter evaluation on the nonlinear plant. `state` holds
/// `[s_0, v_0, ..., s_N, v_N]`.
///
/// # Safety
/// `cfg` must be a live handle, `state` must hold `len` doubles and `u_out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stc_filter(
    cfg: *const StcConfig,
    state: *const f64,
    len: usize,
    head_speed: f64,
    u_nominal: f64,
    u_out: *mut f64,
) -> StcStatus {
    guard(|| {
        let c = &as_ref(cfg, "cfg")?.inner;
        if state.is_null() {
            return Err(Fail::Null("state"));
        }
        let expected = 2 * c.n_followers + 2;
        if len != expected {
            return Err(StcError::DimensionMismatch { expected, got: len }.into());
        }
        let x = ChainState::from_vec(std::slice::from_raw_parts(state, len).to_vec())?;
        let plant = Plant::Nonlinear {
            hdv: vec![c.hdv; c.n_followers],
        };
        let sol = stc_control(&x, head_speed, u_nominal, &c.filter, &plant)?;
        write_out(u_out, sol.u, "u_out")
    })
}

/// Peak head-to-tail gain of the nominal controller over a logarithmic
/// grid ending at `omega_max`.
///
/// # Safety
/// `cfg` must be a live handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn stc_string_stability(
    cfg: *const StcConfig,
    omega_max: f64,
    samples: usize,
    max_gain: *mut f64,
    stable: *mut bool,
) -> StcStatus {
    guard(|| {
        let c = &as_ref(cfg, "cfg")?.inner;
        let coeffs = linearize(&c.hdv, c.equilibrium.s_star_hdv);
        let rep = string_stability_check(&coeffs, &c.gains, c.n_followers, omega_max, samples)?;
        write_out(max_gain, rep.max_gain, "max_gain")?;
        write_out(stable, rep.string_stable, "stable")
    })
}
