//! C ABI for `pwsopt`.
//!
//! Systems and trajectories are opaque handles created by `pws_*_new` /
//! `pws_simulate_*` and released with the matching `*_free`. Every fallible
//! call returns a [`PwsStatus`]; on failure `pws_last_error_message` holds a
//! description for the calling thread. Arrays are caller-owned, row-major and
//! passed with an explicit length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use nalgebra::DVector;
use pwsopt::examples;
use pwsopt::sensitivity::adjoint_gradient;
use pwsopt::smooth::{Discretization, Scheme};
use pwsopt::{integrate_filippov, integrate_smooth, ControlData, CostFunctional, FilippovOptions, PiecewiseSmoothSystem, PwsError, RegularizedField, Trajectory};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PwsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    UnknownSystem = 4,
    TransversalityViolation = 5,
    ZenoSuspected = 6,
    NumericalError = 7,
    DegenerateGuard = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Other = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PwsScheme {
    Euler = 0,
    Rk4 = 1,
}

impl From<PwsScheme> for Scheme {
    fn from(s: PwsScheme) -> Self {
        match s {
            PwsScheme::Euler => Scheme::Euler,
            PwsScheme::Rk4 => Scheme::Rk4,
        }
    }
}

/// A built-in piecewise-smooth system.
pub struct PwsSystem {
    inner: Arc<dyn PiecewiseSmoothSystem>,
}

/// A sampled trajectory.
pub struct PwsTrajectory {
    inner: Trajectory,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PwsStatus, String);

impl From<PwsError> for Failure {
    fn from(e: PwsError) -> Self {
        let status = match e {
            PwsError::InvalidArgument(_) | PwsError::TaskInfeasibleGrid { .. } => PwsStatus::InvalidArgument,
            PwsError::Dimension(_) => PwsStatus::DimensionMismatch,
            PwsError::TransversalityViolation { .. } | PwsError::DegenerateSliding(_) => PwsStatus::TransversalityViolation,
            PwsError::ZenoSuspected { .. } => PwsStatus::ZenoSuspected,
            PwsError::Numerical(_) => PwsStatus::NumericalError,
            PwsError::DegenerateGuard { .. } => PwsStatus::DegenerateGuard,
            _ => PwsStatus::Other,
        };
        Failure(status, format!("{}: {e}", e.kind()))
    }
}

fn fail(status: PwsStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> PwsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PwsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PwsStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(PwsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(PwsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn system<'a>(sys: *const PwsSystem) -> Result<&'a PwsSystem, Failure> {
    sys.as_ref().ok_or_else(|| fail(PwsStatus::NullPointer, "system handle is null"))
}

unsafe fn control_data(
    sys: &PwsSystem,
    x0: *const f64,
    inputs: *const f64,
    intervals: usize,
) -> Result<ControlData, Failure> {
    let (n, m) = (sys.inner.state_dim(), sys.inner.input_dim());
    if intervals == 0 {
        return Err(fail(PwsStatus::InvalidArgument, "need at least one input interval"));
    }
    let x0 = slice(x0, n, "x0")?;
    let u = slice(inputs, intervals * m, "inputs")?;
    let rows = u.chunks(m.max(1)).map(|r| DVector::from_row_slice(&r[..m])).collect::<Vec<_>>();
    let rows = if m == 0 { vec![DVector::zeros(0); intervals] } else { rows };
    Ok(ControlData::new(DVector::from_row_slice(x0), rows))
}

/// Text for the most recent failure on this thread, or null. The pointer is
/// valid until the next `pws_*` call on the same thread.
#[no_mangle]
pub extern "C" fn pws_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn pws_status_name(status: PwsStatus) -> *const c_char {
    let s: &'static CStr = match status {
        PwsStatus::Ok => c"Ok",
        PwsStatus::NullPointer => c"NullPointer",
        PwsStatus::InvalidArgument => c"InvalidArgument",
        PwsStatus::DimensionMismatch => c"DimensionMismatch",
        PwsStatus::UnknownSystem => c"UnknownSystem",
        PwsStatus::TransversalityViolation => c"TransversalityViolation",
        PwsStatus::ZenoSuspected => c"ZenoSuspected",
        PwsStatus::NumericalError => c"NumericalError",
        PwsStatus::DegenerateGuard => c"DegenerateGuard",
        PwsStatus::BufferTooSmall => c"BufferTooSmall",
        PwsStatus::Panic => c"Panic",
        PwsStatus::Other => c"Other",
    };
    s.as_ptr()
}

/// Looks up a built-in system (`sliding1d`, `crossing1d`, `grazing2d`, `hopper`, ...).
///
/// # Safety
/// `name` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pws_system_new(name: *const c_char, out: *mut *mut PwsSystem) -> PwsStatus {
    guarded(|| {
        if name.is_null() || out.is_null() {
            return Err(fail(PwsStatus::NullPointer, "name or out is null"));
        }
        *out = ptr::null_mut();
        let name = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| fail(PwsStatus::InvalidArgument, "name is not UTF-8"))?;
        let inner = examples::builtin(name).ok_or_else(|| fail(PwsStatus::UnknownSystem, format!("unknown system {name:?}")))?;
        *out = Box::into_raw(Box::new(PwsSystem { inner }));
        Ok(())
    })
}

/// # Safety
/// `sys` must come from `pws_system_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pws_system_free(sys: *mut PwsSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// State dimension, or 0 for a null handle.
///
/// # Safety
/// `sys` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pws_system_state_dim(sys: *const PwsSystem) -> usize {
    sys.as_ref().map_or(0, |s| s.inner.state_dim())
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `sys` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pws_system_input_dim(sys: *const PwsSystem) -> usize {
    sys.as_ref().map_or(0, |s| s.inner.input_dim())
}

/// Filippov solution over `[0, horizon]` with `intervals` equal input
/// intervals; `inputs` holds `intervals * input_dim` values. A nonpositive
/// `max_step` selects the default.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pws_simulate_filippov(
    sys: *const PwsSystem,
    x0: *const f64,
    inputs: *const f64,
    intervals: usize,
    horizon: f64,
    max_step: f64,
    out: *mut *mut PwsTrajectory,
) -> PwsStatus {
    guarded(|| {
        if out.is_null() {
            return Err(fail(PwsStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let sys = system(sys)?;
        let data = control_data(sys, x0, inputs, intervals)?;
        let mut opts = FilippovOptions::default();
        if max_step > 0.0 {
            opts.step = max_step;
        }
        let inner = integrate_filippov(sys.inner.as_ref(), &data, horizon, &opts)?;
        *out = Box::into_raw(Box::new(PwsTrajectory { inner }));
        Ok(())
    })
}

/// Relaxed trajectory at band width `epsilon` on the grid of `intervals + 1`
/// points over `[0, horizon]`.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pws_simulate_smooth(
    sys: *const PwsSystem,
    x0: *const f64,
    inputs: *const f64,
    intervals: usize,
    horizon: f64,
    epsilon: f64,
    scheme: PwsScheme,
    out: *mut *mut PwsTrajectory,
) -> PwsStatus {
    guarded(|| {
        if out.is_null() {
            return Err(fail(PwsStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let sys = system(sys)?;
        let data = control_data(sys, x0, inputs, intervals)?;
        let disc = Discretization::new(horizon, intervals + 1, scheme.into())?;
        let field = RegularizedField::new(sys.inner.clone(), epsilon)?;
        let inner = integrate_smooth(&field, &data, &disc)?;
        *out = Box::into_raw(Box::new(PwsTrajectory { inner }));
        Ok(())
    })
}

/// # Safety
/// `traj` must come from a `pws_simulate_*` call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pws_trajectory_free(traj: *mut PwsTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pws_trajectory_len(traj: *const PwsTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.inner.len())
}

/// Number of surface events (arrivals, exits, crossings).
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pws_trajectory_event_count(traj: *const PwsTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.inner.events.len())
}

/// Copies the sample times into `buf` (`len >= pws_trajectory_len`).
///
/// # Safety
/// `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pws_trajectory_times(traj: *const PwsTrajectory, buf: *mut f64, len: usize) -> PwsStatus {
    guarded(|| {
        let t = traj.as_ref().ok_or_else(|| fail(PwsStatus::NullPointer, "trajectory handle is null"))?;
        let need = t.inner.len();
        if len < need {
            return Err(fail(PwsStatus::BufferTooSmall, format!("need {need} entries")));
        }
        slice_mut(buf, need, "buf")?.copy_from_slice(&t.inner.times);
        Ok(())
    })
}

/// Copies the states row by row into `buf` (`len >= samples * state_dim`).
///
/// # Safety
/// `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pws_trajectory_states(traj: *const PwsTrajectory, buf: *mut f64, len: usize) -> PwsStatus {
    guarded(|| {
        let t = traj.as_ref().ok_or_else(|| fail(PwsStatus::NullPointer, "trajectory handle is null"))?;
        let n = t.inner.state_dim();
        let need = t.inner.len() * n;
        if len < need {
            return Err(fail(PwsStatus::BufferTooSmall, format!("need {need} entries")));
        }
        let out = slice_mut(buf, need, "buf")?;
        for (row, x) in out.chunks_mut(n.max(1)).zip(&t.inner.states) {
            row[..n].copy_from_slice(x.as_slice());
        }
        Ok(())
    })
}

/// Value and exact gradient of the relaxed cost `weights . x(T)` at band
/// width `epsilon`, on the grid of `intervals + 1` points. `grad_x0` receives
/// `state_dim` values and `grad_u` `intervals * input_dim` values.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pws_adjoint_gradient(
    sys: *const PwsSystem,
    x0: *const f64,
    inputs: *const f64,
    intervals: usize,
    horizon: f64,
    epsilon: f64,
    scheme: PwsScheme,
    weights: *const f64,
    value: *mut f64,
    grad_x0: *mut f64,
    grad_u: *mut f64,
) -> PwsStatus {
    guarded(|| {
        let sys = system(sys)?;
        let (n, m) = (sys.inner.state_dim(), sys.inner.input_dim());
        let data = control_data(sys, x0, inputs, intervals)?;
        let w = DVector::from_row_slice(slice(weights, n, "weights")?);
        if value.is_null() {
            return Err(fail(PwsStatus::NullPointer, "value is null"));
        }
        let gx = slice_mut(grad_x0, n, "grad_x0")?;
        let gu = slice_mut(grad_u, intervals * m, "grad_u")?;
        let w2 = w.clone();
        let cost = CostFunctional::terminal(move |x| w.dot(x), move |_| w2.clone());
        let disc = Discretization::new(horizon, intervals + 1, scheme.into())?;
        let field = RegularizedField::new(sys.inner.clone(), epsilon)?;
        let bundle = adjoint_gradient(&field, &data, &cost, &disc)?;
        *value = bundle.value;
        gx.copy_from_slice(bundle.gradient.x0.as_slice());
        for (row, g) in gu.chunks_mut(m.max(1)).zip(&bundle.gradient.inputs) {
            row[..m].copy_from_slice(g.as_slice());
        }
        Ok(())
    })
}
