//! Reference integrator for the discontinuous dynamics in Filippov's sense.
//!
//! Away from the switching surface the active field is integrated with
//! fixed-step RK4. Surface arrivals are localized by bisection on the step
//! length, then classified: at a crossing point the other field takes over,
//! at a sliding point the trajectory follows the sliding field with every
//! RK4 stage projected back onto `g = 0` until one of the Lie derivatives
//! changes sign.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::ControlData;
use crate::error::{ensure_finite_vec, PwsError, Result};
use crate::system::{lie_derivatives, Mode, PiecewiseSmoothSystem};
use crate::trajectory::{Event, EventKind, ModeLabel, Trajectory};

pub const DEFAULT_GUARD_TOL: f64 = 1e-10;
pub const DEFAULT_EVENT_CAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilippovOptions {
    /// Largest RK4 step; input intervals are split evenly into steps no longer than this.
    pub step: f64,
    pub guard_tol: f64,
    pub bisection_cap: usize,
    pub event_cap: usize,
}

impl Default for FilippovOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            guard_tol: DEFAULT_GUARD_TOL,
            bisection_cap: 80,
            event_cap: DEFAULT_EVENT_CAP,
        }
    }
}

impl FilippovOptions {
    pub fn with_step(step: f64) -> Self {
        Self { step, ..Self::default() }
    }
}

/// Region or surface classification of a state.
pub fn classify(
    sys: &dyn PiecewiseSmoothSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    guard_tol: f64,
) -> Result<ModeLabel> {
    let g = sys.guard(x);
    if g < -guard_tol {
        return Ok(ModeLabel::D1);
    }
    if g > guard_tol {
        return Ok(ModeLabel::D2);
    }
    let (lf1, lf2) = lie_derivatives(sys, x, u);
    surface_label(lf1, lf2)
}

/// Crossing where the Lie derivatives share a sign, a violation where neither
/// field points toward the other region, sliding otherwise (this includes the
/// boundary of the sliding region, where one Lie derivative vanishes).
fn surface_label(lf1: f64, lf2: f64) -> Result<ModeLabel> {
    if lf1 <= 0.0 && lf2 >= 0.0 {
        Err(PwsError::TransversalityViolation { lf1, lf2 })
    } else if lf1 * lf2 > 0.0 {
        Ok(ModeLabel::CrossingSigma)
    } else {
        Ok(ModeLabel::SlidingOnSigma)
    }
}

/// The convex combination `(1 - a) f1 + a f2` tangent to the surface,
/// `a = grad g . f1 / grad g . (f1 - f2)`.
pub fn sliding_field(sys: &dyn PiecewiseSmoothSystem, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    let dg = sys.guard_grad(x);
    let f1 = sys.f1(x, u);
    let f2 = sys.f2(x, u);
    let denom = dg.dot(&f1) - dg.dot(&f2);
    if denom.abs() < 1e-12 {
        return Err(PwsError::DegenerateSliding(denom.abs()));
    }
    let alpha = dg.dot(&f1) / denom;
    let v = f1 * (1.0 - alpha) + f2 * alpha;
    ensure_finite_vec(&v, "sliding field")?;
    Ok(v)
}

fn rk4<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = f(x)?;
    let k2 = f(&(x + &k1 * (0.5 * h)))?;
    let k3 = f(&(x + &k2 * (0.5 * h)))?;
    let k4 = f(&(x + &k3 * h))?;
    let out = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    ensure_finite_vec(&out, "Filippov integration")?;
    Ok(out)
}

/// Newton projection onto `g = 0` along the guard gradient.
fn project_to_surface(sys: &dyn PiecewiseSmoothSystem, x: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let mut y = x.clone();
    for _ in 0..20 {
        let g = sys.guard(&y);
        if g.abs() <= 1e-3 * tol {
            break;
        }
        let dg = sys.guard_grad(&y);
        let nn = dg.norm_squared();
        if nn == 0.0 {
            return Err(PwsError::DegenerateGuard { guard: g });
        }
        y -= dg * (g / nn);
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Region(Mode),
    Sliding,
}

fn region_sign(mode: Mode) -> f64 {
    match mode {
        Mode::One => 1.0,
        Mode::Two => -1.0,
    }
}

struct Run<'a> {
    sys: &'a dyn PiecewiseSmoothSystem,
    opts: FilippovOptions,
    traj: Trajectory,
    event_count: usize,
}

impl<'a> Run<'a> {
    fn default_label(&self, g: f64, phase: Phase) -> ModeLabel {
        let tol = self.opts.guard_tol;
        if g < -tol {
            ModeLabel::D1
        } else if g > tol {
            ModeLabel::D2
        } else if phase == Phase::Sliding {
            ModeLabel::SlidingOnSigma
        } else {
            ModeLabel::CrossingSigma
        }
    }

    /// Appends a sample, or overwrites the last one if no time has elapsed.
    fn push(&mut self, t: f64, x: &DVector<f64>, u: &DVector<f64>, label: ModeLabel) -> usize {
        let g = self.sys.guard(x);
        let tr = &mut self.traj;
        if let Some(&last) = tr.times.last() {
            if t <= last {
                let i = tr.times.len() - 1;
                tr.states[i] = x.clone();
                tr.guard_values[i] = g;
                tr.modes[i] = label;
                return i;
            }
            tr.inputs.push(u.clone());
        }
        tr.times.push(t);
        tr.states.push(x.clone());
        tr.guard_values.push(g);
        tr.modes.push(label);
        tr.times.len() - 1
    }

    fn record_event(&mut self, time: f64, kind: EventKind, from: Option<Mode>, sample: usize) -> Result<()> {
        self.event_count += 1;
        if self.event_count > self.opts.event_cap {
            return Err(PwsError::ZenoSuspected { cap: self.opts.event_cap });
        }
        self.traj.events.push(Event { time, kind, from, sample });
        Ok(())
    }

    fn signed_guard(&self, mode: Mode, x: &DVector<f64>) -> f64 {
        region_sign(mode) * self.sys.guard(x)
    }

    fn approach_rate(&self, mode: Mode, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        region_sign(mode) * self.sys.guard_grad(x).dot(&self.sys.field(mode, x, u))
    }

    fn region_flow(&self, mode: Mode, x: &DVector<f64>, u: &DVector<f64>, s: f64) -> Result<DVector<f64>> {
        rk4(|y| Ok(self.sys.field(mode, y, u)), x, s)
    }

    fn sliding_flow(&self, x: &DVector<f64>, u: &DVector<f64>, s: f64) -> Result<DVector<f64>> {
        let tol = self.opts.guard_tol;
        let sys = self.sys;
        let y = rk4(
            |z| {
                let zp = project_to_surface(sys, z, tol)?;
                sliding_field(sys, &zp, u)
            },
            x,
            s,
        )?;
        project_to_surface(sys, &y, tol)
    }

    /// Bisection on the step length for a root of the signed guard in `[lo, hi]`,
    /// where the signed guard is above `tol` at `hi`.
    fn localize_root(
        &self,
        mode: Mode,
        x: &DVector<f64>,
        u: &DVector<f64>,
        mut lo: f64,
        mut hi: f64,
    ) -> Result<(f64, DVector<f64>)> {
        let tol = self.opts.guard_tol;
        let mut best = (hi, self.region_flow(mode, x, u, hi)?);
        let mut best_q = self.signed_guard(mode, &best.1).abs();
        for _ in 0..self.opts.bisection_cap {
            let mid = 0.5 * (lo + hi);
            let xm = self.region_flow(mode, x, u, mid)?;
            let q = self.signed_guard(mode, &xm);
            if q.abs() < best_q {
                best_q = q.abs();
                best = (mid, xm.clone());
            }
            if q.abs() <= tol {
                return Ok((mid, xm));
            }
            if q > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(best)
    }

    /// One step of length `s` in a region. Returns the end state, or the
    /// event point if the surface is reached (including tangential contact).
    fn region_step(
        &self,
        mode: Mode,
        x: &DVector<f64>,
        u: &DVector<f64>,
        s: f64,
    ) -> Result<(Option<f64>, DVector<f64>)> {
        let tol = self.opts.guard_tol;
        let xb = self.region_flow(mode, x, u, s)?;
        let qb = self.signed_guard(mode, &xb);
        if qb > tol {
            let (se, xe) = self.localize_root(mode, x, u, 0.0, s)?;
            return Ok((Some(se), xe));
        }
        if qb.abs() <= tol && self.approach_rate(mode, &xb, u) > 0.0 {
            return Ok((Some(s), xb));
        }
        if self.approach_rate(mode, x, u) > 0.0 && self.approach_rate(mode, &xb, u) < 0.0 {
            // The guard peaks inside the step: look for tangential contact.
            let (mut lo, mut hi) = (0.0, s);
            for _ in 0..self.opts.bisection_cap {
                let mid = 0.5 * (lo + hi);
                let xm = self.region_flow(mode, x, u, mid)?;
                if self.approach_rate(mode, &xm, u) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let peak = 0.5 * (lo + hi);
            let xp = self.region_flow(mode, x, u, peak)?;
            let qp = self.signed_guard(mode, &xp);
            if qp > tol {
                let (se, xe) = self.localize_root(mode, x, u, 0.0, peak)?;
                return Ok((Some(se), xe));
            }
            if qp.abs() <= tol {
                return Ok((Some(peak), xp));
            }
        }
        Ok((None, xb))
    }

    /// Classifies a surface point and records the event. Returns the next phase.
    fn enter_surface(&mut self, t: f64, x: &DVector<f64>, u: &DVector<f64>, from: Mode) -> Result<(Phase, DVector<f64>)> {
        let (lf1, lf2) = lie_derivatives(self.sys, x, u);
        match surface_label(lf1, lf2)? {
            ModeLabel::CrossingSigma => {
                let i = self.push(t, x, u, ModeLabel::CrossingSigma);
                self.record_event(t, EventKind::Crossing, Some(from), i)?;
                let next = if lf1 > 0.0 { Mode::Two } else { Mode::One };
                Ok((Phase::Region(next), x.clone()))
            }
            _ => {
                let xs = project_to_surface(self.sys, x, self.opts.guard_tol)?;
                let i = self.push(t, &xs, u, ModeLabel::SlidingOnSigma);
                self.record_event(t, EventKind::Arrival, Some(from), i)?;
                Ok((Phase::Sliding, xs))
            }
        }
    }

    fn sliding_exits(&self, x: &DVector<f64>, u: &DVector<f64>) -> bool {
        let (lf1, lf2) = lie_derivatives(self.sys, x, u);
        lf1 <= 0.0 || lf2 >= 0.0
    }
}

/// Integrates the Filippov solution over `[0, horizon]` with the inputs of
/// `data` held constant on equal intervals.
pub fn integrate_filippov(
    sys: &dyn PiecewiseSmoothSystem,
    data: &ControlData,
    horizon: f64,
    opts: &FilippovOptions,
) -> Result<Trajectory> {
    data.validate(sys.state_dim(), sys.input_dim())?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(PwsError::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    if opts.step.is_nan() || opts.step <= 0.0 || opts.guard_tol.is_nan() || opts.guard_tol <= 0.0 {
        return Err(PwsError::InvalidArgument("step and guard tolerance must be positive".into()));
    }
    let mut run = Run {
        sys,
        opts: *opts,
        traj: Trajectory {
            times: vec![],
            states: vec![],
            inputs: vec![],
            guard_values: vec![],
            modes: vec![],
            events: vec![],
            input_dim: sys.input_dim(),
        },
        event_count: 0,
    };

    let mut x = data.x0.clone();
    let u0 = &data.inputs[0];
    let g0 = sys.guard(&x);
    let mut phase = if g0 < -opts.guard_tol {
        run.push(0.0, &x, u0, ModeLabel::D1);
        Phase::Region(Mode::One)
    } else if g0 > opts.guard_tol {
        run.push(0.0, &x, u0, ModeLabel::D2);
        Phase::Region(Mode::Two)
    } else {
        let (lf1, lf2) = lie_derivatives(sys, &x, u0);
        match surface_label(lf1, lf2)? {
            ModeLabel::CrossingSigma => {
                run.push(0.0, &x, u0, ModeLabel::CrossingSigma);
                Phase::Region(if lf1 > 0.0 { Mode::Two } else { Mode::One })
            }
            _ => {
                x = project_to_surface(sys, &x, opts.guard_tol)?;
                run.push(0.0, &x, u0, ModeLabel::SlidingOnSigma);
                Phase::Sliding
            }
        }
    };

    let k = data.intervals();
    let dt = horizon / k as f64;
    let mut t = 0.0;
    for (i, u) in data.inputs.iter().enumerate() {
        let t_start = i as f64 * dt;
        let t_end = if i + 1 == k { horizon } else { (i + 1) as f64 * dt };
        let span = t_end - t_start;
        let nsub = ((span / opts.step) - 1e-9).ceil().max(1.0) as usize;
        for j in 1..=nsub {
            let target = if j == nsub {
                t_end
            } else {
                t_start + span * j as f64 / nsub as f64
            };
            while t < target {
                let s = target - t;
                match phase {
                    Phase::Region(mode) => {
                        let (event, xn) = run.region_step(mode, &x, u, s)?;
                        match event {
                            None => {
                                x = xn;
                                t = target;
                                let label = run.default_label(sys.guard(&x), phase);
                                run.push(t, &x, u, label);
                            }
                            Some(se) => {
                                t = if se >= s { target } else { t + se };
                                let (next, xs) = run.enter_surface(t, &xn, u, mode)?;
                                phase = next;
                                x = xs;
                            }
                        }
                    }
                    Phase::Sliding => {
                        let xb = run.sliding_flow(&x, u, s)?;
                        if !run.sliding_exits(&xb, u) {
                            x = xb;
                            t = target;
                            let label = run.default_label(sys.guard(&x), phase);
                            run.push(t, &x, u, label);
                            continue;
                        }
                        let (mut lo, mut hi) = (0.0, s);
                        let mut x_hi = xb;
                        for _ in 0..opts.bisection_cap {
                            let mid = 0.5 * (lo + hi);
                            if mid <= lo || mid >= hi {
                                break;
                            }
                            let xm = run.sliding_flow(&x, u, mid)?;
                            if run.sliding_exits(&xm, u) {
                                hi = mid;
                                x_hi = xm;
                            } else {
                                lo = mid;
                            }
                        }
                        t = if hi >= s { target } else { t + hi };
                        x = x_hi;
                        let idx = run.push(t, &x, u, ModeLabel::SlidingOnSigma);
                        run.record_event(t, EventKind::Exit, None, idx)?;
                        let (lf1, lf2) = lie_derivatives(sys, &x, u);
                        if lf1 <= 0.0 && lf2 >= 0.0 {
                            return Err(PwsError::TransversalityViolation { lf1, lf2 });
                        }
                        phase = Phase::Region(if lf1 <= 0.0 { Mode::One } else { Mode::Two });
                    }
                }
            }
        }
    }
    Ok(run.traj)
}

/// Outcome of checking the regularity conditions under which the cost is
/// differentiable along a Filippov trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentiabilityReport {
    /// Times at which the trajectory reached the switching surface.
    pub arrival_times: Vec<f64>,
    /// Starts off the surface and no arrival at the final time.
    pub assumption2_ok: bool,
    /// Every arrival is transversal over the audit window.
    pub assumption3_ok: bool,
    /// Finitely many (at most `event_cap`) arrivals.
    pub assumption4_ok: bool,
    /// Per arrival, the smallest approach rate of the arriving field over the window.
    pub transversality_margins: Vec<f64>,
    pub starts_on_surface: bool,
    pub arrival_at_horizon: bool,
    /// A sliding segment ended exactly at the horizon; recorded, not re-classified.
    pub sliding_exit_at_horizon: bool,
}

impl DifferentiabilityReport {
    pub fn all_ok(&self) -> bool {
        self.assumption2_ok && self.assumption3_ok && self.assumption4_ok
    }

    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = vec![];
        if !self.assumption2_ok {
            out.push("trajectory starts on the surface or arrives at the final time");
        }
        if !self.assumption3_ok {
            out.push("a surface arrival is not transversal (grazing)");
        }
        if !self.assumption4_ok {
            out.push("too many surface arrivals");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    pub guard_tol: f64,
    pub event_cap: usize,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            guard_tol: DEFAULT_GUARD_TOL,
            event_cap: DEFAULT_EVENT_CAP,
        }
    }
}

pub fn audit_differentiability(traj: &Trajectory, sys: &dyn PiecewiseSmoothSystem, window: f64) -> DifferentiabilityReport {
    audit_differentiability_with(traj, sys, window, &AuditOptions::default())
}

pub fn audit_differentiability_with(
    traj: &Trajectory,
    sys: &dyn PiecewiseSmoothSystem,
    window: f64,
    opts: &AuditOptions,
) -> DifferentiabilityReport {
    let horizon = traj.final_time();
    let time_tol = 1e-9 * horizon.abs().max(1.0);
    let arrival_times = traj.arrival_times();
    let starts_on_surface = sys.guard(&traj.states[0]).abs() <= opts.guard_tol;
    let arrival_at_horizon = arrival_times.iter().any(|t| (t - horizon).abs() <= time_tol);

    let mut margins = Vec::new();
    for ev in &traj.events {
        let Some(mode) = ev.from else { continue };
        if !matches!(ev.kind, EventKind::Arrival | EventKind::Crossing) {
            continue;
        }
        let mut worst = f64::INFINITY;
        for i in 0..traj.len() {
            if (traj.times[i] - ev.time).abs() < window || i == ev.sample {
                let x = &traj.states[i];
                let u = traj.input_at(i);
                let rate = region_sign(mode) * sys.guard_grad(x).dot(&sys.field(mode, x, u));
                worst = worst.min(rate);
            }
        }
        margins.push(worst);
    }

    let sliding_exit_at_horizon = traj
        .events
        .iter()
        .any(|e| e.kind == EventKind::Exit && (e.time - horizon).abs() <= time_tol);

    DifferentiabilityReport {
        assumption2_ok: !starts_on_surface && !arrival_at_horizon,
        assumption3_ok: margins.iter().all(|m| *m > 0.0),
        assumption4_ok: arrival_times.len() <= opts.event_cap,
        arrival_times,
        transversality_margins: margins,
        starts_on_surface,
        arrival_at_horizon,
        sliding_exit_at_horizon,
    }
}
