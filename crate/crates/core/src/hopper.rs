//! Actuated spring-mass hopper.
//!
//! State `(z, z_dot, L, L_dot)`: body height, its velocity, leg length and
//! leg velocity. The input is the leg acceleration. The leg touches the
//! ground while `z < L`; in contact the body feels the spring-damper force
//! `F = K0 (L - z) + D0 (L_dot - z_dot)`.

use std::sync::Arc;

use nalgebra::{dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{BoxBounds, ControlData};
use crate::cost::{CostFunctional, CostTime};
use crate::error::{PwsError, Result};
use crate::optimizer::{master_algorithm, MasterOptions, OptimizationReport, Problem, SolverOptions};
use crate::regularized::RegularizedField;
use crate::smooth::{integrate_smooth, Discretization, Scheme};
use crate::system::PiecewiseSmoothSystem;
use crate::trajectory::{Phase, PhaseRegion, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HopperParams {
    pub mass: f64,
    /// Leg stiffness, N/m.
    pub k0: f64,
    /// Leg damping, N s/m.
    pub d0: f64,
    pub gravity: f64,
}

impl Default for HopperParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            k0: 98.1,
            d0: 2.0,
            gravity: 9.81,
        }
    }
}

impl HopperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.k0 > 0.0 && self.d0 >= 0.0 && self.gravity.is_finite()) {
            return Err(PwsError::InvalidArgument(format!("invalid hopper parameters {self:?}")));
        }
        Ok(())
    }
}

/// `f1` is the ground phase (`z < L`), `f2` the flight phase.
#[derive(Debug, Clone)]
pub struct HopperSystem {
    params: HopperParams,
}

impl HopperSystem {
    pub fn new(params: HopperParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &HopperParams {
        &self.params
    }

    /// Leg force on the body while in contact.
    pub fn leg_force(&self, x: &DVector<f64>) -> f64 {
        let p = &self.params;
        p.k0 * (x[2] - x[0]) + p.d0 * (x[3] - x[1])
    }
}

impl PiecewiseSmoothSystem for HopperSystem {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn f1(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        dvector![x[1], self.leg_force(x) / p.mass - p.gravity, x[3], u[0]]
    }

    fn f2(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        dvector![x[1], -self.params.gravity, x[3], u[0]]
    }

    fn guard(&self, x: &DVector<f64>) -> f64 {
        x[0] - x[2]
    }

    fn guard_grad(&self, _x: &DVector<f64>) -> DVector<f64> {
        dvector![1.0, 0.0, -1.0, 0.0]
    }

    fn jac_f1_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        let (k, d) = (p.k0 / p.mass, p.d0 / p.mass);
        DMatrix::from_row_slice(4, 4, &[0.0, 1.0, 0.0, 0.0, -k, -d, k, d, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    }

    fn jac_f2_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 4, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    }

    fn jac_f1_u(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 0.0, 1.0])
    }

    fn jac_f2_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.jac_f1_u(x, u)
    }

    fn name(&self) -> &str {
        "hopper"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HopperTask {
    pub z_apex: f64,
    pub t_apex: f64,
    /// Height to settle back to at the final time.
    pub z_settle: f64,
    pub t_final: f64,
    pub x0: [f64; 4],
    pub u_lo: f64,
    pub u_hi: f64,
    /// Weight on the integral of `u^2`.
    pub effort_weight: f64,
    pub gridpoints: usize,
    pub epsilon: f64,
    /// Band widths for the master algorithm; `None` solves at `epsilon` only.
    pub schedule: Option<Vec<f64>>,
}

/// Effort weight that makes the apex target reachable with the default leg.
pub const LOW_EFFORT_WEIGHT: f64 = 1e-2;

impl Default for HopperTask {
    fn default() -> Self {
        Self {
            z_apex: 1.0,
            t_apex: 1.0,
            z_settle: 0.65,
            t_final: 1.8,
            x0: [0.65, 0.0, 0.75, 0.0],
            u_lo: -10.0,
            u_hi: 10.0,
            effort_weight: 1.0,
            gridpoints: 181,
            epsilon: 0.01,
            schedule: None,
        }
    }
}

impl HopperTask {
    pub fn low_effort() -> Self {
        Self {
            effort_weight: LOW_EFFORT_WEIGHT,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_apex && self.t_apex < self.t_final) {
            return Err(PwsError::InvalidArgument("need 0 < t_apex < t_final".into()));
        }
        if self.u_lo.partial_cmp(&self.u_hi).is_none_or(|o| o.is_gt()) {
            return Err(PwsError::InvalidArgument("input box has lo > hi".into()));
        }
        if !(self.effort_weight >= 0.0 && self.epsilon > 0.0) {
            return Err(PwsError::InvalidArgument("effort weight and epsilon must be nonnegative/positive".into()));
        }
        let disc = self.discretization()?;
        if disc.index_of(self.t_apex).is_none() {
            return Err(PwsError::TaskInfeasibleGrid { time: self.t_apex });
        }
        Ok(())
    }

    pub fn discretization(&self) -> Result<Discretization> {
        Discretization::new(self.t_final, self.gridpoints, Scheme::Euler)
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.x0)
    }

    /// Zero input on every interval, boxes attached and `x0` frozen.
    pub fn initial_data(&self) -> Result<ControlData> {
        Ok(
            ControlData::constant_input(self.x0(), dvector![0.0], self.gridpoints - 1)
                .with_input_bounds(BoxBounds::uniform(1, self.u_lo, self.u_hi)?)
                .frozen_x0(),
        )
    }
}

/// Apex and settle penalties on `(z, z_dot)` plus the weighted effort integral.
pub fn hopper_cost(task: &HopperTask) -> Result<CostFunctional> {
    task.validate()?;
    let (za, zs, w) = (task.z_apex, task.z_settle, task.effort_weight);
    let penalty = |target: f64| {
        (
            move |x: &DVector<f64>| (x[0] - target).powi(2) + x[1] * x[1],
            move |x: &DVector<f64>| {
                let mut g = DVector::zeros(x.len());
                g[0] = 2.0 * (x[0] - target);
                g[1] = 2.0 * x[1];
                g
            },
        )
    };
    let (apex_v, apex_g) = penalty(za);
    let (settle_v, settle_g) = penalty(zs);
    let mut cost = CostFunctional::default()
        .with_term(CostTime::At(task.t_apex), apex_v, apex_g)
        .with_term(CostTime::Terminal, settle_v, settle_g);
    if w > 0.0 {
        cost = cost.with_running(
            move |_, u| w * u[0] * u[0],
            |x, _| DVector::zeros(x.len()),
            move |_, u| u * (2.0 * w),
        );
    }
    Ok(cost)
}

#[derive(Debug, Clone)]
pub struct HopperOutcome {
    pub report: OptimizationReport,
    /// Relaxed trajectory of the optimized inputs at the final band width.
    pub smoothed: Trajectory,
    /// Filippov replay of the optimized inputs.
    pub replay: Trajectory,
    pub phases: Vec<Phase>,
    pub flight_phases_before_apex: usize,
}

/// Number of flight phases of `traj` that begin before `t`.
pub fn flight_phases_before(traj: &Trajectory, t: f64) -> usize {
    traj.phases()
        .iter()
        .filter(|p| p.region == PhaseRegion::Two && p.start < t)
        .count()
}

/// Optimizes the hopping task from zero input without prescribing contacts.
pub fn optimize_hopping(task: &HopperTask, params: &HopperParams, solver: &SolverOptions) -> Result<HopperOutcome> {
    let sys: Arc<dyn PiecewiseSmoothSystem> = Arc::new(HopperSystem::new(*params)?);
    let cost = hopper_cost(task)?;
    let disc = task.discretization()?;
    let init = task.initial_data()?;
    let schedule = task.schedule.clone().unwrap_or_else(|| vec![task.epsilon]);
    let mut opts = MasterOptions::new(schedule);
    opts.solver = *solver;
    if task.schedule.is_none() {
        opts.sigma = crate::optimizer::SigmaRule::Constant { tol: solver.theta_tol };
    }
    opts.audit_window = disc.step_size();
    let problem = Problem::new(sys.clone(), &cost);
    let mut report = master_algorithm(&problem, &init, &disc, &opts)?;
    let last_eps = *opts.schedule.last().expect("non-empty schedule");
    let field = RegularizedField::with_transition(sys, opts.transition.clone(), last_eps)?;
    let smoothed = integrate_smooth(&field, &report.final_data, &disc)?;
    let replay = report.replay.take().expect("audit enabled");
    let phases = replay.phases();
    let flight_phases_before_apex = flight_phases_before(&replay, task.t_apex);
    report.replay = Some(replay.clone());
    Ok(HopperOutcome {
        report,
        smoothed,
        replay,
        phases,
        flight_phases_before_apex,
    })
}
