//! Projected-gradient solution of the relaxed problem and the band-width
//! reduction loop around it.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::{BoxBounds, ControlData, ControlVector};
use crate::cost::CostFunctional;
use crate::error::{PwsError, Result};
use crate::filippov::{audit_differentiability, integrate_filippov, DifferentiabilityReport, FilippovOptions};
use crate::regularized::RegularizedField;
use crate::sensitivity::{adjoint_gradient, cost_value, gradient_norm};
use crate::smooth::Discretization;
use crate::system::PiecewiseSmoothSystem;
use crate::trajectory::Trajectory;
use crate::transition::{make_quintic_transition, TransitionFunction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub theta_tol: f64,
    pub max_iter: usize,
    pub armijo_sigma: f64,
    pub armijo_beta: f64,
    pub initial_step: f64,
    pub max_backtracks: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            theta_tol: 1e-6,
            max_iter: 500,
            armijo_sigma: 1e-4,
            armijo_beta: 0.5,
            initial_step: 1.0,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ThetaTol,
    MaxIter,
    LineSearchFail,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::ThetaTol => "theta_tol",
            Termination::MaxIter => "max_iter",
            Termination::LineSearchFail => "line_search_fail",
        }
    }
}

/// `theta(xi)`, the best first-order decrease over feasible shifts, and the
/// shift that attains it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityValue {
    pub theta: f64,
    pub direction: ControlVector,
}

fn vertex(g: f64, c: f64, lo: f64, hi: f64) -> (f64, f64) {
    let down = if lo.is_finite() { lo - c } else { -1.0 };
    let up = if hi.is_finite() { hi - c } else { 1.0 };
    let (a, b) = (g * down, g * up);
    if a <= b {
        (a, down)
    } else {
        (b, up)
    }
}

/// Optimality value for a known gradient. Coordinates without a box may
/// move by at most 1; a frozen `x0` does not move at all.
pub fn optimality_value_from_gradient(data: &ControlData, grad: &ControlVector) -> OptimalityValue {
    let mut theta = 0.0;
    let mut direction = ControlVector::zeros_like(data);
    if !data.freeze_x0 {
        for i in 0..data.x0.len() {
            let (lo, hi) = data
                .x0_bounds
                .as_ref()
                .map_or((f64::NEG_INFINITY, f64::INFINITY), |b| (b.lo[i], b.hi[i]));
            let (v, d) = vertex(grad.x0[i], data.x0[i], lo, hi);
            theta += v;
            direction.x0[i] = d;
        }
    }
    for (k, u) in data.inputs.iter().enumerate() {
        for j in 0..u.len() {
            let (lo, hi) = data
                .input_bounds
                .as_ref()
                .map_or((f64::NEG_INFINITY, f64::INFINITY), |b| (b.lo[j], b.hi[j]));
            let (v, d) = vertex(grad.inputs[k][j], u[j], lo, hi);
            theta += v;
            direction.inputs[k][j] = d;
        }
    }
    OptimalityValue { theta: theta.min(0.0), direction }
}

pub fn optimality_value(
    field: &RegularizedField,
    data: &ControlData,
    cost: &CostFunctional,
    disc: &Discretization,
) -> Result<OptimalityValue> {
    let bundle = adjoint_gradient(field, data, cost, disc)?;
    Ok(optimality_value_from_gradient(data, &bundle.gradient))
}

/// Steepest-descent direction in the `R^n x L2` metric: input gradients are
/// divided by the step size.
fn descent_direction(data: &ControlData, grad: &ControlVector, h: f64) -> ControlVector {
    ControlVector {
        x0: if data.freeze_x0 { grad.x0.map(|_| 0.0) } else { -&grad.x0 },
        inputs: grad.inputs.iter().map(|g| g * (-1.0 / h)).collect(),
    }
}

fn masked(data: &ControlData, grad: &ControlVector) -> ControlVector {
    let mut g = grad.clone();
    if data.freeze_x0 {
        g.x0.fill(0.0);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub status: StageStatus,
    pub iterations: usize,
    pub termination: Option<Termination>,
    pub final_cost: Option<f64>,
    pub theta: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub schema_version: u32,
    pub final_data: ControlData,
    pub cost_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub theta_history: Vec<f64>,
    /// Band width in force at each entry of the histories.
    pub epsilon_history: Vec<f64>,
    pub theta: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub stages: Vec<StageReport>,
    pub audit: Option<DifferentiabilityReport>,
    pub config: Option<serde_json::Value>,
    /// Filippov replay of the final inputs.
    #[serde(skip)]
    pub replay: Option<Trajectory>,
}

impl OptimizationReport {
    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().expect("at least one evaluation")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn text_summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "termination: {}", self.termination.as_str());
        let _ = writeln!(s, "iterations:  {}", self.iterations);
        let _ = writeln!(s, "final cost:  {:.6e}", self.final_cost());
        let _ = writeln!(s, "theta:       {:.3e}", self.theta);
        for st in &self.stages {
            let _ = write!(s, "  eps {:.3e}: {:?}", st.epsilon, st.status);
            if let Some(t) = st.termination {
                let _ = write!(s, ", {} after {} iterations", t.as_str(), st.iterations);
            }
            if let Some(c) = st.final_cost {
                let _ = write!(s, ", cost {c:.6e}");
            }
            if let Some(e) = &st.error {
                let _ = write!(s, ", error: {e}");
            }
            s.push('\n');
        }
        if let Some(a) = &self.audit {
            if a.all_ok() {
                let _ = writeln!(s, "audit: ok ({} surface arrivals)", a.arrival_times.len());
            } else {
                let _ = writeln!(s, "audit: FAILED ({})", a.failures().join("; "));
            }
        }
        s
    }
}

/// Projected gradient with Armijo backtracking at a fixed band width.
pub fn solve_fixed_epsilon(
    field: &RegularizedField,
    init: &ControlData,
    cost: &CostFunctional,
    disc: &Discretization,
    opts: &SolverOptions,
) -> Result<OptimizationReport> {
    if !init.is_feasible() {
        return Err(PwsError::InvalidArgument("initial control data violates its boxes".into()));
    }
    let h = disc.step_size();
    let eps = field.epsilon();
    let mut data = init.clone();
    let mut bundle = adjoint_gradient(field, &data, cost, disc)?;
    let mut report = OptimizationReport {
        schema_version: 1,
        final_data: data.clone(),
        cost_history: vec![],
        grad_norm_history: vec![],
        theta_history: vec![],
        epsilon_history: vec![],
        theta: 0.0,
        iterations: 0,
        termination: Termination::MaxIter,
        stages: vec![],
        audit: None,
        config: None,
        replay: None,
    };
    loop {
        let grad = masked(&data, &bundle.gradient);
        let theta = optimality_value_from_gradient(&data, &grad).theta;
        report.cost_history.push(bundle.value);
        report.grad_norm_history.push(gradient_norm(&grad, h));
        report.theta_history.push(theta);
        report.epsilon_history.push(eps);
        report.theta = theta;
        if theta.abs() <= opts.theta_tol {
            report.termination = Termination::ThetaTol;
            break;
        }
        if report.iterations >= opts.max_iter {
            report.termination = Termination::MaxIter;
            break;
        }
        let dir = descent_direction(&data, &grad, h);
        let mut s = opts.initial_step;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial = data.shifted(&dir, s).project();
            let decrease = grad.dot(&trial.difference(&data));
            if decrease < 0.0 {
                if let Ok(value) = cost_value(field, &trial, cost, disc) {
                    if value <= bundle.value + opts.armijo_sigma * decrease {
                        accepted = Some(trial);
                        break;
                    }
                }
            }
            s *= opts.armijo_beta;
        }
        let Some(next) = accepted else {
            report.termination = Termination::LineSearchFail;
            break;
        };
        data = next;
        bundle = adjoint_gradient(field, &data, cost, disc)?;
        report.iterations += 1;
    }
    report.final_data = data;
    Ok(report)
}

/// Tolerance on `|theta|` used to end the stage at band width `eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    Linear { scale: f64 },
    Constant { tol: f64 },
}

impl Default for SigmaRule {
    fn default() -> Self {
        SigmaRule::Linear { scale: 1.0 }
    }
}

impl SigmaRule {
    pub fn tolerance(&self, eps: f64) -> f64 {
        match *self {
            SigmaRule::Linear { scale } => scale * eps,
            SigmaRule::Constant { tol } => tol,
        }
    }
}

/// A system and cost whose running part has been folded into an extra
/// accumulator state, together with the maps between the original and the
/// lifted decision variables.
#[derive(Clone)]
pub struct Problem {
    original: Arc<dyn PiecewiseSmoothSystem>,
    system: Arc<dyn PiecewiseSmoothSystem>,
    cost: CostFunctional,
    augmented: bool,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("system", &self.original.name())
            .field("augmented", &self.augmented)
            .finish()
    }
}

impl Problem {
    pub fn new(system: Arc<dyn PiecewiseSmoothSystem>, cost: &CostFunctional) -> Self {
        let augmented = cost.has_running();
        let (lifted, folded) = cost.augment(system.clone());
        Self {
            original: system,
            system: lifted,
            cost: folded,
            augmented,
        }
    }

    pub fn original_system(&self) -> &Arc<dyn PiecewiseSmoothSystem> {
        &self.original
    }

    /// The (possibly augmented) system the relaxed problem is posed on.
    pub fn system(&self) -> &Arc<dyn PiecewiseSmoothSystem> {
        &self.system
    }

    pub fn cost(&self) -> &CostFunctional {
        &self.cost
    }

    /// Appends a zero accumulator to `x0`, pinned by its box.
    pub fn lift(&self, data: &ControlData) -> Result<ControlData> {
        if !self.augmented {
            return Ok(data.clone());
        }
        let n = data.x0.len();
        let mut out = data.clone();
        out.x0 = data.x0.clone().insert_row(n, 0.0);
        let (lo, hi) = match &data.x0_bounds {
            Some(b) => (b.lo.clone(), b.hi.clone()),
            None => (DVector::from_element(n, f64::NEG_INFINITY), DVector::from_element(n, f64::INFINITY)),
        };
        out.x0_bounds = Some(BoxBounds::new(lo.insert_row(n, 0.0), hi.insert_row(n, 0.0))?);
        Ok(out)
    }

    /// Inverse of [`Problem::lift`].
    pub fn lower(&self, data: &ControlData, template: &ControlData) -> ControlData {
        let mut out = data.clone();
        if self.augmented {
            let n = template.x0.len();
            out.x0 = data.x0.rows(0, n).into_owned();
            out.x0_bounds = template.x0_bounds.clone();
        }
        out
    }

    pub fn field(&self, epsilon: f64, phi: Arc<dyn TransitionFunction>) -> Result<RegularizedField> {
        RegularizedField::with_transition(self.system.clone(), phi, epsilon)
    }
}

#[derive(Debug, Clone)]
pub struct MasterOptions {
    pub schedule: Vec<f64>,
    pub sigma: SigmaRule,
    pub solver: SolverOptions,
    pub transition: Arc<dyn TransitionFunction>,
    pub filippov: FilippovOptions,
    /// Time window around each surface arrival checked for transversality.
    pub audit_window: f64,
    /// Run the Filippov replay and audit after the last stage.
    pub audit: bool,
}

impl MasterOptions {
    pub fn new(schedule: Vec<f64>) -> Self {
        Self {
            schedule,
            sigma: SigmaRule::default(),
            solver: SolverOptions::default(),
            transition: Arc::new(make_quintic_transition()),
            filippov: FilippovOptions::default(),
            audit_window: 1e-3,
            audit: true,
        }
    }
}

/// Solves the relaxed problem for each band width of a decreasing schedule,
/// warm-starting every stage from the previous result, then replays the
/// final inputs on the Filippov system and audits the replay.
pub fn master_algorithm(
    problem: &Problem,
    init: &ControlData,
    disc: &Discretization,
    opts: &MasterOptions,
) -> Result<OptimizationReport> {
    if opts.schedule.is_empty() {
        return Err(PwsError::InvalidArgument("empty epsilon schedule".into()));
    }
    if opts.schedule.iter().any(|e| !(*e > 0.0 && e.is_finite())) || opts.schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(PwsError::InvalidArgument("epsilon schedule must be positive and decreasing".into()));
    }
    let sys = problem.original_system();
    init.validate(sys.state_dim(), sys.input_dim())?;
    let mut data = problem.lift(init)?;

    let mut total = OptimizationReport {
        schema_version: 1,
        final_data: init.clone(),
        cost_history: vec![],
        grad_norm_history: vec![],
        theta_history: vec![],
        epsilon_history: vec![],
        theta: 0.0,
        iterations: 0,
        termination: Termination::MaxIter,
        stages: vec![],
        audit: None,
        config: None,
        replay: None,
    };
    let mut failed = false;
    let mut last_error = None;
    for &eps in &opts.schedule {
        let tol = opts.sigma.tolerance(eps);
        if failed {
            total.stages.push(StageReport {
                epsilon: eps,
                tolerance: tol,
                status: StageStatus::Skipped,
                iterations: 0,
                termination: None,
                final_cost: None,
                theta: None,
                error: None,
            });
            continue;
        }
        let solver = SolverOptions { theta_tol: tol, ..opts.solver };
        let run = problem
            .field(eps, opts.transition.clone())
            .and_then(|f| solve_fixed_epsilon(&f, &data, problem.cost(), disc, &solver));
        match run {
            Ok(r) => {
                total.stages.push(StageReport {
                    epsilon: eps,
                    tolerance: tol,
                    status: StageStatus::Completed,
                    iterations: r.iterations,
                    termination: Some(r.termination),
                    final_cost: Some(r.final_cost()),
                    theta: Some(r.theta),
                    error: None,
                });
                total.cost_history.extend(&r.cost_history);
                total.grad_norm_history.extend(&r.grad_norm_history);
                total.theta_history.extend(&r.theta_history);
                total.epsilon_history.extend(&r.epsilon_history);
                total.iterations += r.iterations;
                total.theta = r.theta;
                total.termination = r.termination;
                data = r.final_data;
            }
            Err(e) => {
                total.stages.push(StageReport {
                    epsilon: eps,
                    tolerance: tol,
                    status: StageStatus::Failed,
                    iterations: 0,
                    termination: None,
                    final_cost: None,
                    theta: None,
                    error: Some(format!("{}: {e}", e.kind())),
                });
                failed = true;
                last_error = Some(e);
            }
        }
    }
    if total.cost_history.is_empty() {
        return Err(last_error.expect("a stage failed"));
    }
    total.final_data = problem.lower(&data, init);
    if opts.audit {
        let replay = integrate_filippov(sys.as_ref(), &total.final_data, disc.horizon, &opts.filippov)?;
        total.audit = Some(audit_differentiability(&replay, sys.as_ref(), opts.audit_window));
        total.replay = Some(replay);
    }
    Ok(total)
}
