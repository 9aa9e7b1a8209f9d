//! Empirical rate studies: how fast relaxed trajectories and derivatives
//! approach their limits as the band width shrinks.
//!
//! Every study evaluates each band width independently (in parallel) and
//! fits `log(error) = slope * log(epsilon) + intercept` by least squares.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlData, ControlVector};
use crate::cost::CostFunctional;
use crate::error::{PwsError, Result};
use crate::filippov::{audit_differentiability, integrate_filippov, FilippovOptions};
use crate::optimizer::Problem;
use crate::regularized::RegularizedField;
use crate::sensitivity::{adjoint_gradient, derivative_boundedness_probe, BoundednessTable};
use crate::smooth::{discrete_states, GridPolicy, Resolution, Scheme};
use crate::system::PiecewiseSmoothSystem;
use crate::trajectory::fmt_float;
use crate::transition::{make_quintic_transition, TransitionFunction};

/// `10^-1, 10^-1.5, ..., 10^-3`.
pub fn default_epsilons() -> Vec<f64> {
    (0..5).map(|k| 10f64.powf(-1.0 - 0.5 * k as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for SlopeWindow {
    fn default() -> Self {
        Self { lo: 0.8, hi: 1.2 }
    }
}

impl SlopeWindow {
    pub fn contains(&self, slope: f64) -> bool {
        self.lo <= slope && slope <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(log eps, log err)`. Zero errors are dropped;
/// at least two positive errors are needed.
pub fn fit_log_log(epsilons: &[f64], errors: &[f64]) -> Result<LogLogFit> {
    if epsilons.len() != errors.len() {
        return Err(PwsError::Dimension("epsilons and errors differ in length".into()));
    }
    let pts: Vec<(f64, f64)> = epsilons
        .iter()
        .zip(errors)
        .filter(|(e, r)| **e > 0.0 && **r > 0.0)
        .map(|(e, r)| (e.ln(), r.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(PwsError::InsufficientDecay);
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(PwsError::InvalidArgument("all epsilons are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LogLogFit { slope, intercept, r_squared })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub epsilons: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: SlopeWindow,
    pub pass: bool,
}

impl RateStudy {
    /// Fits the errors. Unless at least two errors exceed their rounding
    /// floor the study carries no rate information and gives `InsufficientDecay`.
    pub fn from_errors(epsilons: Vec<f64>, errors: Vec<f64>, window: SlopeWindow, noise_floors: &[f64]) -> Result<Self> {
        if errors.iter().zip(noise_floors).filter(|(e, f)| **e > **f).count() < 2 {
            return Err(PwsError::InsufficientDecay);
        }
        let fit = fit_log_log(&epsilons, &errors)?;
        Ok(Self {
            pass: window.contains(fit.slope),
            epsilons,
            errors,
            slope: fit.slope,
            intercept: fit.intercept,
            r_squared: fit.r_squared,
            window,
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epsilon", "error"])?;
        for (e, r) in self.epsilons.iter().zip(&self.errors) {
            out.write_record([fmt_float(*e), fmt_float(*r)])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn verdict(&self) -> Verdict {
        Verdict {
            schema_version: 1,
            slope: Some(self.slope),
            intercept: Some(self.intercept),
            r_squared: Some(self.r_squared),
            ratio: None,
            pass: self.pass,
            error: None,
        }
    }
}

/// Machine-readable study outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub schema_version: u32,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    pub ratio: Option<f64>,
    pub pass: bool,
    /// Error kind when the study could not produce a rate.
    pub error: Option<String>,
}

impl Verdict {
    pub fn failed(err: &PwsError) -> Self {
        Self {
            schema_version: 1,
            slope: None,
            intercept: None,
            r_squared: None,
            ratio: None,
            pass: false,
            error: Some(err.kind().to_string()),
        }
    }
}

/// How trajectory errors are measured against the Filippov reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RateMetric {
    /// Distance between final states.
    Endpoint,
    /// Largest distance over the relaxed time grid.
    #[default]
    Uniform,
}

#[derive(Debug, Clone)]
pub struct TrajectoryStudyOptions {
    pub horizon: f64,
    pub epsilons: Vec<f64>,
    pub window: SlopeWindow,
    /// Relaxed step no longer than `epsilon / steps_per_epsilon`.
    pub steps_per_epsilon: f64,
    pub scheme: Scheme,
    pub metric: RateMetric,
    pub filippov: FilippovOptions,
    pub transition: Arc<dyn TransitionFunction>,
}

impl TrajectoryStudyOptions {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            epsilons: default_epsilons(),
            window: SlopeWindow::default(),
            steps_per_epsilon: 10.0,
            scheme: Scheme::Rk4,
            metric: RateMetric::Uniform,
            filippov: FilippovOptions::with_step(1e-4),
            transition: Arc::new(make_quintic_transition()),
        }
    }
}

/// Rounding floor of a quantity of size `scale` accumulated over `steps` steps.
fn noise_floor(scale: f64, steps: usize) -> f64 {
    10.0 * f64::EPSILON * scale.max(1.0) * steps.max(1) as f64
}

/// Distance between relaxed and Filippov trajectories for each band width,
/// with the rounding floor of each distance.
pub fn trajectory_errors(
    sys: Arc<dyn PiecewiseSmoothSystem>,
    data: &ControlData,
    opts: &TrajectoryStudyOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let reference = integrate_filippov(sys.as_ref(), data, opts.horizon, &opts.filippov)?;
    let grid = GridPolicy {
        horizon: opts.horizon,
        scheme: opts.scheme,
        resolution: Resolution::PerEpsilon {
            steps_per_epsilon: opts.steps_per_epsilon,
        },
    };
    let scale = reference.states.iter().map(|x| x.amax()).fold(0.0, f64::max);
    let pairs = opts
        .epsilons
        .par_iter()
        .map(|&eps| {
            let field = RegularizedField::with_transition(sys.clone(), opts.transition.clone(), eps)?;
            let (disc, factor) = grid.discretize(eps, data.intervals())?;
            let states = discrete_states(&field, &data.refine(factor), &disc)?;
            let floor = noise_floor(scale, disc.steps());
            let err = match opts.metric {
                RateMetric::Endpoint => (states.last().expect("non-empty") - reference.final_state()).norm(),
                RateMetric::Uniform => states
                    .iter()
                    .enumerate()
                    .map(|(k, x)| (x - reference.state_at(disc.time(k))).norm())
                    .fold(0.0, f64::max),
            };
            Ok((err, floor))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    Ok(pairs.into_iter().unzip())
}

pub fn trajectory_rate_study(
    sys: Arc<dyn PiecewiseSmoothSystem>,
    data: &ControlData,
    opts: &TrajectoryStudyOptions,
) -> Result<RateStudy> {
    let (errors, floors) = trajectory_errors(sys, data, opts)?;
    RateStudy::from_errors(opts.epsilons.clone(), errors, opts.window, &floors)
}

#[derive(Debug, Clone)]
pub struct DerivativeStudyOptions {
    pub horizon: f64,
    pub epsilons: Vec<f64>,
    pub window: SlopeWindow,
    pub steps_per_epsilon: f64,
    pub scheme: Scheme,
    /// The reference derivative uses `reference_factor * min(epsilons)`.
    pub reference_factor: f64,
    pub filippov: FilippovOptions,
    pub audit_window: f64,
    pub transition: Arc<dyn TransitionFunction>,
}

impl DerivativeStudyOptions {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            epsilons: default_epsilons(),
            window: SlopeWindow::default(),
            steps_per_epsilon: 50.0,
            scheme: Scheme::Rk4,
            reference_factor: 0.25,
            filippov: FilippovOptions::with_step(1e-3),
            audit_window: 1e-3,
            transition: Arc::new(make_quintic_transition()),
        }
    }
}

/// Pads `delta` with zeros for the accumulator state of a lifted problem.
fn lift_direction(delta: &ControlVector, lifted_dim: usize) -> ControlVector {
    let mut d = delta.clone();
    if d.x0.len() < lifted_dim {
        d.x0 = d.x0.clone().insert_rows(d.x0.len(), lifted_dim - d.x0.len(), 0.0);
    }
    d
}

/// Directional derivatives of the relaxed cost at each band width, followed
/// by the value at the reference band width.
pub fn directional_derivatives(
    sys: Arc<dyn PiecewiseSmoothSystem>,
    data: &ControlData,
    delta: &ControlVector,
    cost: &CostFunctional,
    epsilons: &[f64],
    opts: &DerivativeStudyOptions,
) -> Result<Vec<f64>> {
    let problem = Problem::new(sys, cost);
    let lifted = problem.lift(data)?;
    let delta = lift_direction(delta, lifted.x0.len());
    let grid = GridPolicy {
        horizon: opts.horizon,
        scheme: opts.scheme,
        resolution: Resolution::PerEpsilon {
            steps_per_epsilon: opts.steps_per_epsilon,
        },
    };
    epsilons
        .par_iter()
        .map(|&eps| {
            let field = problem.field(eps, opts.transition.clone())?;
            let (disc, factor) = grid.discretize(eps, lifted.intervals())?;
            let bundle = adjoint_gradient(&field, &lifted.refine(factor), problem.cost(), &disc)?;
            Ok(bundle.gradient.dot(&delta.refine(factor)))
        })
        .collect()
}

/// Cauchy-rate study of `DL^eps(xi; delta)` against the value at a much
/// smaller band width. Requires the Filippov trajectory of `data` to pass the
/// differentiability audit.
pub fn derivative_rate_study(
    sys: Arc<dyn PiecewiseSmoothSystem>,
    data: &ControlData,
    delta: &ControlVector,
    cost: &CostFunctional,
    opts: &DerivativeStudyOptions,
) -> Result<RateStudy> {
    let traj = integrate_filippov(sys.as_ref(), data, opts.horizon, &opts.filippov)?;
    let audit = audit_differentiability(&traj, sys.as_ref(), opts.audit_window);
    if !audit.all_ok() {
        return Err(PwsError::AuditFailed(audit.failures().join("; ")));
    }
    let eps_min = opts.epsilons.iter().copied().fold(f64::INFINITY, f64::min);
    let mut all = opts.epsilons.clone();
    all.push(opts.reference_factor * eps_min);
    let values = directional_derivatives(sys, data, delta, cost, &all, opts)?;
    let reference = *values.last().expect("reference value");
    let errors: Vec<f64> = values[..opts.epsilons.len()].iter().map(|v| (v - reference).abs()).collect();
    let floors: Vec<f64> = opts
        .epsilons
        .iter()
        .map(|e| noise_floor(reference.abs(), (opts.horizon * opts.steps_per_epsilon / e).ceil() as usize))
        .collect();
    RateStudy::from_errors(opts.epsilons.clone(), errors, opts.window, &floors)
}

#[derive(Debug, Clone)]
pub struct BoundednessOptions {
    pub horizon: f64,
    pub epsilons: Vec<f64>,
    pub grid: Resolution,
    pub scheme: Scheme,
    pub ratio_cap: f64,
    pub transition: Arc<dyn TransitionFunction>,
}

impl BoundednessOptions {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            epsilons: (1..=4).map(|k| 10f64.powi(-k)).collect(),
            grid: Resolution::PerEpsilon { steps_per_epsilon: 10.0 },
            scheme: Scheme::Rk4,
            ratio_cap: 10.0,
            transition: Arc::new(make_quintic_transition()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundednessStudy {
    pub table: BoundednessTable,
    pub ratio_cap: f64,
    pub pass: bool,
}

impl BoundednessStudy {
    pub fn verdict(&self) -> Verdict {
        Verdict {
            schema_version: 1,
            slope: None,
            intercept: None,
            r_squared: None,
            ratio: Some(self.table.ratio),
            pass: self.pass,
            error: None,
        }
    }
}

/// Gradient norms across band widths; passes when the largest is within
/// `ratio_cap` times the smallest.
pub fn gradient_boundedness_study(
    sys: Arc<dyn PiecewiseSmoothSystem>,
    data: &ControlData,
    cost: &CostFunctional,
    direction: Option<&ControlVector>,
    opts: &BoundednessOptions,
) -> Result<BoundednessStudy> {
    let problem = Problem::new(sys, cost);
    let lifted = problem.lift(data)?;
    let direction = direction.map(|d| lift_direction(d, lifted.x0.len()));
    let eps0 = opts.epsilons.first().copied().unwrap_or(0.1);
    let field = problem.field(eps0, opts.transition.clone())?;
    let grid = GridPolicy {
        horizon: opts.horizon,
        scheme: opts.scheme,
        resolution: opts.grid,
    };
    let table = derivative_boundedness_probe(&field, &opts.epsilons, &lifted, problem.cost(), &grid, direction.as_ref())?;
    Ok(BoundednessStudy {
        pass: table.ratio <= opts.ratio_cap,
        table,
        ratio_cap: opts.ratio_cap,
    })
}

/// Unit direction `(dx0, du) = (1, 1)` used for scalar examples.
pub fn unit_direction(data: &ControlData) -> ControlVector {
    ControlVector {
        x0: DVector::from_element(data.x0.len(), 1.0),
        inputs: vec![DVector::from_element(data.input_dim(), 1.0); data.intervals()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::examples;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn identity_cost() -> CostFunctional {
        CostFunctional::terminal(|x| x[0], |x| DVector::from_fn(x.len(), |i, _| if i == 0 { 1.0 } else { 0.0 }))
    }

    #[test]
    fn default_schedule_is_half_decades() {
        let e = default_epsilons();
        assert_eq!(e.len(), 5);
        assert_eq!(e[0], 0.1);
        assert!((e[1] - 0.1f64 / 10f64.sqrt()).abs() < 1e-15);
        assert!((e[4] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn zero_errors_are_insufficient() {
        let r = RateStudy::from_errors(default_epsilons(), vec![0.0; 5], SlopeWindow::default(), &[1e-15; 5]);
        assert!(matches!(r, Err(PwsError::InsufficientDecay)));
    }

    #[test]
    fn identical_fields_have_no_rate() {
        let sys: Arc<dyn PiecewiseSmoothSystem> = Arc::new(examples::identical1d());
        let data = ControlData::constant_input(dvector![-1.0], dvector![0.0], 1);
        let r = trajectory_rate_study(sys, &data, &TrajectoryStudyOptions::new(2.0));
        assert!(matches!(r, Err(PwsError::InsufficientDecay)), "{r:?}");
    }

    #[test]
    fn sliding_uniform_error_is_linear() {
        let sys: Arc<dyn PiecewiseSmoothSystem> = Arc::new(examples::sliding1d());
        let data = ControlData::constant_input(dvector![-1.0], dvector![0.0], 1);
        let mut opts = TrajectoryStudyOptions::new(2.0);
        opts.metric = RateMetric::Uniform;
        let r = trajectory_rate_study(sys, &data, &opts).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.r_squared >= 0.98);
        assert!(r.errors.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn crossing_derivative_rate() {
        let sys: Arc<dyn PiecewiseSmoothSystem> = Arc::new(examples::crossing1d());
        let data = ControlData::constant_input(dvector![-0.5], dvector![0.0], 1);
        let r = derivative_rate_study(sys, &data, &unit_direction(&data), &identity_cost(), &DerivativeStudyOptions::new(1.0)).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn zero_direction_has_no_rate() {
        let sys: Arc<dyn PiecewiseSmoothSystem> = Arc::new(examples::crossing1d());
        let data = ControlData::constant_input(dvector![-0.5], dvector![0.0], 1);
        let zero = ControlVector::zeros_like(&data);
        let r = derivative_rate_study(sys, &data, &zero, &identity_cost(), &DerivativeStudyOptions::new(1.0));
        assert!(matches!(r, Err(PwsError::InsufficientDecay)));
    }

    #[test]
    fn grazing_fails_audit() {
        let sys: Arc<dyn PiecewiseSmoothSystem> = Arc::new(examples::grazing2d());
        let d = 0.5;
        let data = ControlData::constant_input(dvector![-d * d / 2.0, d], dvector![0.0], 1);
        let r = derivative_rate_study(sys, &data, &unit_direction(&data), &identity_cost(), &DerivativeStudyOptions::new(1.0));
        assert!(matches!(r, Err(PwsError::AuditFailed(_))), "{r:?}");
    }

    #[test]
    fn crossing_gradients_stay_bounded() {
        let sys: Arc<dyn PiecewiseSmoothSystem> = Arc::new(examples::crossing1d());
        let data = ControlData::constant_input(dvector![-0.5], dvector![0.0], 1);
        let s = gradient_boundedness_study(sys, &data, &identity_cost(), None, &BoundednessOptions::new(1.0)).unwrap();
        assert!(s.pass);
        assert!(s.table.ratio <= 3.0, "{}", s.table.ratio);
    }

    #[test]
    fn study_csv_and_verdict() {
        let r = RateStudy::from_errors(vec![0.1, 0.01], vec![0.2, 0.02], SlopeWindow::default(), &[0.0; 2]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epsilon,error\n0.1,0.2\n0.01,0.02\n");
        let v = serde_json::to_value(r.verdict()).unwrap();
        assert_eq!(v["pass"], true);
        assert_eq!(v["schema_version"], 1);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let sys: Arc<dyn PiecewiseSmoothSystem> = Arc::new(examples::crossing1d());
        let data = ControlData::constant_input(dvector![-0.5], dvector![0.0], 1);
        let opts = DerivativeStudyOptions::new(1.0);
        let dir = unit_direction(&data);
        let a = derivative_rate_study(sys.clone(), &data, &dir, &identity_cost(), &opts).unwrap();
        let b = derivative_rate_study(sys, &data, &dir, &identity_cost(), &opts).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn synthetic_linear_errors_recover_unit_slope(c in 1e-3f64..1e3, k in 2usize..8) {
            let eps: Vec<f64> = (0..k).map(|i| 10f64.powf(-1.0 - 0.5 * i as f64)).collect();
            let errs: Vec<f64> = eps.iter().map(|e| c * e).collect();
            let fit = fit_log_log(&eps, &errs).unwrap();
            prop_assert!((fit.slope - 1.0).abs() <= 1e-6);
            prop_assert!((fit.intercept - c.ln()).abs() <= 1e-6);
        }

        #[test]
        fn power_laws_recover_their_exponent(p in 0.2f64..3.0, c in 1e-2f64..1e2) {
            let eps = default_epsilons();
            let errs: Vec<f64> = eps.iter().map(|e| c * e.powf(p)).collect();
            let fit = fit_log_log(&eps, &errs).unwrap();
            prop_assert!((fit.slope - p).abs() <= 1e-9);
            prop_assert!(fit.r_squared > 1.0 - 1e-12);
        }
    }
}
