//! Command-line front end: JSON configuration, the `simulate`, `optimize`
//! and `converge` drivers, and the files they write.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 failed
//! rate or boundedness verdict.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::control::{BoxBounds, ControlData};
use crate::convergence::{
    default_epsilons, derivative_rate_study, gradient_boundedness_study, trajectory_errors, unit_direction,
    BoundednessOptions, DerivativeStudyOptions, RateMetric, RateStudy, SlopeWindow, TrajectoryStudyOptions, Verdict,
};
use crate::cost::CostFunctional;
use crate::error::PwsError;
use crate::examples;
use crate::filippov::{integrate_filippov, FilippovOptions};
use crate::hopper::{flight_phases_before, hopper_cost, HopperParams, HopperSystem, HopperTask};
use crate::optimizer::{master_algorithm, MasterOptions, OptimizationReport, Problem, SigmaRule, SolverOptions};
use crate::regularized::RegularizedField;
use crate::smooth::{integrate_smooth, Discretization, Resolution, Scheme};
use crate::system::PiecewiseSmoothSystem;
use crate::trajectory::{fmt_float, Trajectory};
use crate::transition::make_quintic_transition;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_VERDICT: i32 = 4;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{kind}: {0}", kind = .0.kind())]
    Runtime(PwsError),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) | CliError::Output { .. } => EXIT_RUNTIME,
        }
    }
}

impl From<PwsError> for CliError {
    fn from(e: PwsError) -> Self {
        CliError::Runtime(e)
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bound {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bound {
    fn to_box(&self, what: &str) -> Result<BoxBounds, CliError> {
        BoxBounds::new(DVector::from_vec(self.lo.clone()), DVector::from_vec(self.hi.clone()))
            .map_err(|e| CliError::Config(format!("{what} box: {e}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Boxes {
    #[serde(default)]
    pub u: Option<Bound>,
    #[serde(default)]
    pub x0: Option<Bound>,
}

/// Cost on the state samples, optionally with an effort integral `effort * |u|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostSpec {
    /// `w . x(T)`.
    Linear {
        weights: Vec<f64>,
        #[serde(default)]
        effort: f64,
    },
    /// `sum_i w_i (x_i(T) - target_i)^2`.
    Quadratic {
        target: Vec<f64>,
        weights: Vec<f64>,
        #[serde(default)]
        effort: f64,
    },
    /// The hopping task's apex, settle and effort terms.
    HopperTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub epsilons: Option<Vec<f64>>,
    pub steps_per_epsilon: Option<f64>,
    pub reference_factor: f64,
    pub ratio_cap: f64,
    pub window: SlopeWindow,
    pub audit_window: f64,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            epsilons: None,
            steps_per_epsilon: None,
            reference_factor: 0.25,
            ratio_cap: 10.0,
            window: SlopeWindow::default(),
            audit_window: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub system: String,
    #[serde(default)]
    pub params: Option<HopperParams>,
    #[serde(default)]
    pub task: Option<HopperTask>,
    #[serde(default)]
    pub horizon: Option<Horizon>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub schedule: Option<Vec<f64>>,
    #[serde(default)]
    pub boxes: Option<Boxes>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Constant input on every interval; ignored when `inputs` is given.
    #[serde(default)]
    pub u_init: Option<Vec<f64>>,
    /// One input per grid interval.
    #[serde(default)]
    pub inputs: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub scheme: Scheme,
    /// Largest step of the Filippov integrator.
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default)]
    pub guard_tol: Option<f64>,
    #[serde(default)]
    pub metric: RateMetric,
    #[serde(default)]
    pub cost: Option<CostSpec>,
    #[serde(default)]
    pub study: StudySettings,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

const DEFAULT_EPSILON: f64 = 0.01;

/// Horizon, grid and initial state used when the config leaves them out.
fn system_defaults(name: &str) -> Option<(f64, usize, Vec<f64>)> {
    Some(match name {
        "sliding1d" | "identical1d" => (2.0, 201, vec![-1.0]),
        "crossing1d" => (1.0, 101, vec![-0.5]),
        "grazing2d" => (1.0, 101, vec![-0.125, 0.5]),
        "integrator1d" => (1.0, 101, vec![0.0]),
        "linear2d" => (5.0, 501, vec![1.0, 0.0]),
        "curved2d" => (2.0, 201, vec![0.0, 0.0]),
        "hopper" => {
            let t = HopperTask::default();
            (t.t_final, t.gridpoints, t.x0.to_vec())
        }
        _ => return None,
    })
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Materializes every default and checks the result. The returned
    /// config echoes exactly what was run.
    pub fn resolve(mut self) -> Result<Resolved, CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        let (t_def, n_def, x0_def) = system_defaults(&self.system).ok_or_else(|| {
            CliError::Config(format!(
                "unknown system {:?}; builtin systems are {}",
                self.system,
                examples::BUILTIN_NAMES.join(", ")
            ))
        })?;
        let is_hopper = self.system == "hopper";
        if !is_hopper && (self.params.is_some() || self.task.is_some()) {
            return Err(CliError::Config("params and task apply to the hopper only".into()));
        }

        let mut task = None;
        let mut params = None;
        let sys: Arc<dyn PiecewiseSmoothSystem> = if is_hopper {
            let p = self.params.unwrap_or_default();
            let hs = HopperSystem::new(p).map_err(config_err)?;
            let mut t = self.task.clone().unwrap_or_default();
            if let Some(h) = self.horizon {
                t.t_final = h.t;
                t.gridpoints = h.n;
            }
            if let Some(x0) = &self.x0 {
                t.x0 = x0
                    .as_slice()
                    .try_into()
                    .map_err(|_| CliError::Config(format!("hopper x0 needs 4 entries, got {}", x0.len())))?;
            }
            if let Some(b) = self.boxes.as_ref().and_then(|b| b.u.as_ref()) {
                if b.lo.len() != 1 || b.hi.len() != 1 {
                    return Err(CliError::Config("hopper input box must have one entry per side".into()));
                }
                b.to_box("input")?;
                t.u_lo = b.lo[0];
                t.u_hi = b.hi[0];
            }
            if let Some(e) = self.epsilon {
                t.epsilon = e;
            }
            if self.schedule.is_some() {
                t.schedule = self.schedule.clone();
            }
            t.validate().map_err(config_err)?;
            self.params = Some(p);
            self.horizon = Some(Horizon { t: t.t_final, n: t.gridpoints });
            self.x0 = Some(t.x0.to_vec());
            let boxes = self.boxes.get_or_insert_with(Boxes::default);
            boxes.u = Some(Bound { lo: vec![t.u_lo], hi: vec![t.u_hi] });
            self.epsilon = Some(t.epsilon);
            self.schedule = t.schedule.clone();
            self.cost.get_or_insert(CostSpec::HopperTask);
            params = Some(p);
            task = Some(t.clone());
            self.task = Some(t);
            Arc::new(hs)
        } else {
            examples::builtin(&self.system).expect("defaults imply a builtin")
        };

        let (n, m) = (sys.state_dim(), sys.input_dim());
        let horizon = *self.horizon.get_or_insert(Horizon { t: t_def, n: n_def });
        if !(horizon.t > 0.0 && horizon.t.is_finite()) || horizon.n < 2 {
            return Err(CliError::Config("horizon needs T > 0 and N >= 2".into()));
        }
        let intervals = horizon.n - 1;
        let x0 = self.x0.get_or_insert(x0_def).clone();
        if x0.len() != n {
            return Err(CliError::Config(format!("x0 has {} entries, {} expects {n}", x0.len(), self.system)));
        }
        let epsilon = *self.epsilon.get_or_insert(DEFAULT_EPSILON);
        check_band_widths(&[epsilon], "epsilon")?;
        if let Some(s) = &self.schedule {
            check_band_widths(s, "schedule")?;
            if s.windows(2).any(|w| w[1] >= w[0]) {
                return Err(CliError::Config("schedule must be strictly decreasing".into()));
            }
        }

        let inputs: Vec<DVector<f64>> = match &self.inputs {
            Some(rows) => {
                if rows.len() != intervals {
                    return Err(CliError::Config(format!(
                        "inputs has {} rows, the grid has {intervals} intervals",
                        rows.len()
                    )));
                }
                rows.iter().map(|r| DVector::from_vec(r.clone())).collect()
            }
            None => {
                let u = self.u_init.get_or_insert_with(|| vec![0.0; m]).clone();
                vec![DVector::from_vec(u); intervals]
            }
        };
        if inputs.iter().any(|u| u.len() != m) {
            return Err(CliError::Config(format!("{} takes {m} input(s) per interval", self.system)));
        }

        let mut data = ControlData::new(DVector::from_vec(x0), inputs);
        let boxes = self.boxes.clone().unwrap_or_default();
        if let Some(b) = &boxes.u {
            let b = b.to_box("input")?;
            if b.dim() != m {
                return Err(CliError::Config("input box dimension".into()));
            }
            data = data.with_input_bounds(b);
        }
        match &boxes.x0 {
            Some(b) => {
                let b = b.to_box("x0")?;
                if b.dim() != n {
                    return Err(CliError::Config("x0 box dimension".into()));
                }
                data = data.with_x0_bounds(b);
            }
            None => data = data.frozen_x0(),
        }
        data.validate(n, m).map_err(config_err)?;

        let cost_spec = self.cost.get_or_insert_with(|| CostSpec::Linear {
            weights: vec![1.0; n],
            effort: 0.0,
        });
        let cost = build_cost(cost_spec, task.as_ref(), n)?;

        let filippov = FilippovOptions {
            step: *self.step.get_or_insert(FilippovOptions::default().step),
            guard_tol: *self.guard_tol.get_or_insert(FilippovOptions::default().guard_tol),
            ..FilippovOptions::default()
        };
        if !(filippov.step > 0.0 && filippov.guard_tol > 0.0) {
            return Err(CliError::Config("step and guard_tol must be positive".into()));
        }
        let disc = Discretization::new(horizon.t, horizon.n, self.scheme).map_err(config_err)?;
        cost.resolve(&disc).map_err(config_err)?;

        Ok(Resolved {
            config: self,
            system: sys,
            data,
            disc,
            cost,
            filippov,
            task,
            params,
        })
    }
}

fn check_band_widths(v: &[f64], what: &str) -> Result<(), CliError> {
    if v.is_empty() || v.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(CliError::Config(format!("{what} must be non-empty and positive")));
    }
    Ok(())
}

fn build_cost(spec: &CostSpec, task: Option<&HopperTask>, n: usize) -> Result<CostFunctional, CliError> {
    let with_effort = |cost: CostFunctional, w: f64| {
        if w == 0.0 {
            return cost;
        }
        cost.with_running(
            move |_, u| w * u.norm_squared(),
            |x, _| DVector::zeros(x.len()),
            move |_, u| u * (2.0 * w),
        )
    };
    let check = |v: &[f64], what: &str| {
        if v.len() == n {
            Ok(DVector::from_vec(v.to_vec()))
        } else {
            Err(CliError::Config(format!("cost {what} needs {n} entries")))
        }
    };
    match spec {
        CostSpec::Linear { weights, effort } => {
            let w = check(weights, "weights")?;
            let w2 = w.clone();
            Ok(with_effort(CostFunctional::terminal(move |x| w.dot(x), move |_| w2.clone()), *effort))
        }
        CostSpec::Quadratic { target, weights, effort } => {
            let (c, w) = (check(target, "target")?, check(weights, "weights")?);
            let (c2, w2) = (c.clone(), w.clone());
            Ok(with_effort(
                CostFunctional::terminal(
                    move |x| (x - &c).component_mul(&(x - &c)).dot(&w),
                    move |x| (x - &c2).component_mul(&w2) * 2.0,
                ),
                *effort,
            ))
        }
        CostSpec::HopperTask => {
            let task = task.ok_or_else(|| CliError::Config("cost kind hopper_task needs the hopper system".into()))?;
            hopper_cost(task).map_err(config_err)
        }
    }
}

/// A checked configuration with everything needed to run it.
#[derive(Clone)]
pub struct Resolved {
    pub config: Config,
    pub system: Arc<dyn PiecewiseSmoothSystem>,
    pub data: ControlData,
    pub disc: Discretization,
    pub cost: CostFunctional,
    pub filippov: FilippovOptions,
    pub task: Option<HopperTask>,
    pub params: Option<HopperParams>,
}

impl Resolved {
    pub fn config_json(&self) -> Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    pub fn horizon(&self) -> f64 {
        self.disc.time(self.disc.steps())
    }
}

impl std::fmt::Debug for Resolved {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Resolved")
            .field("config", &self.config)
            .field("system", &self.system.name())
            .field("disc", &self.disc)
            .finish()
    }
}

/// `dir/name.csv` becomes `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Output {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    write_file(path, &s)
}

fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    write_file(path, &traj.to_csv_string()?)
}

fn events_document(traj: &Trajectory, config: Value) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "events": traj.events,
        "phases": traj.phases(),
        "config": config,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SimMode {
    Filippov,
    Smooth,
}

#[derive(Debug, Clone, clap::Args)]
pub struct SimulateArgs {
    pub config: PathBuf,
    #[arg(long, value_enum, default_value = "filippov")]
    pub mode: SimMode,
    /// Band width for `--mode smooth`; overrides the config.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Trajectory CSV; events and phases go next to it as `.events.json`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn simulate(args: &SimulateArgs) -> Result<Trajectory, CliError> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(e) = args.epsilon {
        cfg.epsilon = Some(e);
    }
    let r = cfg.resolve()?;
    let traj = match args.mode {
        SimMode::Filippov => integrate_filippov(r.system.as_ref(), &r.data, r.horizon(), &r.filippov)?,
        SimMode::Smooth => {
            let eps = r.config.epsilon.expect("resolved");
            let field = RegularizedField::with_transition(r.system.clone(), Arc::new(make_quintic_transition()), eps)?;
            integrate_smooth(&field, &r.data, &r.disc)?
        }
    };
    write_trajectory(&args.out, &traj)?;
    let mut config = r.config_json();
    config["mode"] = json!(match args.mode {
        SimMode::Filippov => "filippov",
        SimMode::Smooth => "smooth",
    });
    write_json(&sibling(&args.out, "events.json"), &events_document(&traj, config))?;
    Ok(traj)
}

#[derive(Debug, Clone, clap::Args)]
pub struct OptimizeArgs {
    pub config: PathBuf,
    /// Solve at a single band width.
    #[arg(long, conflicts_with = "schedule")]
    pub epsilon: Option<f64>,
    /// Decreasing band widths for the master algorithm, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<f64>>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Writes `report.json`, `inputs.csv`, `smoothed.csv`, `replay.csv`,
/// `audit.json` and `phases.json` into the output directory.
pub fn optimize(args: &OptimizeArgs) -> Result<OptimizationReport, CliError> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(e) = args.epsilon {
        cfg.epsilon = Some(e);
        cfg.schedule = None;
        if let Some(t) = cfg.task.as_mut() {
            t.schedule = None;
        }
    }
    if let Some(s) = &args.schedule {
        cfg.schedule = Some(s.clone());
    }
    let r = cfg.resolve()?;
    if !r.data.is_feasible() {
        return Err(CliError::Config("initial data lies outside the boxes".into()));
    }
    let schedule = r.config.schedule.clone();
    let mut opts = MasterOptions::new(schedule.clone().unwrap_or_else(|| vec![r.config.epsilon.expect("resolved")]));
    opts.solver = r.config.solver;
    if schedule.is_none() {
        opts.sigma = SigmaRule::Constant {
            tol: r.config.solver.theta_tol,
        };
    }
    opts.filippov = r.filippov;
    opts.audit_window = r.disc.step_size();
    let problem = Problem::new(r.system.clone(), &r.cost);
    let mut report = master_algorithm(&problem, &r.data, &r.disc, &opts)?;
    report.config = Some(r.config_json());

    let last = *opts.schedule.last().expect("non-empty");
    let field = RegularizedField::with_transition(r.system.clone(), opts.transition.clone(), last)?;
    let smoothed = integrate_smooth(&field, &report.final_data, &r.disc)?;
    let replay = report.replay.clone().expect("audit enabled");

    let dir = &args.out_dir;
    write_file(&dir.join("report.json"), &(report.to_json()? + "\n"))?;
    write_file(&dir.join("inputs.csv"), &inputs_csv(&report.final_data, &r.disc))?;
    write_trajectory(&dir.join("smoothed.csv"), &smoothed)?;
    write_trajectory(&dir.join("replay.csv"), &replay)?;
    let audit = report.audit.as_ref().expect("audit enabled");
    let mut audit_doc = json!({
        "schema_version": SCHEMA_VERSION,
        "all_ok": audit.all_ok(),
        "failures": audit.failures(),
        "audit": audit,
    });
    let mut phases_doc = events_document(&replay, r.config_json());
    if let Some(task) = &r.task {
        let flights = flight_phases_before(&replay, task.t_apex);
        phases_doc["flight_phases_before_apex"] = json!(flights);
        audit_doc["flight_phases_before_apex"] = json!(flights);
    }
    write_json(&dir.join("audit.json"), &audit_doc)?;
    write_json(&dir.join("phases.json"), &phases_doc)?;
    Ok(report)
}

/// One row per grid interval: start time and held input.
pub fn inputs_csv(data: &ControlData, disc: &Discretization) -> String {
    let m = data.input_dim();
    let mut s = String::from("t");
    for i in 1..=m {
        s.push_str(&format!(",u_{i}"));
    }
    s.push('\n');
    for (k, u) in data.inputs.iter().enumerate() {
        s.push_str(&fmt_float(disc.time(k)));
        for v in u.iter() {
            s.push(',');
            s.push_str(&fmt_float(*v));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyKind {
    Trajectory,
    Derivative,
    Boundedness,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ConvergeArgs {
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub study: StudyKind,
    /// Band widths, comma separated; overrides the config.
    #[arg(long, value_delimiter = ',')]
    pub epsilons: Option<Vec<f64>>,
    /// Study CSV; the verdict goes next to it as `.verdict.json`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a study and writes its table and verdict. A study that cannot
/// produce a rate (no decay, failed audit) yields a failing verdict rather
/// than an error.
pub fn converge(args: &ConvergeArgs) -> Result<Verdict, CliError> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(e) = &args.epsilons {
        cfg.study.epsilons = Some(e.clone());
    }
    let study = args.study;
    let epsilons = cfg.study.epsilons.get_or_insert_with(|| match study {
        StudyKind::Boundedness => BoundednessOptions::new(1.0).epsilons,
        _ => default_epsilons(),
    });
    check_band_widths(epsilons, "study epsilons")?;
    let epsilons = epsilons.clone();
    cfg.study.steps_per_epsilon.get_or_insert(match study {
        StudyKind::Derivative => DerivativeStudyOptions::new(1.0).steps_per_epsilon,
        _ => TrajectoryStudyOptions::new(1.0).steps_per_epsilon,
    });
    let r = cfg.resolve()?;
    let settings = &r.config.study;
    let spe = settings.steps_per_epsilon.expect("resolved");
    let horizon = r.horizon();
    let data = r.data.clone();

    let (table, verdict) = match study {
        StudyKind::Trajectory => {
            let mut opts = TrajectoryStudyOptions::new(horizon);
            opts.epsilons = epsilons.clone();
            opts.window = settings.window;
            opts.steps_per_epsilon = spe;
            opts.scheme = r.config.scheme;
            opts.metric = r.config.metric;
            opts.filippov = r.filippov;
            let (errors, floors) = trajectory_errors(r.system.clone(), &data, &opts)?;
            let table = rate_csv(&epsilons, &errors);
            let verdict = match RateStudy::from_errors(epsilons.clone(), errors, opts.window, &floors) {
                Ok(s) => s.verdict(),
                Err(e) => study_failure(e)?,
            };
            (table, verdict)
        }
        StudyKind::Derivative => {
            let mut opts = DerivativeStudyOptions::new(horizon);
            opts.epsilons = epsilons.clone();
            opts.window = settings.window;
            opts.steps_per_epsilon = spe;
            opts.scheme = r.config.scheme;
            opts.reference_factor = settings.reference_factor;
            opts.filippov = r.filippov;
            opts.audit_window = settings.audit_window;
            match derivative_rate_study(r.system.clone(), &data, &unit_direction(&data), &r.cost, &opts) {
                Ok(s) => (rate_csv(&s.epsilons, &s.errors), s.verdict()),
                Err(e) => (rate_csv(&[], &[]), study_failure(e)?),
            }
        }
        StudyKind::Boundedness => {
            let mut opts = BoundednessOptions::new(horizon);
            opts.epsilons = epsilons.clone();
            opts.grid = Resolution::PerEpsilon { steps_per_epsilon: spe };
            opts.scheme = r.config.scheme;
            opts.ratio_cap = settings.ratio_cap;
            let s = gradient_boundedness_study(r.system.clone(), &data, &r.cost, None, &opts)?;
            let mut buf = Vec::new();
            s.table.write_csv(&mut buf)?;
            (String::from_utf8(buf).expect("csv is utf-8"), s.verdict())
        }
    };

    write_file(&args.out, &table)?;
    let mut doc = serde_json::to_value(&verdict).expect("verdict serializes");
    doc["study"] = json!(study);
    doc["config"] = r.config_json();
    write_json(&sibling(&args.out, "verdict.json"), &doc)?;
    Ok(verdict)
}

fn study_failure(e: PwsError) -> Result<Verdict, CliError> {
    match e {
        PwsError::InsufficientDecay | PwsError::AuditFailed(_) => Ok(Verdict::failed(&e)),
        other => Err(CliError::Runtime(other)),
    }
}

fn rate_csv(epsilons: &[f64], errors: &[f64]) -> String {
    let mut s = String::from("epsilon,error\n");
    for (e, r) in epsilons.iter().zip(errors) {
        s.push_str(&format!("{},{}\n", fmt_float(*e), fmt_float(*r)));
    }
    s
}

/// Exit code for a finished `converge` run.
pub fn verdict_exit_code(v: &Verdict) -> i32 {
    if v.pass {
        EXIT_OK
    } else {
        EXIT_VERDICT
    }
}
