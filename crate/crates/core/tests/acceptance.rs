//! Acceptance gate. Every test prints one `[k] ... PASS|FAIL` line straight
//! to stderr (so it shows without `--nocapture`) and then asserts it.

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{dvector, DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use rayon::prelude::*;

use pwsopt::cli::Config;
use pwsopt::control::{BoxBounds, ControlData, ControlVector};
use pwsopt::convergence::{
    default_epsilons, derivative_rate_study, fit_log_log, gradient_boundedness_study, trajectory_errors, trajectory_rate_study,
    unit_direction, BoundednessOptions, DerivativeStudyOptions, RateMetric, RateStudy, TrajectoryStudyOptions,
};
use pwsopt::cost::CostFunctional;
use pwsopt::examples;
use pwsopt::filippov::{audit_differentiability, integrate_filippov, FilippovOptions};
use pwsopt::hopper::{hopper_cost, optimize_hopping, HopperParams, HopperSystem, HopperTask};
use pwsopt::optimizer::{solve_fixed_epsilon, Problem, SolverOptions, Termination};
use pwsopt::regularized::RegularizedField;
use pwsopt::sensitivity::{
    adjoint_gradient, finite_difference_gradient, finite_difference_partial, forward_directional_derivative, forward_sensitivity,
};
use pwsopt::smooth::{discrete_states, flow_endpoint, integrate_smooth, Discretization, Scheme};
use pwsopt::system::{central_difference_jacobian, FnSystem, Mode, PiecewiseSmoothSystem};
use pwsopt::trajectory::{ModeLabel, Trajectory};
use pwsopt::transition::{make_quintic_transition, TransitionFunction};

fn report(k: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("[{k}] {name:<34} {verdict}  {detail}  ({:.2}s)\n", elapsed.as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn note(text: &str) {
    let _ = std::io::stderr().write_all(format!("      {text}\n").as_bytes());
}

fn sys(s: impl PiecewiseSmoothSystem + 'static) -> Arc<dyn PiecewiseSmoothSystem> {
    Arc::new(s)
}

fn identity_cost() -> CostFunctional {
    CostFunctional::terminal(|x| x[0], |x| DVector::from_fn(x.len(), |i, _| if i == 0 { 1.0 } else { 0.0 }))
}

/// `q^2` for the quintic `q`: a valid ramp with `phi(0) = 1/4`.
#[derive(Debug)]
struct SquaredQuintic;

impl TransitionFunction for SquaredQuintic {
    fn eval(&self, a: f64) -> f64 {
        make_quintic_transition().eval(a).powi(2)
    }
    fn deriv(&self, a: f64) -> f64 {
        let q = make_quintic_transition();
        2.0 * q.eval(a) * q.deriv(a)
    }
    fn deriv2(&self, a: f64) -> f64 {
        let q = make_quintic_transition();
        2.0 * (q.deriv(a).powi(2) + q.eval(a) * q.deriv2(a))
    }
}

#[test]
fn sliding_trajectory_rate() {
    let start = Instant::now();
    let data = ControlData::constant_input(dvector![-1.0], dvector![0.0], 1);
    let mut opts = TrajectoryStudyOptions::new(2.0);
    opts.metric = RateMetric::Endpoint;
    let (errors, floors) = trajectory_errors(sys(examples::sliding1d()), &data, &opts).unwrap();
    let study = RateStudy::from_errors(opts.epsilons.clone(), errors.clone(), opts.window, &floors);
    let elapsed = start.elapsed();
    let (pass, detail) = match &study {
        Ok(s) => (
            s.pass && s.r_squared >= 0.98 && elapsed.as_secs_f64() < 10.0,
            format!("slope {:.4}, r^2 {:.4}", s.slope, s.r_squared),
        ),
        Err(e) => (false, format!("{} (|x(2)| = {:.2e})", e.kind(), errors.iter().cloned().fold(0.0, f64::max))),
    };
    report(1, "sliding trajectory rate", pass, elapsed, &detail);
    note(&format!("endpoint errors {:?}", errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()));

    opts.metric = RateMetric::Uniform;
    let uniform = trajectory_rate_study(sys(examples::sliding1d()), &data, &opts).unwrap();
    note(&format!(
        "sup-in-time error: slope {:.4}, r^2 {:.4}, pass {}",
        uniform.slope, uniform.r_squared, uniform.pass
    ));
    opts.metric = RateMetric::Endpoint;
    opts.transition = Arc::new(SquaredQuintic);
    let skewed = trajectory_rate_study(sys(examples::sliding1d()), &data, &opts).unwrap();
    note(&format!(
        "endpoint error with phi(0) = 1/4: slope {:.4}, r^2 {:.4}",
        skewed.slope, skewed.r_squared
    ));
    assert!(pass, "endpoint error of a symmetric ramp does not decay like epsilon: {study:?}");
}

#[test]
fn crossing_derivative_rate() {
    let start = Instant::now();
    let data = ControlData::constant_input(dvector![-0.5], dvector![0.0], 1);
    let study = derivative_rate_study(
        sys(examples::crossing1d()),
        &data,
        &unit_direction(&data),
        &identity_cost(),
        &DerivativeStudyOptions::new(1.0),
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = study.pass && elapsed.as_secs_f64() < 10.0;
    report(2, "crossing derivative rate", pass, elapsed, &format!("slope {:.4}, r^2 {:.4}", study.slope, study.r_squared));
    assert!(pass, "{study:?}");
}

#[test]
fn crossing_gradient_boundedness() {
    let start = Instant::now();
    let data = ControlData::constant_input(dvector![-0.5], dvector![0.0], 1);
    let study = gradient_boundedness_study(
        sys(examples::crossing1d()),
        &data,
        &identity_cost(),
        None,
        &BoundednessOptions::new(1.0),
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = study.table.ratio <= 10.0 && elapsed.as_secs_f64() < 10.0;
    let norms: Vec<String> = study.table.rows.iter().map(|r| format!("{:.4}", r.grad_norm)).collect();
    report(3, "crossing gradient boundedness", pass, elapsed, &format!("max/min {:.4} over [{}]", study.table.ratio, norms.join(", ")));
    assert!(pass);
}

#[test]
fn hopper_gradient_exactness() {
    let start = Instant::now();
    let task = HopperTask::default();
    let problem = Problem::new(sys(HopperSystem::new(HopperParams::default()).unwrap()), &hopper_cost(&task).unwrap());
    let disc = task.discretization().unwrap();
    let mut rng = StdRng::seed_from_u64(7);
    let mut data = task.initial_data().unwrap();
    for u in &mut data.inputs {
        u[0] = rng.random_range(-10.0..10.0);
    }
    assert!(data.is_feasible());
    let lifted = problem.lift(&data).unwrap();
    let field = problem.field(task.epsilon, Arc::new(make_quintic_transition())).unwrap();
    let grad = adjoint_gradient(&field, &lifted, problem.cost(), &disc).unwrap().gradient.to_flat();
    let n = lifted.x0.len();
    let mut probes: Vec<usize> = (0..20).map(|_| n + rng.random_range(0..data.intervals())).collect();
    probes.sort_unstable();
    probes.dedup();
    while probes.len() < 20 {
        let k = n + rng.random_range(0..data.intervals());
        if !probes.contains(&k) {
            probes.push(k);
        }
    }
    let worst = probes
        .par_iter()
        .map(|&k| {
            let fd = finite_difference_partial(&field, &lifted, problem.cost(), &disc, k, None).unwrap();
            (grad[k] - fd).abs() / fd.abs().max(1e-8)
        })
        .reduce(|| 0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = worst <= 1e-4 && elapsed.as_secs_f64() < 30.0;
    report(4, "hopper gradient vs differences", pass, elapsed, &format!("max relative error {worst:.2e} over 20 inputs"));
    assert!(pass);
}

fn duality_gap(field: &RegularizedField, data: &ControlData, cost: &CostFunctional, disc: &Discretization, delta: &ControlVector) -> (f64, f64) {
    let bundle = adjoint_gradient(field, data, cost, disc).unwrap();
    let forward = forward_directional_derivative(field, data, delta, cost, disc).unwrap();
    ((bundle.gradient.dot(delta) - forward).abs(), bundle.value)
}

fn random_direction(rng: &mut StdRng, n: usize, m: usize, intervals: usize) -> ControlVector {
    let flat: Vec<f64> = (0..n + m * intervals).map(|_| rng.random_range(-1.0..1.0)).collect();
    ControlVector::from_flat(&flat, n, m).unwrap()
}

#[test]
fn adjoint_forward_duality() {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(11);
    let mut worst: f64 = 0.0;

    let task = HopperTask::default();
    let problem = Problem::new(sys(HopperSystem::new(HopperParams::default()).unwrap()), &hopper_cost(&task).unwrap());
    let hopper_disc = task.discretization().unwrap();
    let hopper_field = problem.field(0.01, Arc::new(make_quintic_transition())).unwrap();
    let curved = RegularizedField::new(sys(examples::curved_test_system()), 0.05).unwrap();
    let curved_disc = Discretization::new(2.0, 41, Scheme::Rk4).unwrap();
    let curved_cost = CostFunctional::terminal(|x| x[0] * x[1] + x[1].sin(), |x| dvector![x[1], x[0] + x[1].cos()])
        .with_term(pwsopt::CostTime::At(1.0), |x| x.norm_squared(), |x| x * 2.0);

    for _ in 0..50 {
        let mut hd = task.initial_data().unwrap();
        for u in &mut hd.inputs {
            u[0] = rng.random_range(-10.0..10.0);
        }
        let hd = problem.lift(&hd).unwrap();
        let delta = random_direction(&mut rng, 5, 1, hd.intervals());
        let (gap, value) = duality_gap(&hopper_field, &hd, problem.cost(), &hopper_disc, &delta);
        worst = worst.max(gap / (1.0 + value.abs()));

        let cd = ControlData::new(
            dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            (0..40).map(|_| dvector![rng.random_range(-2.0..2.0)]).collect(),
        );
        let delta = random_direction(&mut rng, 2, 1, 40);
        let (gap, value) = duality_gap(&curved, &cd, &curved_cost, &curved_disc, &delta);
        worst = worst.max(gap / (1.0 + value.abs()));
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && elapsed.as_secs_f64() < 10.0;
    report(5, "adjoint-forward duality", pass, elapsed, &format!("max gap/(1+|L|) {worst:.2e} over 2 x 50 directions"));
    assert!(pass);
}

struct HopperRun {
    z_apex: f64,
    zd_apex: f64,
    z_end: f64,
    in_box: bool,
    flights: usize,
    cost: f64,
    phases: usize,
    termination: &'static str,
    iterations: usize,
}

fn run_hopper(task: &HopperTask) -> HopperRun {
    let out = optimize_hopping(task, &HopperParams::default(), &SolverOptions::default()).unwrap();
    let s = &out.smoothed;
    HopperRun {
        z_apex: s.state_at(1.0)[0],
        zd_apex: s.state_at(1.0)[1],
        z_end: s.final_state()[0],
        in_box: out.report.final_data.inputs.iter().all(|u| (-10.0..=10.0).contains(&u[0])),
        flights: out.flight_phases_before_apex,
        cost: out.report.final_cost(),
        phases: out.phases.len(),
        termination: out.report.termination.as_str(),
        iterations: out.report.cost_history.len(),
    }
}

fn describe(r: &HopperRun) -> String {
    format!(
        "z(1) {:.3}, zdot(1) {:.3}, z(1.8) {:.3}, inputs boxed {}, flights before t=1: {}",
        r.z_apex, r.zd_apex, r.z_end, r.in_box, r.flights
    )
}

#[test]
fn hopper_experiment() {
    let start = Instant::now();
    let run = run_hopper(&HopperTask::default());
    let elapsed = start.elapsed();
    let checks = [
        (run.z_apex - 1.0).abs() <= 0.05,
        run.zd_apex.abs() <= 0.1,
        (run.z_end - 0.65).abs() <= 0.05,
        run.in_box,
        run.flights >= 2,
        elapsed.as_secs_f64() < 300.0,
    ];
    let pass = checks.iter().all(|c| *c);
    report(6, "hopper hopping experiment", pass, elapsed, &describe(&run));
    note(&format!(
        "final cost {:.4e}, {} replay phases, {} after {} iterates",
        run.cost, run.phases, run.termination, run.iterations
    ));
    let low = run_hopper(&HopperTask {
        effort_weight: 1e-3,
        schedule: Some(vec![0.04, 0.02, 0.01]),
        ..HopperTask::default()
    });
    note(&format!("effort weight 1e-3, schedule 0.04/0.02/0.01: {}", describe(&low)));
    assert!(pass, "optimizer settles on a standing solution without flight");
}

#[test]
fn filippov_analytic_oracles() {
    let start = Instant::now();
    let slide = integrate_filippov(
        &examples::sliding1d(),
        &ControlData::constant_input(dvector![-1.0], dvector![0.0], 1),
        2.0,
        &FilippovOptions::default(),
    )
    .unwrap();
    let rest = slide.final_state()[0].abs();

    let hopper = HopperSystem::new(HopperParams::default()).unwrap();
    let drop = integrate_filippov(
        &hopper,
        &ControlData::constant_input(dvector![1.0, 0.0, 0.75, 0.0], dvector![0.0], 10),
        0.5,
        &FilippovOptions::default(),
    )
    .unwrap();
    let impact_err = (drop.events[0].time - (2.0 * 0.25 / 9.81f64).sqrt()).abs();

    let graze_sys = examples::grazing2d();
    let graze = integrate_filippov(
        &graze_sys,
        &ControlData::constant_input(dvector![-0.125, 0.5], dvector![0.0], 1),
        1.0,
        &FilippovOptions::default(),
    )
    .unwrap();
    let audit = audit_differentiability(&graze, &graze_sys, 1e-3);
    let elapsed = start.elapsed();
    let pass = rest <= 1e-8 && impact_err <= 1e-6 && !audit.assumption3_ok && elapsed.as_secs_f64() < 5.0;
    report(
        7,
        "filippov analytic oracles",
        pass,
        elapsed,
        &format!("|x(2)| {rest:.1e}, impact error {impact_err:.1e} s, grazing flagged {}", !audit.assumption3_ok),
    );
    assert!(pass);
}

const CASES: u32 = 256;

/// Runs `test` on `CASES` deterministic draws from `strategy`.
fn property<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = PropConfig {
        cases: CASES,
        failure_persistence: None,
        ..PropConfig::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// `g = x1`; `f1` always crosses upward, `f2` points back (sliding) when
/// `a < 0` and onward (crossing) when `a > 0`.
fn ramp2d(a: f64) -> FnSystem {
    FnSystem::new(
        "ramp2d",
        2,
        1,
        |x, u| dvector![1.0 + 0.5 * x[1].sin(), 1.0 + u[0]],
        move |x, u| dvector![a + 0.3 * x[1].cos(), -0.5 + u[0]],
        |x| x[0],
        |_| dvector![1.0, 0.0],
    )
    .unwrap()
}

fn hull_distance(v: &DVector<f64>, f1: &DVector<f64>, f2: &DVector<f64>) -> f64 {
    let d = f2 - f1;
    let lam = if d.norm_squared() == 0.0 {
        0.0
    } else {
        ((v - f1).dot(&d) / d.norm_squared()).clamp(0.0, 1.0)
    };
    (v - (f1 + d * lam)).norm()
}

fn check_filippov(s: &dyn PiecewiseSmoothSystem, traj: &Trajectory, tol: f64, lipschitz: f64) -> Result<(), TestCaseError> {
    for (g, m) in traj.guard_values.iter().zip(&traj.modes) {
        if *m == ModeLabel::SlidingOnSigma {
            prop_assert!(g.abs() <= 10.0 * tol, "sliding sample off the surface: g = {g:e}");
        }
    }
    for ev in &traj.events {
        let g = traj.guard_values[ev.sample];
        prop_assert!(g.abs() <= tol, "event at t = {} has g = {g:e}", ev.time);
    }
    for i in 0..traj.len() - 1 {
        let (m0, m1) = (traj.modes[i], traj.modes[i + 1]);
        let dt = traj.times[i + 1] - traj.times[i];
        if m0 != m1 || dt <= 0.0 {
            continue;
        }
        let xdot = (&traj.states[i + 1] - &traj.states[i]) / dt;
        let (x, u) = (&traj.states[i], traj.input_at(i));
        let dist = match m0 {
            ModeLabel::D1 => (xdot - s.field(Mode::One, x, u)).norm(),
            ModeLabel::D2 => (xdot - s.field(Mode::Two, x, u)).norm(),
            _ => hull_distance(&xdot, &s.field(Mode::One, x, u), &s.field(Mode::Two, x, u)),
        };
        prop_assert!(dist <= lipschitz * dt, "sample {i}: distance {dist:e} for step {dt:e}");
    }
    Ok(())
}

fn relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn random_data(n: usize, m: usize, intervals: usize) -> impl Strategy<Value = ControlData> {
    (
        prop::collection::vec(-1.0f64..1.0, n),
        prop::collection::vec(-1.0f64..1.0, m * intervals),
    )
        .prop_map(move |(x0, us)| {
            ControlData::new(
                DVector::from_vec(x0),
                us.chunks(m).map(DVector::from_row_slice).collect(),
            )
        })
}

type CheckFn = fn() -> Result<(), String>;
type Check = (&'static str, CheckFn);

fn pws_core_checks() -> Vec<Check> {
    vec![
        ("transition contract", || {
            property((-2.0f64..2.0, 1e-6f64..1e-3), |(a, d)| {
                let phi = make_quintic_transition();
                let v = phi.eval(a);
                prop_assert!((0.0..=1.0).contains(&v) && phi.deriv(a) >= 0.0);
                if a.abs() < 0.999 && (a + d).abs() < 1.0 {
                    prop_assert!(phi.eval(a + d) > v);
                }
                let h = 1e-6;
                let d1 = (phi.eval(a + h) - phi.eval(a - h)) / (2.0 * h);
                let d2 = (phi.deriv(a + h) - phi.deriv(a - h)) / (2.0 * h);
                prop_assert!((d1 - phi.deriv(a)).abs() <= 1e-6);
                prop_assert!((d2 - phi.deriv2(a)).abs() <= 1e-5);
                Ok(())
            })
        }),
        ("saturation and convexity", || {
            property((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0, 0.01f64..1.0), |(x0, x1, u, eps)| {
                let s = sys(examples::curved_test_system());
                let f = RegularizedField::new(s.clone(), eps).unwrap();
                let (x, u) = (dvector![x0, x1], dvector![u]);
                let (f1, f2, fe) = (s.field(Mode::One, &x, &u), s.field(Mode::Two, &x, &u), f.eval(&x, &u).unwrap());
                let g = s.guard(&x);
                if g <= -eps {
                    prop_assert_eq!(&fe, &f1);
                }
                if g >= eps {
                    prop_assert_eq!(&fe, &f2);
                }
                for i in 0..2 {
                    let slack = 1e-14 * f1[i].abs().max(f2[i].abs());
                    prop_assert!(fe[i] >= f1[i].min(f2[i]) - slack && fe[i] <= f1[i].max(f2[i]) + slack);
                }
                Ok(())
            })
        }),
        ("regularized jacobians", || {
            property(
                (prop::collection::vec(-1.5f64..1.5, 4), -3.0f64..3.0, 0.05f64..0.5, prop::bool::ANY),
                |(xs, u, eps, hop)| {
                    let s = if hop {
                        sys(HopperSystem::new(HopperParams::default()).unwrap())
                    } else {
                        sys(examples::curved_test_system())
                    };
                    let n = s.state_dim();
                    let x = DVector::from_row_slice(&xs[..n]);
                    let u = dvector![u];
                    let f = RegularizedField::new(s.clone(), eps).unwrap();
                    let h = 1e-6 * x.norm().max(1.0);
                    prop_assume!((s.guard(&x).abs() - eps).abs() > 1e3 * h);
                    let jx = central_difference_jacobian(|z| f.eval(z, &u).unwrap(), &x, n, 1e-6);
                    let ju = central_difference_jacobian(|v| f.eval(&x, v).unwrap(), &u, n, 1e-6);
                    prop_assert!(relative(&f.jac_x(&x, &u).unwrap(), &jx) <= 1e-4);
                    prop_assert!(relative(&f.jac_u(&x, &u).unwrap(), &ju) <= 1e-4);
                    Ok(())
                },
            )
        }),
    ]
}

fn filippov_checks() -> Vec<Check> {
    vec![
        ("sliding, events, filippov hull", || {
            property(
                (0.5f64..2.0, prop::bool::ANY, 0.05f64..1.0, -1.0f64..1.0, -1.0f64..1.0, prop::sample::select(vec![1e-3, 4e-3])),
                |(a, slide, r, s0, u, step)| {
                    let a = if slide { -a } else { a };
                    let s = ramp2d(a);
                    let data = ControlData::constant_input(dvector![-r, s0], dvector![u], 4);
                    let opts = FilippovOptions::with_step(step);
                    let traj = integrate_filippov(&s, &data, 2.0, &opts).unwrap();
                    prop_assert!(!traj.events.is_empty());
                    check_filippov(&s, &traj, opts.guard_tol, 20.0)
                },
            )
        }),
        ("hopper events and hull", || {
            property(prop::collection::vec(-10.0f64..10.0, 18), |us| {
                let s = HopperSystem::new(HopperParams::default()).unwrap();
                let data = ControlData::new(dvector![0.65, 0.0, 0.75, 0.0], us.iter().map(|u| dvector![*u]).collect());
                let opts = FilippovOptions::with_step(1e-3);
                let traj = integrate_filippov(&s, &data, 1.8, &opts).unwrap();
                check_filippov(&s, &traj, opts.guard_tol, 2e3)
            })
        }),
        ("step halving is fourth order", || {
            property((0.5f64..2.0, prop::bool::ANY, 0.05f64..1.0, -1.0f64..1.0, -1.0f64..1.0), |(a, slide, r, s0, u)| {
                let a = if slide { -a } else { a };
                let s = ramp2d(a);
                let data = ControlData::constant_input(dvector![-r, s0], dvector![u], 4);
                let h = 0.02;
                let coarse = integrate_filippov(&s, &data, 2.0, &FilippovOptions::with_step(h)).unwrap();
                let fine = integrate_filippov(&s, &data, 2.0, &FilippovOptions::with_step(h / 2.0)).unwrap();
                let diff = (coarse.final_state() - fine.final_state()).norm();
                prop_assert!(diff <= 100.0 * h.powi(4) + 1e-8, "{diff:e}");
                Ok(())
            })
        }),
    ]
}

fn smooth_checks() -> Vec<Check> {
    vec![("determinism and lipschitz flow", || {
        property(
            (random_data(2, 1, 20), random_data(2, 1, 20), 0.02f64..0.5, prop::bool::ANY),
            |(data, dir, eps, rk4)| {
                let f = RegularizedField::new(sys(examples::curved_test_system()), eps).unwrap();
                let disc = Discretization::new(1.0, 21, if rk4 { Scheme::Rk4 } else { Scheme::Euler }).unwrap();
                let a = integrate_smooth(&f, &data, &disc).unwrap();
                prop_assert_eq!(&a, &integrate_smooth(&f, &data, &disc).unwrap());
                let delta = data.difference(&dir);
                let lam = 1e-6;
                let moved = (flow_endpoint(&f, &data.shifted(&delta, lam), &disc).unwrap() - a.final_state()).norm();
                let slope = forward_sensitivity(&f, &data, &delta, &disc).unwrap().norm();
                prop_assert!(moved <= 2.0 * slope * lam + 1e-9, "{moved:e} vs {:e}", slope * lam);
                Ok(())
            },
        )
    })]
}

fn sensitivity_checks() -> Vec<Check> {
    vec![
        ("duality and linearity", || {
            property(
                (random_data(2, 1, 15), random_data(2, 1, 15), random_data(2, 1, 15), -2.0f64..2.0, -2.0f64..2.0, 0.02f64..0.5),
                |(data, d1, d2, a, b, eps)| {
                    let f = RegularizedField::new(sys(examples::curved_test_system()), eps).unwrap();
                    let disc = Discretization::new(1.5, 16, Scheme::Rk4).unwrap();
                    let cost = CostFunctional::terminal(|x| x[0] * x[0] - x[1], |x| dvector![2.0 * x[0], -1.0]);
                    let (d1, d2) = (data.difference(&d1), data.difference(&d2));
                    let bundle = adjoint_gradient(&f, &data, &cost, &disc).unwrap();
                    let fwd = forward_directional_derivative(&f, &data, &d1, &cost, &disc).unwrap();
                    prop_assert!((bundle.gradient.dot(&d1) - fwd).abs() <= 1e-10 * (1.0 + bundle.value.abs()));
                    let combo = d1.scale(a).add(&d2.scale(b));
                    let (l1, l2) = (bundle.gradient.dot(&d1), bundle.gradient.dot(&d2));
                    let lc = forward_directional_derivative(&f, &data, &combo, &cost, &disc).unwrap();
                    prop_assert!((lc - a * l1 - b * l2).abs() <= 1e-10 * (1.0 + (a * l1).abs() + (b * l2).abs()));
                    Ok(())
                },
            )
        }),
        ("gradients on every builtin", || {
            property(
                (prop::sample::select(examples::BUILTIN_NAMES.to_vec()), prop::collection::vec(-1.0f64..1.0, 4 + 6), 0.1f64..1.0),
                |(name, vals, eps)| {
                    let s = examples::builtin(name).unwrap();
                    let (n, m) = (s.state_dim(), s.input_dim());
                    let x0 = DVector::from_fn(n, |i, _| vals[i]);
                    let inputs = (0..5).map(|k| DVector::from_element(m, vals[4 + k])).collect();
                    let data = ControlData::new(x0, inputs);
                    let w = DVector::from_fn(n, |i, _| 1.0 + i as f64);
                    let w2 = w.clone();
                    let cost = CostFunctional::terminal(move |x| w.dot(x) + 0.5 * x.norm_squared(), move |x| &w2 + x);
                    let f = RegularizedField::new(s, eps).unwrap();
                    let disc = Discretization::new(0.5, 6, Scheme::Rk4).unwrap();
                    let adj = adjoint_gradient(&f, &data, &cost, &disc).unwrap().gradient.to_flat();
                    let fd = finite_difference_gradient(&f, &data, &cost, &disc, None).unwrap().to_flat();
                    for (a, b) in adj.iter().zip(&fd) {
                        prop_assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3), "{name}: {a} vs {b}");
                    }
                    Ok(())
                },
            )
        }),
    ]
}

fn optimizer_checks() -> Vec<Check> {
    vec![
        ("feasible descent and theta", || {
            property(
                (prop::collection::vec(-1.0f64..1.0, 10), 0.2f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
                |(us, bound, t0, t1)| {
                    let f = RegularizedField::new(sys(examples::curved_test_system()), 0.1).unwrap();
                    let cost = CostFunctional::terminal(
                        move |x| (x[0] - t0).powi(2) + (x[1] - t1).powi(2),
                        move |x| dvector![2.0 * (x[0] - t0), 2.0 * (x[1] - t1)],
                    );
                    let data = ControlData::new(dvector![0.0, 0.0], us.iter().map(|u| dvector![u.clamp(-bound, bound)]).collect())
                        .with_input_bounds(BoxBounds::uniform(1, -bound, bound).unwrap())
                        .with_x0_bounds(BoxBounds::uniform(2, -0.5, 0.5).unwrap());
                    let disc = Discretization::euler(1.0, 11).unwrap();
                    let opts = SolverOptions { max_iter: 25, ..SolverOptions::default() };
                    let r = solve_fixed_epsilon(&f, &data, &cost, &disc, &opts).unwrap();
                    prop_assert!(r.final_data.is_feasible());
                    prop_assert!(r.cost_history.windows(2).all(|w| w[1] < w[0]));
                    prop_assert!(r.theta_history.iter().all(|t| *t <= 0.0));
                    if r.termination == Termination::ThetaTol {
                        prop_assert!(r.theta.abs() <= opts.theta_tol);
                    }
                    Ok(())
                },
            )
        }),
        ("scale coherence", || {
            property((prop::collection::vec(-1.0f64..1.0, 8), 0.05f64..20.0), |(us, c)| {
                let f = RegularizedField::new(sys(examples::crossing1d()), 0.1).unwrap();
                let base = CostFunctional::terminal(|x| (x[0] - 0.7).powi(2), |x| dvector![2.0 * (x[0] - 0.7)]);
                let scaled = base.scaled(c);
                let data = ControlData::new(dvector![-0.5], us.iter().map(|u| dvector![*u]).collect())
                    .with_input_bounds(BoxBounds::uniform(1, -1.0, 1.0).unwrap())
                    .frozen_x0();
                let disc = Discretization::euler(1.0, 9).unwrap();
                let one = SolverOptions { max_iter: 1, ..SolverOptions::default() };
                let ga = adjoint_gradient(&f, &data, &base, &disc).unwrap();
                let gb = adjoint_gradient(&f, &data, &scaled, &disc).unwrap();
                let d = ga.gradient.scale(c).add(&gb.gradient.scale(-1.0)).norm();
                prop_assert!(d <= 1e-12 * (1.0 + gb.gradient.norm()));
                let a = solve_fixed_epsilon(&f, &data, &base, &disc, &one).unwrap();
                let b = solve_fixed_epsilon(&f, &data, &scaled, &disc, &SolverOptions { initial_step: 1.0 / c, ..one }).unwrap();
                prop_assert!((b.theta - c * a.theta).abs() <= 1e-9 * (1.0 + b.theta.abs()));
                let gap = a.final_data.difference(&b.final_data).norm();
                prop_assert!(gap <= 1e-9, "first accepted steps differ by {gap:e}");
                Ok(())
            })
        }),
    ]
}

fn convergence_checks() -> Vec<Check> {
    vec![
        ("slope fit self-test", || {
            property((1e-3f64..1e3, 2usize..8), |(c, k)| {
                let eps: Vec<f64> = (0..k).map(|i| 10f64.powf(-1.0 - 0.5 * i as f64)).collect();
                let errs: Vec<f64> = eps.iter().map(|e| c * e).collect();
                let fit = fit_log_log(&eps, &errs).unwrap();
                prop_assert!((fit.slope - 1.0).abs() <= 1e-6);
                Ok(())
            })
        }),
        ("monotone refinement, determinism", || {
            let data = ControlData::constant_input(dvector![-1.0], dvector![0.0], 1);
            let opts = TrajectoryStudyOptions::new(2.0);
            let a = trajectory_rate_study(sys(examples::sliding1d()), &data, &opts).map_err(|e| e.to_string())?;
            let b = trajectory_rate_study(sys(examples::sliding1d()), &data, &opts).map_err(|e| e.to_string())?;
            if a.epsilons != default_epsilons() || !a.errors.windows(2).all(|w| w[1] < w[0]) {
                return Err(format!("errors not strictly decreasing: {:?}", a.errors));
            }
            if a.errors.iter().zip(&b.errors).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Err("repeated study differs".into());
            }
            Ok(())
        }),
    ]
}

fn hopper_checks() -> Vec<Check> {
    vec![
        ("guard labels and flight energy", || {
            property(prop::collection::vec(-10.0f64..10.0, 18), |us| {
                let s = HopperSystem::new(HopperParams::default()).unwrap();
                let data = ControlData::new(dvector![0.65, 0.0, 0.75, 0.0], us.iter().map(|u| dvector![*u]).collect());
                let traj = integrate_filippov(&s, &data, 1.8, &FilippovOptions::with_step(1e-2)).unwrap();
                let tol = 1e-9;
                for (g, m) in traj.guard_values.iter().zip(&traj.modes) {
                    prop_assert!(*g <= tol || *m == ModeLabel::D2);
                    prop_assert!(*g >= -tol || *m == ModeLabel::D1);
                }
                let energy = |x: &DVector<f64>| 0.5 * x[1] * x[1] + 9.81 * x[0];
                for i in 0..traj.len() - 1 {
                    if traj.modes[i] == ModeLabel::D2 && traj.modes[i + 1] == ModeLabel::D2 {
                        let h = traj.times[i + 1] - traj.times[i];
                        prop_assert!((energy(&traj.states[i + 1]) - energy(&traj.states[i])).abs() <= 1e-6 * h.max(1e-6));
                    }
                }
                Ok(())
            })
        }),
        ("optimized inputs stay boxed", || {
            property(prop::collection::vec(-10.0f64..10.0, 180), |us| {
                let task = HopperTask::default();
                let problem = Problem::new(sys(HopperSystem::new(HopperParams::default()).unwrap()), &hopper_cost(&task).unwrap());
                let mut data = task.initial_data().unwrap();
                for (u, v) in data.inputs.iter_mut().zip(&us) {
                    u[0] = *v;
                }
                let field = problem.field(task.epsilon, Arc::new(make_quintic_transition())).unwrap();
                let opts = SolverOptions { max_iter: 2, ..SolverOptions::default() };
                let r = solve_fixed_epsilon(&field, &problem.lift(&data).unwrap(), problem.cost(), &task.discretization().unwrap(), &opts).unwrap();
                prop_assert!(r.final_data.inputs.iter().all(|u| (-10.0..=10.0).contains(&u[0])));
                Ok(())
            })
        }),
        ("standing equilibrium", || {
            let task = HopperTask::default();
            let s = sys(HopperSystem::new(HopperParams::default()).unwrap());
            for eps in [1e-2, 1e-3] {
                let f = RegularizedField::new(s.clone(), eps).unwrap();
                let states = discrete_states(&f, &task.initial_data().unwrap(), &task.discretization().unwrap()).unwrap();
                let dev = states.iter().map(|x| x.iter().zip(task.x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
                if dev > 1e-3 {
                    return Err(format!("eps {eps}: deviation {dev}"));
                }
            }
            Ok(())
        }),
    ]
}

fn cli_checks() -> Vec<Check> {
    vec![
        ("csv round trip", || {
            property(prop::collection::vec((-1e6f64..1e6, -1e-3f64..1e-3, -20.0f64..20.0), 2..30), |vals| {
                let k = vals.len();
                let traj = Trajectory {
                    times: (0..k).map(|i| i as f64 / 7.0).collect(),
                    states: vals.iter().map(|(a, b, _)| dvector![*a, *b]).collect(),
                    inputs: vals.iter().take(k - 1).map(|(_, _, u)| dvector![*u]).collect(),
                    guard_values: vals.iter().map(|(a, _, _)| *a).collect(),
                    modes: vals.iter().map(|(a, _, _)| if *a < 0.0 { ModeLabel::D1 } else { ModeLabel::D2 }).collect(),
                    events: vec![],
                    input_dim: 1,
                };
                let text = traj.to_csv_string().unwrap();
                prop_assert_eq!(Trajectory::read_csv(text.as_bytes()).unwrap().to_csv_string().unwrap(), text);
                Ok(())
            })
        }),
        ("config echo", || {
            property(
                (prop::sample::select(examples::BUILTIN_NAMES.to_vec()), 1e-3f64..0.5, -1.0f64..1.0, prop::sample::select(vec![11usize, 21, 181])),
                |(name, eps, u, n)| {
                    let t = if name == "hopper" { 1.8 } else { 1.0 };
                    let text = format!(r#"{{"system": "{name}", "epsilon": {eps}, "u_init": [{u}], "horizon": {{"T": {t}, "N": {n}}}}}"#);
                    let r = Config::from_json(&text).unwrap().resolve();
                    if name == "hopper" && n != 181 {
                        prop_assert!(r.is_err());
                        return Ok(());
                    }
                    let r = r.unwrap();
                    let echo = r.config_json();
                    for key in ["horizon", "x0", "epsilon", "u_init", "step", "guard_tol", "cost", "solver", "study"] {
                        prop_assert!(!echo[key].is_null(), "{key} not materialized");
                    }
                    let again = Config::from_json(&echo.to_string()).unwrap().resolve().unwrap();
                    prop_assert_eq!(again.config, r.config);
                    Ok(())
                },
            )
        }),
    ]
}

#[test]
fn property_suites() {
    let start = Instant::now();
    let modules: Vec<(&str, Vec<Check>)> = vec![
        ("pws-core", pws_core_checks()),
        ("filippov", filippov_checks()),
        ("smooth", smooth_checks()),
        ("sensitivity", sensitivity_checks()),
        ("optimizer", optimizer_checks()),
        ("convergence", convergence_checks()),
        ("hopper", hopper_checks()),
        ("cli", cli_checks()),
    ];
    let jobs: Vec<(&str, &str, CheckFn)> = modules
        .iter()
        .flat_map(|(m, checks)| checks.iter().map(move |(name, f)| (*m, *name, *f)))
        .collect();
    let results: Vec<(String, Result<(), String>)> = jobs
        .par_iter()
        .map(|(m, name, f)| (format!("{m}: {name}"), f()))
        .collect();
    let elapsed = start.elapsed();
    let failed: Vec<&(String, Result<(), String>)> = results.iter().filter(|(_, r)| r.is_err()).collect();
    let pass = failed.is_empty() && elapsed.as_secs_f64() < 120.0;
    report(
        8,
        "property suites",
        pass,
        elapsed,
        &format!("{}/{} properties green, {CASES} cases each", results.len() - failed.len(), results.len()),
    );
    for (name, r) in &failed {
        note(&format!("{name}: {}", r.as_ref().unwrap_err()));
    }
    assert!(pass);
}
