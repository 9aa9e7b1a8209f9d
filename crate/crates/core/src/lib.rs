//! Optimal control of bimodal piecewise-smooth systems through smooth
//! relaxations of the switching surface.
//!
//! A system is a pair of vector fields `f1` (active where `g(x) < 0`) and
//! `f2` (active where `g(x) > 0`). The crate simulates the Filippov solution
//! of such a system, blends the two fields across a band of width `epsilon`
//! around the surface, differentiates costs of the blended system, and
//! optimizes over initial state and piecewise-constant inputs.

pub mod cli;
pub mod control;
pub mod convergence;
pub mod cost;
pub mod error;
pub mod examples;
pub mod filippov;
pub mod hopper;
pub mod optimizer;
pub mod regularized;
pub mod sensitivity;
pub mod smooth;
pub mod system;
pub mod trajectory;
pub mod transition;

pub use control::{BoxBounds, ControlData, ControlVector};
pub use cost::{CostFunctional, CostTime};
pub use error::{PwsError, Result};
pub use filippov::{audit_differentiability, integrate_filippov, DifferentiabilityReport, FilippovOptions};
pub use regularized::RegularizedField;
pub use smooth::{integrate_smooth, Discretization, Scheme};
pub use system::{Mode, PiecewiseSmoothSystem};
pub use trajectory::{ModeLabel, Trajectory};
pub use transition::{make_quintic_transition, QuinticTransition, TransitionFunction};
