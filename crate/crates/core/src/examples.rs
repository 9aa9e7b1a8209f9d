//! Built-in example systems.
//!
//! These are the small systems with known analytic behavior that the
//! simulators, derivative code and convergence studies are checked against.
//! The hopper lives in its own module.

use std::sync::Arc;

use nalgebra::{dvector, DMatrix, DVector};

use crate::hopper::{HopperParams, HopperSystem};
use crate::system::{FieldJacobians, FnSystem, MatField, PiecewiseSmoothSystem};

fn constant(rows: usize, cols: usize, data: &[f64]) -> MatField {
    let m = DMatrix::from_row_slice(rows, cols, data);
    Arc::new(move |_, _| m.clone())
}

fn unit_guard(n: usize) -> impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync {
    move |_| {
        let mut e = DVector::zeros(n);
        e[0] = 1.0;
        e
    }
}

/// `f1 = +1`, `f2 = -1`, `g = x`: both fields push into the surface, so
/// trajectories reaching `x = 0` slide (and stay) there.
pub fn sliding1d() -> FnSystem {
    FnSystem::new(
        "sliding1d",
        1,
        1,
        |_, _| dvector![1.0],
        |_, _| dvector![-1.0],
        |x| x[0],
        unit_guard(1),
    )
    .expect("valid dimensions")
    .with_jacobians(FieldJacobians {
        f1_x: constant(1, 1, &[0.0]),
        f2_x: constant(1, 1, &[0.0]),
        f1_u: constant(1, 1, &[0.0]),
        f2_u: constant(1, 1, &[0.0]),
    })
}

/// `f1 = 1 + u`, `f2 = 2 + u`, `g = x`: transversal crossing with a speed-up.
/// At the nominal input `u = 0` the fields are the constants 1 and 2.
pub fn crossing1d() -> FnSystem {
    FnSystem::new(
        "crossing1d",
        1,
        1,
        |_, u| dvector![1.0 + u[0]],
        |_, u| dvector![2.0 + u[0]],
        |x| x[0],
        unit_guard(1),
    )
    .expect("valid dimensions")
    .with_jacobians(FieldJacobians {
        f1_x: constant(1, 1, &[0.0]),
        f2_x: constant(1, 1, &[0.0]),
        f1_u: constant(1, 1, &[1.0]),
        f2_u: constant(1, 1, &[1.0]),
    })
}

/// `f1 = f2 = 1 + u`: no discontinuity at all.
pub fn identical1d() -> FnSystem {
    FnSystem::new(
        "identical1d",
        1,
        1,
        |_, u| dvector![1.0 + u[0]],
        |_, u| dvector![1.0 + u[0]],
        |x| x[0],
        unit_guard(1),
    )
    .expect("valid dimensions")
    .with_jacobians(FieldJacobians {
        f1_x: constant(1, 1, &[0.0]),
        f2_x: constant(1, 1, &[0.0]),
        f1_u: constant(1, 1, &[1.0]),
        f2_u: constant(1, 1, &[1.0]),
    })
}

/// Scalar integrator `x' = u` in both modes.
pub fn integrator1d() -> FnSystem {
    FnSystem::new(
        "integrator1d",
        1,
        1,
        |_, u| dvector![u[0]],
        |_, u| dvector![u[0]],
        |x| x[0] - 10.0,
        unit_guard(1),
    )
    .expect("valid dimensions")
    .with_jacobians(FieldJacobians {
        f1_x: constant(1, 1, &[0.0]),
        f2_x: constant(1, 1, &[0.0]),
        f1_u: constant(1, 1, &[1.0]),
        f2_u: constant(1, 1, &[1.0]),
    })
}

/// Matrices of the linear example `x' = A x + B u` (same in both modes).
pub fn linear2d_matrices() -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.3]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
    )
}

pub fn linear2d() -> FnSystem {
    let (a, b) = linear2d_matrices();
    let (a1, b1) = (a.clone(), b.clone());
    let (a2, b2) = (a.clone(), b.clone());
    FnSystem::new(
        "linear2d",
        2,
        1,
        move |x, u| &a1 * x + &b1 * u,
        move |x, u| &a2 * x + &b2 * u,
        |x| x[0] - 5.0,
        unit_guard(2),
    )
    .expect("valid dimensions")
    .with_jacobians(FieldJacobians {
        f1_x: Arc::new({
            let a = a.clone();
            move |_, _| a.clone()
        }),
        f2_x: Arc::new(move |_, _| a.clone()),
        f1_u: constant(2, 1, &[0.0, 1.0]),
        f2_u: constant(2, 1, &[0.0, 1.0]),
    })
}

/// Parabolic graze: `x1' = x2`, `x2' = -1 + u` below the guard `g = x1`.
/// Started at `(-d^2/2, d)` with `u = 0`, the first coordinate touches zero
/// tangentially at `t = d` and falls back.
pub fn grazing2d() -> FnSystem {
    FnSystem::new(
        "grazing2d",
        2,
        1,
        |x, u| dvector![x[1], -1.0 + u[0]],
        |x, u| dvector![x[1] - 1.0, -1.0 + u[0]],
        |x| x[0],
        unit_guard(2),
    )
    .expect("valid dimensions")
    .with_jacobians(FieldJacobians {
        f1_x: constant(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        f2_x: constant(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        f1_u: constant(2, 1, &[0.0, 1.0]),
        f2_u: constant(2, 1, &[0.0, 1.0]),
    })
}

/// Nonlinear test system with a curved guard `g = x0 + 0.2 x1^2 - 0.5`.
pub fn curved_test_system() -> FnSystem {
    FnSystem::new(
        "curved2d",
        2,
        1,
        |x, u| dvector![x[1] + u[0], -x[0].sin() + 0.5 * u[0] * x[1]],
        |x, u| dvector![-x[1] + 0.3 * u[0], x[0].cos() - u[0]],
        |x| x[0] + 0.2 * x[1] * x[1] - 0.5,
        |x| dvector![1.0, 0.4 * x[1]],
    )
    .expect("valid dimensions")
    .with_jacobians(FieldJacobians {
        f1_x: Arc::new(|x, u| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -x[0].cos(), 0.5 * u[0]])),
        f2_x: Arc::new(|x, _| DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -x[0].sin(), 0.0])),
        f1_u: Arc::new(|x, _| DMatrix::from_row_slice(2, 1, &[1.0, 0.5 * x[1]])),
        f2_u: constant(2, 1, &[0.3, -1.0]),
    })
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: &[&str] = &[
    "sliding1d",
    "crossing1d",
    "grazing2d",
    "hopper",
    "identical1d",
    "integrator1d",
    "linear2d",
    "curved2d",
];

/// Looks up a built-in system by name. The hopper uses default parameters.
pub fn builtin(name: &str) -> Option<Arc<dyn PiecewiseSmoothSystem>> {
    let sys: Arc<dyn PiecewiseSmoothSystem> = match name {
        "sliding1d" => Arc::new(sliding1d()),
        "crossing1d" => Arc::new(crossing1d()),
        "grazing2d" => Arc::new(grazing2d()),
        "identical1d" => Arc::new(identical1d()),
        "integrator1d" => Arc::new(integrator1d()),
        "linear2d" => Arc::new(linear2d()),
        "curved2d" => Arc::new(curved_test_system()),
        "hopper" => Arc::new(HopperSystem::new(HopperParams::default()).expect("default params are valid")),
        _ => return None,
    };
    Some(sys)
}
