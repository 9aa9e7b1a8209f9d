//! Bimodal piecewise-smooth control systems.
//!
//! A system is a pair of smooth vector fields `f1`, `f2` on the state space
//! together with a scalar guard `g`. The first field is active where
//! `g(x) < 0`, the second where `g(x) > 0`; the zero set of `g` is the
//! switching surface on which the dynamics are undefined.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{PwsError, Result};

/// Which of the two smooth fields is meant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    /// `f1`, active on `g < 0`.
    One,
    /// `f2`, active on `g > 0`.
    Two,
}

/// Where a system's Jacobians come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum JacobianSource {
    Analytic,
    /// Central differences. Convergence studies lose accuracy with these.
    FiniteDifference,
}

/// A bimodal piecewise-smooth control system with Jacobians.
///
/// Implementations must be pure: the same arguments always give the same
/// result, and nothing is mutated.
pub trait PiecewiseSmoothSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn f1(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn f2(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn guard(&self, x: &DVector<f64>) -> f64;
    fn guard_grad(&self, x: &DVector<f64>) -> DVector<f64>;

    fn jac_f1_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn jac_f2_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn jac_f1_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn jac_f2_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;

    fn jacobian_source(&self) -> JacobianSource {
        JacobianSource::Analytic
    }

    fn name(&self) -> &str {
        "custom"
    }

    fn field(&self, mode: Mode, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match mode {
            Mode::One => self.f1(x, u),
            Mode::Two => self.f2(x, u),
        }
    }

    fn field_jac_x(&self, mode: Mode, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match mode {
            Mode::One => self.jac_f1_x(x, u),
            Mode::Two => self.jac_f2_x(x, u),
        }
    }

    fn field_jac_u(&self, mode: Mode, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match mode {
            Mode::One => self.jac_f1_u(x, u),
            Mode::Two => self.jac_f2_u(x, u),
        }
    }
}

/// Lie derivatives `(grad g . f1, grad g . f2)` at `(x, u)`.
pub fn lie_derivatives(
    sys: &dyn PiecewiseSmoothSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (f64, f64) {
    let dg = sys.guard_grad(x);
    (dg.dot(&sys.f1(x, u)), dg.dot(&sys.f2(x, u)))
}

pub(crate) fn check_dims(sys: &dyn PiecewiseSmoothSystem, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    if x.len() != sys.state_dim() {
        return Err(PwsError::Dimension(format!(
            "state has length {}, system expects {}",
            x.len(),
            sys.state_dim()
        )));
    }
    if u.len() != sys.input_dim() {
        return Err(PwsError::Dimension(format!(
            "input has length {}, system expects {}",
            u.len(),
            sys.input_dim()
        )));
    }
    Ok(())
}

/// Central-difference Jacobian of `f` at `z`, step `h_rel * max(1, |z|)`.
pub fn central_difference_jacobian<F>(f: F, z: &DVector<f64>, out_dim: usize, h_rel: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let h = h_rel * z.norm().max(1.0);
    let mut jac = DMatrix::zeros(out_dim, z.len());
    let mut zp = z.clone();
    for j in 0..z.len() {
        zp[j] = z[j] + h;
        let fp = f(&zp);
        zp[j] = z[j] - h;
        let fm = f(&zp);
        zp[j] = z[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

type VecField = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatField = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type Scalar = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type Gradient = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Analytic Jacobians for an [`FnSystem`].
#[derive(Clone)]
pub struct FieldJacobians {
    pub f1_x: MatField,
    pub f2_x: MatField,
    pub f1_u: MatField,
    pub f2_u: MatField,
}

/// A system assembled from closures, for use through the library API.
#[derive(Clone)]
pub struct FnSystem {
    name: String,
    n: usize,
    m: usize,
    f1: VecField,
    f2: VecField,
    g: Scalar,
    grad_g: Gradient,
    jacobians: Option<FieldJacobians>,
}

const FD_JACOBIAN_STEP: f64 = 1e-6;

impl FnSystem {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        input_dim: usize,
        f1: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        f2: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        guard: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        guard_grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if state_dim == 0 || input_dim == 0 {
            return Err(PwsError::InvalidArgument(
                "state and input dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            n: state_dim,
            m: input_dim,
            f1: Arc::new(f1),
            f2: Arc::new(f2),
            g: Arc::new(guard),
            grad_g: Arc::new(guard_grad),
            jacobians: None,
        })
    }

    pub fn with_jacobians(mut self, jacobians: FieldJacobians) -> Self {
        self.jacobians = Some(jacobians);
        self
    }

    fn fd_x(&self, f: &VecField, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        central_difference_jacobian(|z| f(z, u), x, self.n, FD_JACOBIAN_STEP)
    }

    fn fd_u(&self, f: &VecField, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        central_difference_jacobian(|v| f(x, v), u, self.n, FD_JACOBIAN_STEP)
    }
}

impl PiecewiseSmoothSystem for FnSystem {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn f1(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f1)(x, u)
    }
    fn f2(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f2)(x, u)
    }
    fn guard(&self, x: &DVector<f64>) -> f64 {
        (self.g)(x)
    }
    fn guard_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad_g)(x)
    }
    fn jac_f1_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.jacobians {
            Some(j) => (j.f1_x)(x, u),
            None => self.fd_x(&self.f1, x, u),
        }
    }
    fn jac_f2_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.jacobians {
            Some(j) => (j.f2_x)(x, u),
            None => self.fd_x(&self.f2, x, u),
        }
    }
    fn jac_f1_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.jacobians {
            Some(j) => (j.f1_u)(x, u),
            None => self.fd_u(&self.f1, x, u),
        }
    }
    fn jac_f2_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.jacobians {
            Some(j) => (j.f2_u)(x, u),
            None => self.fd_u(&self.f2, x, u),
        }
    }
    fn jacobian_source(&self) -> JacobianSource {
        if self.jacobians.is_some() {
            JacobianSource::Analytic
        } else {
            JacobianSource::FiniteDifference
        }
    }
    fn name(&self) -> &str {
        &self.name
    }
}

/// Worst relative mismatch between supplied Jacobians and central differences.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct JacobianCheck {
    pub max_relative_error: f64,
    pub passed: bool,
}

fn relative_mismatch(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(1.0);
    (a - b).amax() / scale
}

/// Compares every supplied Jacobian (and the guard gradient) against central
/// differences at the given sample points.
pub fn check_jacobians(
    sys: &dyn PiecewiseSmoothSystem,
    samples: &[(DVector<f64>, DVector<f64>)],
    rel_tol: f64,
) -> Result<JacobianCheck> {
    let n = sys.state_dim();
    let mut worst: f64 = 0.0;
    for (x, u) in samples {
        check_dims(sys, x, u)?;
        for mode in [Mode::One, Mode::Two] {
            let fd_x = central_difference_jacobian(|z| sys.field(mode, z, u), x, n, FD_JACOBIAN_STEP);
            worst = worst.max(relative_mismatch(&sys.field_jac_x(mode, x, u), &fd_x));
            let fd_u = central_difference_jacobian(|v| sys.field(mode, x, v), u, n, FD_JACOBIAN_STEP);
            worst = worst.max(relative_mismatch(&sys.field_jac_u(mode, x, u), &fd_u));
        }
        let fd_g = central_difference_jacobian(|z| DVector::from_element(1, sys.guard(z)), x, 1, FD_JACOBIAN_STEP);
        let grad = DMatrix::from_row_slice(1, n, sys.guard_grad(x).as_slice());
        worst = worst.max(relative_mismatch(&grad, &fd_g));
    }
    Ok(JacobianCheck {
        max_relative_error: worst,
        passed: worst <= rel_tol,
    })
}
