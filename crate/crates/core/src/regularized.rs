//! The epsilon-relaxation of a piecewise-smooth system.
//!
//! Inside the band `|g(x)| < eps` the two fields are blended,
//! `f_eps = (1 - phi(g/eps)) f1 + phi(g/eps) f2`; outside it the relaxed
//! field coincides with `f1` or `f2` exactly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_finite_mat, ensure_finite_vec, PwsError, Result};
use crate::system::{check_dims, PiecewiseSmoothSystem};
use crate::transition::{QuinticTransition, TransitionFunction};

#[derive(Clone)]
pub struct RegularizedField {
    system: Arc<dyn PiecewiseSmoothSystem>,
    phi: Arc<dyn TransitionFunction>,
    epsilon: f64,
}

impl std::fmt::Debug for RegularizedField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegularizedField")
            .field("system", &self.system.name())
            .field("epsilon", &self.epsilon)
            .finish()
    }
}

/// Blend weight and its slope at one state.
#[derive(Debug, Clone, Copy)]
struct Blend {
    weight: f64,
    slope: f64,
}

impl RegularizedField {
    /// Relaxation with the default quintic transition.
    pub fn new(system: Arc<dyn PiecewiseSmoothSystem>, epsilon: f64) -> Result<Self> {
        Self::with_transition(system, Arc::new(QuinticTransition), epsilon)
    }

    pub fn with_transition(
        system: Arc<dyn PiecewiseSmoothSystem>,
        phi: Arc<dyn TransitionFunction>,
        epsilon: f64,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(PwsError::InvalidArgument(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        Ok(Self { system, phi, epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn system(&self) -> &Arc<dyn PiecewiseSmoothSystem> {
        &self.system
    }

    pub fn transition(&self) -> &Arc<dyn TransitionFunction> {
        &self.phi
    }

    /// Same system and transition, different width.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::with_transition(self.system.clone(), self.phi.clone(), epsilon)
    }

    fn blend(&self, x: &DVector<f64>) -> Result<Blend> {
        let guard = self.system.guard(x);
        if !guard.is_finite() {
            return Err(PwsError::Numerical("guard evaluation".into()));
        }
        if guard.abs() < self.epsilon {
            let grad = self.system.guard_grad(x);
            if grad.norm() == 0.0 {
                return Err(PwsError::DegenerateGuard { guard });
            }
        }
        let a = guard / self.epsilon;
        Ok(Blend {
            weight: self.phi.eval(a),
            slope: self.phi.deriv(a),
        })
    }

    /// Blend weight `phi(g(x)/eps)`.
    pub fn weight(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.blend(x)?.weight)
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dims(self.system.as_ref(), x, u)?;
        let b = self.blend(x)?;
        let out = if b.weight == 0.0 {
            self.system.f1(x, u)
        } else if b.weight == 1.0 {
            self.system.f2(x, u)
        } else {
            self.system.f1(x, u) * (1.0 - b.weight) + self.system.f2(x, u) * b.weight
        };
        ensure_finite_vec(&out, "regularized field")?;
        Ok(out)
    }

    /// `(1 - phi) df1/dx + phi df2/dx + (phi'/eps) (f2 - f1) grad g^T`.
    pub fn jac_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dims(self.system.as_ref(), x, u)?;
        let b = self.blend(x)?;
        let sys = &self.system;
        let mut out = if b.weight == 0.0 {
            sys.jac_f1_x(x, u)
        } else if b.weight == 1.0 {
            sys.jac_f2_x(x, u)
        } else {
            sys.jac_f1_x(x, u) * (1.0 - b.weight) + sys.jac_f2_x(x, u) * b.weight
        };
        if b.slope != 0.0 {
            let jump = sys.f2(x, u) - sys.f1(x, u);
            let grad = sys.guard_grad(x);
            out += (jump * grad.transpose()) * (b.slope / self.epsilon);
        }
        ensure_finite_mat(&out, "regularized state Jacobian")?;
        Ok(out)
    }

    /// `(1 - phi) df1/du + phi df2/du`.
    pub fn jac_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dims(self.system.as_ref(), x, u)?;
        let b = self.blend(x)?;
        let sys = &self.system;
        let out = if b.weight == 0.0 {
            sys.jac_f1_u(x, u)
        } else if b.weight == 1.0 {
            sys.jac_f2_u(x, u)
        } else {
            sys.jac_f1_u(x, u) * (1.0 - b.weight) + sys.jac_f2_u(x, u) * b.weight
        };
        ensure_finite_mat(&out, "regularized input Jacobian")?;
        Ok(out)
    }
}
