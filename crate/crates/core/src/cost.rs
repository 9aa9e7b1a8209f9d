//! Cost functionals on the discrete flow.
//!
//! A cost is a sum of state penalties evaluated at gridpoints (the final
//! time or fixed intermediate times) plus an optional running cost. The
//! running cost is folded into the state by appending an accumulator
//! `w' = r(x, u)`, after which only state penalties remain.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{PwsError, Result};
use crate::smooth::Discretization;
use crate::system::{central_difference_jacobian, JacobianSource, PiecewiseSmoothSystem};

pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type StageFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
type StageGrad = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostTime {
    Terminal,
    At(f64),
}

#[derive(Clone)]
pub struct CostTerm {
    pub time: CostTime,
    pub value: ScalarFn,
    pub gradient: GradFn,
}

/// `r(x, u)` with its partial gradients.
#[derive(Clone)]
pub struct RunningCost {
    pub value: StageFn,
    pub grad_x: StageGrad,
    pub grad_u: StageGrad,
}

#[derive(Clone, Default)]
pub struct CostFunctional {
    terms: Vec<CostTerm>,
    running: Option<RunningCost>,
}

impl std::fmt::Debug for CostFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CostFunctional")
            .field("terms", &self.terms.iter().map(|t| t.time).collect::<Vec<_>>())
            .field("running", &self.running.is_some())
            .finish()
    }
}

impl CostFunctional {
    /// A terminal cost `l(x(T))`.
    pub fn terminal(
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self::default().with_term(CostTime::Terminal, value, gradient)
    }

    pub fn with_term(
        mut self,
        time: CostTime,
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.terms.push(CostTerm {
            time,
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        });
        self
    }

    pub fn with_running(
        mut self,
        value: impl Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static,
        grad_x: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        grad_u: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.running = Some(RunningCost {
            value: Arc::new(value),
            grad_x: Arc::new(grad_x),
            grad_u: Arc::new(grad_u),
        });
        self
    }

    /// `c * self`.
    pub fn scaled(&self, c: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let (v, g) = (t.value.clone(), t.gradient.clone());
                CostTerm {
                    time: t.time,
                    value: Arc::new(move |x| c * v(x)),
                    gradient: Arc::new(move |x| g(x) * c),
                }
            })
            .collect();
        let running = self.running.as_ref().map(|r| {
            let (v, gx, gu) = (r.value.clone(), r.grad_x.clone(), r.grad_u.clone());
            RunningCost {
                value: Arc::new(move |x, u| c * v(x, u)),
                grad_x: Arc::new(move |x, u| gx(x, u) * c),
                grad_u: Arc::new(move |x, u| gu(x, u) * c),
            }
        });
        Self { terms, running }
    }

    pub fn terms(&self) -> &[CostTerm] {
        &self.terms
    }

    pub fn has_running(&self) -> bool {
        self.running.is_some()
    }

    /// Grid index of every term. Fails if an intermediate time is off-grid.
    pub fn resolve(&self, disc: &Discretization) -> Result<Vec<(usize, &CostTerm)>> {
        self.terms
            .iter()
            .map(|t| match t.time {
                CostTime::Terminal => Ok((disc.steps(), t)),
                CostTime::At(time) => disc
                    .index_of(time)
                    .map(|k| (k, t))
                    .ok_or(PwsError::TaskInfeasibleGrid { time }),
            })
            .collect()
    }

    /// Cost of a discrete state sequence `x_0 .. x_{N-1}`. Requires the
    /// running cost to have been folded in with [`CostFunctional::augment`].
    pub fn evaluate(&self, states: &[DVector<f64>], disc: &Discretization) -> Result<f64> {
        if self.running.is_some() {
            return Err(PwsError::InvalidArgument(
                "running cost must be folded into the state before evaluation".into(),
            ));
        }
        let mut total = 0.0;
        for (k, term) in self.resolve(disc)? {
            total += (term.value)(&states[k]);
        }
        if !total.is_finite() {
            return Err(PwsError::Numerical("cost".into()));
        }
        Ok(total)
    }

    /// Largest relative mismatch between term gradients and central differences at `x`.
    pub fn gradient_check(&self, x: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let fd = central_difference_jacobian(|z| DVector::from_element(1, (t.value)(z)), x, 1, 1e-6);
                let g = (t.gradient)(x);
                let scale = g.amax().max(1.0);
                (fd.transpose().column(0) - g).amax() / scale
            })
            .fold(0.0, f64::max)
    }

    /// Appends the running-cost accumulator to the system state and returns
    /// the equivalent cost made of state penalties only. Without a running
    /// cost the inputs are returned unchanged.
    pub fn augment(&self, system: Arc<dyn PiecewiseSmoothSystem>) -> (Arc<dyn PiecewiseSmoothSystem>, CostFunctional) {
        let Some(running) = self.running.clone() else {
            return (system, self.clone());
        };
        let n = system.state_dim();
        let mut terms: Vec<CostTerm> = self
            .terms
            .iter()
            .map(|t| {
                let (v, g) = (t.value.clone(), t.gradient.clone());
                CostTerm {
                    time: t.time,
                    value: Arc::new(move |z: &DVector<f64>| v(&z.rows(0, n).into_owned())),
                    gradient: Arc::new(move |z: &DVector<f64>| {
                        let mut out = DVector::zeros(n + 1);
                        out.rows_mut(0, n).copy_from(&g(&z.rows(0, n).into_owned()));
                        out
                    }),
                }
            })
            .collect();
        terms.push(CostTerm {
            time: CostTime::Terminal,
            value: Arc::new(move |z: &DVector<f64>| z[n]),
            gradient: Arc::new(move |_: &DVector<f64>| {
                let mut e = DVector::zeros(n + 1);
                e[n] = 1.0;
                e
            }),
        });
        let aug = AugmentedSystem { inner: system, running };
        (Arc::new(aug), CostFunctional { terms, running: None })
    }
}

/// A system with an extra state integrating the running cost.
pub struct AugmentedSystem {
    inner: Arc<dyn PiecewiseSmoothSystem>,
    running: RunningCost,
}

impl AugmentedSystem {
    fn split(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(0, self.inner.state_dim()).into_owned()
    }

    fn lift(&self, f: DVector<f64>, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = self.inner.state_dim();
        let mut out = DVector::zeros(n + 1);
        out.rows_mut(0, n).copy_from(&f);
        out[n] = (self.running.value)(x, u);
        out
    }

    fn lift_jac_x(&self, a: DMatrix<f64>, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n = self.inner.state_dim();
        let mut out = DMatrix::zeros(n + 1, n + 1);
        out.view_mut((0, 0), (n, n)).copy_from(&a);
        out.view_mut((n, 0), (1, n)).copy_from(&(self.running.grad_x)(x, u).transpose());
        out
    }

    fn lift_jac_u(&self, b: DMatrix<f64>, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n = self.inner.state_dim();
        let m = self.inner.input_dim();
        let mut out = DMatrix::zeros(n + 1, m);
        out.view_mut((0, 0), (n, m)).copy_from(&b);
        out.view_mut((n, 0), (1, m)).copy_from(&(self.running.grad_u)(x, u).transpose());
        out
    }
}

impl PiecewiseSmoothSystem for AugmentedSystem {
    fn state_dim(&self) -> usize {
        self.inner.state_dim() + 1
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn f1(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let x = self.split(z);
        self.lift(self.inner.f1(&x, u), &x, u)
    }
    fn f2(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let x = self.split(z);
        self.lift(self.inner.f2(&x, u), &x, u)
    }
    fn guard(&self, z: &DVector<f64>) -> f64 {
        self.inner.guard(&self.split(z))
    }
    fn guard_grad(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.inner.state_dim();
        let mut out = DVector::zeros(n + 1);
        out.rows_mut(0, n).copy_from(&self.inner.guard_grad(&self.split(z)));
        out
    }
    fn jac_f1_x(&self, z: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let x = self.split(z);
        self.lift_jac_x(self.inner.jac_f1_x(&x, u), &x, u)
    }
    fn jac_f2_x(&self, z: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let x = self.split(z);
        self.lift_jac_x(self.inner.jac_f2_x(&x, u), &x, u)
    }
    fn jac_f1_u(&self, z: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let x = self.split(z);
        self.lift_jac_u(self.inner.jac_f1_u(&x, u), &x, u)
    }
    fn jac_f2_u(&self, z: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let x = self.split(z);
        self.lift_jac_u(self.inner.jac_f2_u(&x, u), &x, u)
    }
    fn jacobian_source(&self) -> JacobianSource {
        self.inner.jacobian_source()
    }
    fn name(&self) -> &str {
        self.inner.name()
    }
}
