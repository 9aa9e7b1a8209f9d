//! Derivatives of the discrete relaxed cost.
//!
//! Everything here differentiates the exact step map of [`crate::smooth`],
//! so forward sensitivities, the adjoint gradient and finite differences of
//! the discrete cost agree up to rounding (and truncation, for the latter).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{serde_vec, ControlData, ControlVector};
use crate::cost::CostFunctional;
use crate::error::{PwsError, Result};
use crate::regularized::RegularizedField;
use crate::smooth::{discrete_states, step_jacobians, Discretization, GridPolicy};

/// Cost value, gradient over `(x0, inputs)` and the discrete adjoint path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityBundle {
    pub value: f64,
    pub gradient: ControlVector,
    #[serde(with = "serde_vec::list")]
    pub adjoint_path: Vec<DVector<f64>>,
    pub directional: Option<f64>,
}

impl SensitivityBundle {
    pub fn grad_x0(&self) -> &DVector<f64> {
        &self.gradient.x0
    }

    pub fn grad_u(&self) -> &[DVector<f64>] {
        &self.gradient.inputs
    }
}

struct Linearization {
    states: Vec<DVector<f64>>,
    jacobians: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

fn linearize(field: &RegularizedField, data: &ControlData, disc: &Discretization) -> Result<Linearization> {
    let states = discrete_states(field, data, disc)?;
    let h = disc.step_size();
    let jacobians = data
        .inputs
        .iter()
        .enumerate()
        .map(|(k, u)| step_jacobians(field, disc.scheme, &states[k], u, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(Linearization { states, jacobians })
}

fn check_direction(data: &ControlData, delta: &ControlVector) -> Result<()> {
    if delta.x0.len() != data.x0.len()
        || delta.inputs.len() != data.inputs.len()
        || delta.inputs.iter().zip(&data.inputs).any(|(d, u)| d.len() != u.len())
    {
        return Err(PwsError::Dimension("direction does not match the control data".into()));
    }
    Ok(())
}

fn no_running(cost: &CostFunctional) -> Result<()> {
    if cost.has_running() {
        return Err(PwsError::InvalidArgument(
            "running cost must be folded into the state before differentiation".into(),
        ));
    }
    Ok(())
}

/// State variations `dx_0 .. dx_{N-1}` along the nominal discrete trajectory.
pub fn forward_sensitivity_path(
    field: &RegularizedField,
    data: &ControlData,
    delta: &ControlVector,
    disc: &Discretization,
) -> Result<Vec<DVector<f64>>> {
    check_direction(data, delta)?;
    let lin = linearize(field, data, disc)?;
    let mut path = Vec::with_capacity(disc.gridpoints);
    path.push(delta.x0.clone());
    for ((mx, mu), du) in lin.jacobians.iter().zip(&delta.inputs) {
        let dx = path.last().expect("non-empty");
        path.push(mx * dx + mu * du);
    }
    if path.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
        return Err(PwsError::Numerical("forward sensitivity".into()));
    }
    Ok(path)
}

/// Variation of the final state in direction `delta`.
pub fn forward_sensitivity(
    field: &RegularizedField,
    data: &ControlData,
    delta: &ControlVector,
    disc: &Discretization,
) -> Result<DVector<f64>> {
    let mut path = forward_sensitivity_path(field, data, delta, disc)?;
    Ok(path.pop().expect("at least two gridpoints"))
}

/// The directional derivative assembled from forward sensitivities and the
/// cost-term gradients. Independent of the adjoint recursion.
pub fn forward_directional_derivative(
    field: &RegularizedField,
    data: &ControlData,
    delta: &ControlVector,
    cost: &CostFunctional,
    disc: &Discretization,
) -> Result<f64> {
    no_running(cost)?;
    let terms = cost.resolve(disc)?;
    let states = discrete_states(field, data, disc)?;
    let path = forward_sensitivity_path(field, data, delta, disc)?;
    Ok(terms.iter().map(|(k, t)| (t.gradient)(&states[*k]).dot(&path[*k])).sum())
}

pub fn cost_value(field: &RegularizedField, data: &ControlData, cost: &CostFunctional, disc: &Discretization) -> Result<f64> {
    let states = discrete_states(field, data, disc)?;
    cost.evaluate(&states, disc)
}

/// Value and gradient of the discrete cost by the backward adjoint recursion.
/// The gradient with respect to `x0` is reported even when `x0` is frozen.
pub fn adjoint_gradient(
    field: &RegularizedField,
    data: &ControlData,
    cost: &CostFunctional,
    disc: &Discretization,
) -> Result<SensitivityBundle> {
    no_running(cost)?;
    let terms = cost.resolve(disc)?;
    let lin = linearize(field, data, disc)?;
    let value = cost.evaluate(&lin.states, disc)?;

    let n = data.x0.len();
    let steps = disc.steps();
    let mut forcing = vec![DVector::<f64>::zeros(n); steps + 1];
    for (k, t) in &terms {
        forcing[*k] += (t.gradient)(&lin.states[*k]);
    }

    let mut adjoint = vec![DVector::<f64>::zeros(n); steps + 1];
    adjoint[steps] = forcing[steps].clone();
    let mut grad_u = vec![DVector::<f64>::zeros(data.input_dim()); steps];
    for k in (0..steps).rev() {
        let (mx, mu) = &lin.jacobians[k];
        grad_u[k] = mu.tr_mul(&adjoint[k + 1]);
        adjoint[k] = mx.tr_mul(&adjoint[k + 1]) + &forcing[k];
    }
    if adjoint.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(PwsError::Numerical("adjoint recursion".into()));
    }
    Ok(SensitivityBundle {
        value,
        gradient: ControlVector {
            x0: adjoint[0].clone(),
            inputs: grad_u,
        },
        adjoint_path: adjoint,
        directional: None,
    })
}

/// `DL^eps(xi; delta)` as the inner product of the adjoint gradient with `delta`.
pub fn directional_derivative(
    field: &RegularizedField,
    data: &ControlData,
    delta: &ControlVector,
    cost: &CostFunctional,
    disc: &Discretization,
) -> Result<f64> {
    check_direction(data, delta)?;
    Ok(adjoint_gradient(field, data, cost, disc)?.gradient.dot(delta))
}

/// Default finite-difference step for a coordinate of magnitude `c`.
pub fn default_fd_step(c: f64) -> f64 {
    1e-5 * c.abs().max(1.0)
}

fn coord_mut(d: &mut ControlData, index: usize, n: usize, m: usize) -> &mut f64 {
    if index < n {
        &mut d.x0[index]
    } else {
        let j = index - n;
        &mut d.inputs[j / m][j % m]
    }
}

/// Central difference of the cost along one flat coordinate
/// (layout `[x0, u_0, u_1, ...]`). `step` of `None` uses [`default_fd_step`].
pub fn finite_difference_partial(
    field: &RegularizedField,
    data: &ControlData,
    cost: &CostFunctional,
    disc: &Discretization,
    index: usize,
    step: Option<f64>,
) -> Result<f64> {
    let n = data.x0.len();
    let m = data.input_dim();
    let total = n + m * data.intervals();
    if index >= total {
        return Err(PwsError::Dimension(format!("coordinate {index} out of {total}")));
    }
    let mut plus = data.clone();
    let mut minus = data.clone();
    let base = *coord_mut(&mut plus, index, n, m);
    let lambda = step.unwrap_or_else(|| default_fd_step(base));
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(PwsError::InvalidArgument("finite-difference step must be positive".into()));
    }
    *coord_mut(&mut plus, index, n, m) = base + lambda;
    *coord_mut(&mut minus, index, n, m) = base - lambda;
    let lp = cost_value(field, &plus, cost, disc)?;
    let lm = cost_value(field, &minus, cost, disc)?;
    Ok((lp - lm) / (2.0 * lambda))
}

/// Central-difference gradient over every coordinate of `(x0, inputs)`.
pub fn finite_difference_gradient(
    field: &RegularizedField,
    data: &ControlData,
    cost: &CostFunctional,
    disc: &Discretization,
    step: Option<f64>,
) -> Result<ControlVector> {
    let n = data.x0.len();
    let m = data.input_dim();
    let total = n + m * data.intervals();
    let flat = (0..total)
        .into_par_iter()
        .map(|i| finite_difference_partial(field, data, cost, disc, i, step))
        .collect::<Result<Vec<f64>>>()?;
    ControlVector::from_flat(&flat, n, m)
}

/// Norm of a gradient in the `R^n x L2([0, T])` metric: input components
/// are weighted by `1 / h`, so the value does not grow with grid refinement.
pub fn gradient_norm(grad: &ControlVector, step_size: f64) -> f64 {
    let inputs: f64 = grad.inputs.iter().map(|g| g.norm_squared()).sum();
    (grad.x0.norm_squared() + inputs / step_size).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundednessRow {
    pub epsilon: f64,
    pub grad_norm: f64,
    pub dl_value: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundednessTable {
    pub rows: Vec<BoundednessRow>,
    /// Largest over smallest gradient norm (infinite if some norm is zero).
    pub ratio: f64,
}

impl BoundednessTable {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epsilon", "grad_norm", "dl_value"])?;
        for r in &self.rows {
            out.write_record([
                crate::trajectory::fmt_float(r.epsilon),
                crate::trajectory::fmt_float(r.grad_norm),
                r.dl_value.map(crate::trajectory::fmt_float).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Gradient norms of the relaxed cost for each band width. The input grid of
/// `data` is refined per `grid`; the optional direction is refined with it.
pub fn derivative_boundedness_probe(
    field: &RegularizedField,
    epsilons: &[f64],
    data: &ControlData,
    cost: &CostFunctional,
    grid: &GridPolicy,
    direction: Option<&ControlVector>,
) -> Result<BoundednessTable> {
    if let Some(d) = direction {
        check_direction(data, d)?;
    }
    let rows = epsilons
        .par_iter()
        .map(|&eps| {
            let f = field.with_epsilon(eps)?;
            let (disc, factor) = grid.discretize(eps, data.intervals())?;
            let fine = data.refine(factor);
            let bundle = adjoint_gradient(&f, &fine, cost, &disc)?;
            let dl_value = direction.map(|d| bundle.gradient.dot(&d.refine(factor)));
            Ok(BoundednessRow {
                epsilon: eps,
                grad_norm: gradient_norm(&bundle.gradient, disc.step_size()),
                dl_value,
                value: bundle.value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max = rows.iter().map(|r| r.grad_norm).fold(0.0, f64::max);
    let min = rows.iter().map(|r| r.grad_norm).fold(f64::INFINITY, f64::min);
    let ratio = if rows.is_empty() {
        1.0
    } else if min > 0.0 {
        max / min
    } else if max == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(BoundednessTable { rows, ratio })
}
