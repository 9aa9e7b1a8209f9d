//! Fixed-step integration of the relaxed system.
//!
//! `N` gridpoints means `N - 1` equal steps of length `h = T / (N - 1)`, with
//! one input per step. The step map and its Jacobians live here so that the
//! sensitivity code differentiates exactly the map that is integrated.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::ControlData;
use crate::error::{ensure_finite_vec, PwsError, Result};
use crate::regularized::RegularizedField;
use crate::trajectory::{ModeLabel, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Euler,
    Rk4,
}

impl std::str::FromStr for Scheme {
    type Err = PwsError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Scheme::Euler),
            "rk4" => Ok(Scheme::Rk4),
            other => Err(PwsError::InvalidArgument(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Uniform time grid plus integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub horizon: f64,
    pub gridpoints: usize,
    pub scheme: Scheme,
}

impl Discretization {
    pub fn new(horizon: f64, gridpoints: usize, scheme: Scheme) -> Result<Self> {
        if gridpoints < 2 {
            return Err(PwsError::InvalidArgument(format!("need at least 2 gridpoints, got {gridpoints}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(PwsError::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { horizon, gridpoints, scheme })
    }

    pub fn euler(horizon: f64, gridpoints: usize) -> Result<Self> {
        Self::new(horizon, gridpoints, Scheme::Euler)
    }

    pub fn steps(&self) -> usize {
        self.gridpoints - 1
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps() {
            self.horizon
        } else {
            k as f64 * self.step_size()
        }
    }

    /// Grid index of time `t`, if `t` is (to rounding) a gridpoint.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let r = t / self.step_size();
        let k = r.round();
        if (r - k).abs() <= 1e-9 * r.abs().max(1.0) && k >= 0.0 && k as usize <= self.steps() {
            Some(k as usize)
        } else {
            None
        }
    }

    pub(crate) fn check_data(&self, field: &RegularizedField, data: &ControlData) -> Result<()> {
        let sys = field.system();
        data.validate(sys.state_dim(), sys.input_dim())?;
        if data.intervals() != self.steps() {
            return Err(PwsError::Dimension(format!(
                "{} gridpoints need {} input intervals, got {}",
                self.gridpoints,
                self.steps(),
                data.intervals()
            )));
        }
        Ok(())
    }
}

/// How fine a grid to use when the same zero-order-hold input is simulated
/// at several band widths. The input grid is refined by an integer factor so
/// that the input signal is unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPolicy {
    pub horizon: f64,
    pub scheme: Scheme,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// Exactly this many gridpoints for every epsilon.
    Gridpoints(usize),
    /// Step no longer than `epsilon / steps_per_epsilon`.
    PerEpsilon { steps_per_epsilon: f64 },
}

impl GridPolicy {
    /// Discretization for band width `epsilon` and input refinement factor.
    pub fn discretize(&self, epsilon: f64, intervals: usize) -> Result<(Discretization, usize)> {
        if intervals == 0 {
            return Err(PwsError::InvalidArgument("input grid is empty".into()));
        }
        let factor = match self.resolution {
            Resolution::Gridpoints(n) => {
                if n < 2 || (n - 1) % intervals != 0 {
                    return Err(PwsError::InvalidArgument(format!(
                        "{n} gridpoints do not refine {intervals} input intervals"
                    )));
                }
                (n - 1) / intervals
            }
            Resolution::PerEpsilon { steps_per_epsilon } => {
                if steps_per_epsilon.is_nan() || steps_per_epsilon <= 0.0 {
                    return Err(PwsError::InvalidArgument("steps_per_epsilon must be positive".into()));
                }
                let h_max = epsilon / steps_per_epsilon;
                (self.horizon / (intervals as f64 * h_max)).ceil().max(1.0) as usize
            }
        };
        let disc = Discretization::new(self.horizon, intervals * factor + 1, self.scheme)?;
        Ok((disc, factor))
    }
}

/// One step of the discrete flow.
pub fn step(field: &RegularizedField, scheme: Scheme, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let out = match scheme {
        Scheme::Euler => x + field.eval(x, u)? * h,
        Scheme::Rk4 => {
            let k1 = field.eval(x, u)?;
            let k2 = field.eval(&(x + &k1 * (0.5 * h)), u)?;
            let k3 = field.eval(&(x + &k2 * (0.5 * h)), u)?;
            let k4 = field.eval(&(x + &k3 * h), u)?;
            x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
        }
    };
    ensure_finite_vec(&out, "smooth integration")?;
    Ok(out)
}

/// Jacobians `(d x_next / d x, d x_next / d u)` of [`step`].
pub fn step_jacobians(
    field: &RegularizedField,
    scheme: Scheme,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = x.len();
    let id = DMatrix::<f64>::identity(n, n);
    match scheme {
        Scheme::Euler => {
            let a = field.jac_x(x, u)?;
            let b = field.jac_u(x, u)?;
            Ok((id + a * h, b * h))
        }
        Scheme::Rk4 => {
            let k1 = field.eval(x, u)?;
            let y2 = x + &k1 * (0.5 * h);
            let k2 = field.eval(&y2, u)?;
            let y3 = x + &k2 * (0.5 * h);
            let k3 = field.eval(&y3, u)?;
            let y4 = x + &k3 * h;

            let (a1, b1) = (field.jac_x(x, u)?, field.jac_u(x, u)?);
            let (a2, b2) = (field.jac_x(&y2, u)?, field.jac_u(&y2, u)?);
            let (a3, b3) = (field.jac_x(&y3, u)?, field.jac_u(&y3, u)?);
            let (a4, b4) = (field.jac_x(&y4, u)?, field.jac_u(&y4, u)?);

            let dk1x = a1;
            let dk2x = &a2 * (&id + &dk1x * (0.5 * h));
            let dk3x = &a3 * (&id + &dk2x * (0.5 * h));
            let dk4x = &a4 * (&id + &dk3x * h);
            let mx = &id + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (h / 6.0);

            let dk1u = b1;
            let dk2u = b2 + &a2 * &dk1u * (0.5 * h);
            let dk3u = b3 + &a3 * &dk2u * (0.5 * h);
            let dk4u = b4 + &a4 * &dk3u * h;
            let mu = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * (h / 6.0);
            Ok((mx, mu))
        }
    }
}

/// States `x_0 .. x_{N-1}` of the discrete flow.
pub fn discrete_states(field: &RegularizedField, data: &ControlData, disc: &Discretization) -> Result<Vec<DVector<f64>>> {
    disc.check_data(field, data)?;
    let h = disc.step_size();
    let mut states = Vec::with_capacity(disc.gridpoints);
    states.push(data.x0.clone());
    for u in &data.inputs {
        let next = step(field, disc.scheme, states.last().expect("non-empty"), u, h)?;
        states.push(next);
    }
    Ok(states)
}

/// Integrates the relaxed system and labels samples by the guard: `D1` below
/// the band, `D2` above it, `Band` inside.
pub fn integrate_smooth(field: &RegularizedField, data: &ControlData, disc: &Discretization) -> Result<Trajectory> {
    let states = discrete_states(field, data, disc)?;
    let sys = field.system();
    let eps = field.epsilon();
    let guard_values: Vec<f64> = states.iter().map(|x| sys.guard(x)).collect();
    let modes = guard_values
        .iter()
        .map(|g| {
            if *g <= -eps {
                ModeLabel::D1
            } else if *g >= eps {
                ModeLabel::D2
            } else {
                ModeLabel::Band
            }
        })
        .collect();
    Ok(Trajectory {
        times: (0..disc.gridpoints).map(|k| disc.time(k)).collect(),
        states,
        inputs: data.inputs.clone(),
        guard_values,
        modes,
        events: vec![],
        input_dim: sys.input_dim(),
    })
}

pub fn flow_endpoint(field: &RegularizedField, data: &ControlData, disc: &Discretization) -> Result<DVector<f64>> {
    let mut states = discrete_states(field, data, disc)?;
    Ok(states.pop().expect("at least two gridpoints"))
}
