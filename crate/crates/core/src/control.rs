//! Decision variables: initial state plus a zero-order-hold input grid.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{PwsError, Result};

/// Serde adapters that write vectors as plain JSON arrays.
pub mod serde_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }

    pub mod list {
        use nalgebra::DVector;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(v: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
            let rows: Vec<&[f64]> = v.iter().map(|r| r.as_slice()).collect();
            rows.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
            let rows = Vec::<Vec<f64>>::deserialize(d)?;
            Ok(rows.into_iter().map(DVector::from_vec).collect())
        }
    }
}

/// Componentwise box `lo <= v <= hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    #[serde(with = "serde_vec")]
    pub lo: DVector<f64>,
    #[serde(with = "serde_vec")]
    pub hi: DVector<f64>,
}

impl BoxBounds {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(PwsError::Dimension("box bounds of different lengths".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l.partial_cmp(h).is_none_or(|o| o.is_gt())) {
            return Err(PwsError::InvalidArgument("box bound has lo > hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, lo), DVector::from_element(dim, hi))
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| v[i].clamp(self.lo[i], self.hi[i]))
    }

    pub fn contains(&self, v: &DVector<f64>) -> bool {
        v.iter().enumerate().all(|(i, c)| *c >= self.lo[i] && *c <= self.hi[i])
    }
}

/// Initial state and piecewise-constant inputs, with optional boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlData {
    #[serde(with = "serde_vec")]
    pub x0: DVector<f64>,
    #[serde(with = "serde_vec::list")]
    pub inputs: Vec<DVector<f64>>,
    #[serde(default)]
    pub x0_bounds: Option<BoxBounds>,
    #[serde(default)]
    pub input_bounds: Option<BoxBounds>,
    /// Keep `x0` fixed during optimization.
    #[serde(default)]
    pub freeze_x0: bool,
}

impl ControlData {
    pub fn new(x0: DVector<f64>, inputs: Vec<DVector<f64>>) -> Self {
        Self {
            x0,
            inputs,
            x0_bounds: None,
            input_bounds: None,
            freeze_x0: false,
        }
    }

    /// `intervals` copies of the same input.
    pub fn constant_input(x0: DVector<f64>, u: DVector<f64>, intervals: usize) -> Self {
        Self::new(x0, vec![u; intervals])
    }

    pub fn with_input_bounds(mut self, b: BoxBounds) -> Self {
        self.input_bounds = Some(b);
        self
    }

    pub fn with_x0_bounds(mut self, b: BoxBounds) -> Self {
        self.x0_bounds = Some(b);
        self
    }

    pub fn frozen_x0(mut self) -> Self {
        self.freeze_x0 = true;
        self
    }

    pub fn intervals(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    pub fn validate(&self, state_dim: usize, input_dim: usize) -> Result<()> {
        if self.x0.len() != state_dim {
            return Err(PwsError::Dimension(format!(
                "x0 has length {}, expected {state_dim}",
                self.x0.len()
            )));
        }
        if self.inputs.is_empty() {
            return Err(PwsError::InvalidArgument("input grid is empty".into()));
        }
        if let Some(u) = self.inputs.iter().find(|u| u.len() != input_dim) {
            return Err(PwsError::Dimension(format!(
                "input of length {}, expected {input_dim}",
                u.len()
            )));
        }
        if !self.x0.iter().all(|c| c.is_finite()) {
            return Err(PwsError::Numerical("initial state".into()));
        }
        if let Some(b) = &self.x0_bounds {
            if b.dim() != state_dim {
                return Err(PwsError::Dimension("x0 bounds".into()));
            }
        }
        if let Some(b) = &self.input_bounds {
            if b.dim() != input_dim {
                return Err(PwsError::Dimension("input bounds".into()));
            }
        }
        Ok(())
    }

    /// Repeats every input `factor` times: the same zero-order-hold signal
    /// on a grid `factor` times finer.
    pub fn refine(&self, factor: usize) -> Self {
        let mut out = self.clone();
        out.inputs = self
            .inputs
            .iter()
            .flat_map(|u| std::iter::repeat_n(u.clone(), factor.max(1)))
            .collect();
        out
    }

    /// Componentwise clamp onto the boxes (a frozen `x0` is left alone).
    pub fn project(&self) -> Self {
        let mut out = self.clone();
        if let (Some(b), false) = (&self.x0_bounds, self.freeze_x0) {
            out.x0 = b.clamp(&self.x0);
        }
        if let Some(b) = &self.input_bounds {
            out.inputs = self.inputs.iter().map(|u| b.clamp(u)).collect();
        }
        out
    }

    pub fn is_feasible(&self) -> bool {
        let x_ok = self.x0_bounds.as_ref().is_none_or(|b| b.contains(&self.x0));
        let u_ok = self
            .input_bounds
            .as_ref()
            .is_none_or(|b| self.inputs.iter().all(|u| b.contains(u)));
        x_ok && u_ok
    }

    /// `self + s * dir`, without projection.
    pub fn shifted(&self, dir: &ControlVector, s: f64) -> Self {
        let mut out = self.clone();
        out.x0 += &dir.x0 * s;
        for (u, d) in out.inputs.iter_mut().zip(&dir.inputs) {
            *u += d * s;
        }
        out
    }

    /// `self - other` as a direction.
    pub fn difference(&self, other: &ControlData) -> ControlVector {
        ControlVector {
            x0: &self.x0 - &other.x0,
            inputs: self.inputs.iter().zip(&other.inputs).map(|(a, b)| a - b).collect(),
        }
    }
}

/// A tangent vector (direction or gradient) over `(x0, inputs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    #[serde(with = "serde_vec")]
    pub x0: DVector<f64>,
    #[serde(with = "serde_vec::list")]
    pub inputs: Vec<DVector<f64>>,
}

impl ControlVector {
    pub fn zeros(state_dim: usize, input_dim: usize, intervals: usize) -> Self {
        Self {
            x0: DVector::zeros(state_dim),
            inputs: vec![DVector::zeros(input_dim); intervals],
        }
    }

    pub fn zeros_like(data: &ControlData) -> Self {
        Self::zeros(data.x0.len(), data.input_dim(), data.intervals())
    }

    pub fn dot(&self, other: &ControlVector) -> f64 {
        self.x0.dot(&other.x0)
            + self
                .inputs
                .iter()
                .zip(&other.inputs)
                .map(|(a, b)| a.dot(b))
                .sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            x0: &self.x0 * c,
            inputs: self.inputs.iter().map(|u| u * c).collect(),
        }
    }

    pub fn add(&self, other: &ControlVector) -> Self {
        Self {
            x0: &self.x0 + &other.x0,
            inputs: self.inputs.iter().zip(&other.inputs).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn refine(&self, factor: usize) -> Self {
        Self {
            x0: self.x0.clone(),
            inputs: self
                .inputs
                .iter()
                .flat_map(|u| std::iter::repeat_n(u.clone(), factor.max(1)))
                .collect(),
        }
    }

    /// Flat layout `[x0, u_0, u_1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.x0.as_slice().to_vec();
        for u in &self.inputs {
            v.extend_from_slice(u.as_slice());
        }
        v
    }

    pub fn from_flat(flat: &[f64], state_dim: usize, input_dim: usize) -> Result<Self> {
        if flat.len() < state_dim || !(flat.len() - state_dim).is_multiple_of(input_dim.max(1)) {
            return Err(PwsError::Dimension("flat control vector length".into()));
        }
        let x0 = DVector::from_column_slice(&flat[..state_dim]);
        let inputs = flat[state_dim..]
            .chunks(input_dim)
            .map(DVector::from_column_slice)
            .collect();
        Ok(Self { x0, inputs })
    }

    pub fn len(&self) -> usize {
        self.x0.len() + self.inputs.iter().map(|u| u.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
