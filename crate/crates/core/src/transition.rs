//! Transition functions used to blend the two fields across the guard.

/// A monotone ramp from 0 (for `a <= -1`) to 1 (for `a >= 1`) with Lipschitz
/// first and second derivatives.
pub trait TransitionFunction: Send + Sync + std::fmt::Debug {
    fn eval(&self, a: f64) -> f64;
    fn deriv(&self, a: f64) -> f64;
    fn deriv2(&self, a: f64) -> f64;
}

/// Odd-symmetric quintic smoothstep,
/// `1/2 + 15/16 a - 5/8 a^3 + 3/16 a^5` on `[-1, 1]`, clamped outside.
///
/// Its derivative factors as `15/16 (1 - a^2)^2`, so both the first and
/// second derivatives vanish at `a = +-1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuinticTransition;

pub fn make_quintic_transition() -> QuinticTransition {
    QuinticTransition
}

impl TransitionFunction for QuinticTransition {
    fn eval(&self, a: f64) -> f64 {
        if a <= -1.0 {
            0.0
        } else if a >= 1.0 {
            1.0
        } else {
            let a2 = a * a;
            0.5 + a * (15.0 / 16.0 + a2 * (-5.0 / 8.0 + a2 * (3.0 / 16.0)))
        }
    }

    fn deriv(&self, a: f64) -> f64 {
        if a.abs() >= 1.0 {
            0.0
        } else {
            let w = 1.0 - a * a;
            15.0 / 16.0 * w * w
        }
    }

    fn deriv2(&self, a: f64) -> f64 {
        if a.abs() >= 1.0 {
            0.0
        } else {
            -15.0 / 4.0 * a * (1.0 - a * a)
        }
    }
}
