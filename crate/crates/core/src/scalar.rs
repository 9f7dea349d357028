//! Floating point abstraction shared by the numeric modules.
//!
//! Model math, gate math, optimizers and aggregators are written once over
//! [`Scalar`] and instantiated at `f32` for simulation (the wire format is
//! 32-bit) and at `f64` for shadow evaluation in gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by every numeric routine in the crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`. Panics never; out-of-range maps to ±inf.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic sigmoid evaluated without overflow for large |x|.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + exp(x))`, stable for both tails.
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::of(20.0) {
        x + (-x).exp()
    } else if x < S::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`: `ln(exp(y) - 1)`.
pub fn inverse_softplus<S: Scalar>(y: S) -> S {
    if y > S::of(20.0) {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit<S: Scalar>(p: S) -> S {
    (p / (S::one() - p)).ln()
}

/// `σ(x)·(1 − σ(x))` computed as `σ(x)·σ(−x)` to avoid cancellation.
pub fn sigmoid_slope<S: Scalar>(x: S) -> S {
    sigmoid(x) * sigmoid(-x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_tails_are_finite() {
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-6f64, 0.01, 0.4954049, 1.0, 5.0, 30.0] {
            let v = inverse_softplus(y);
            assert!((softplus(v) - y).abs() <= 1e-12 * y.max(1.0), "y={y}");
        }
    }

    #[test]
    fn slope_matches_naive_in_the_middle() {
        let x = 0.3f64;
        let s = sigmoid(x);
        assert!((sigmoid_slope(x) - s * (1.0 - s)).abs() < 1e-15);
        assert!(sigmoid_slope(40.0f32) > 0.0);
    }
}
