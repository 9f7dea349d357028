//! SGD, Adam and Adamax with explicit, serializable state.
//!
//! Clients use SGD for weights and Adamax for gate thresholds; the server
//! runs Adam (weights) and Adamax (thresholds) in ascent mode on
//! difference pseudo-gradients.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Provenance, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Hyper {
    /// Adam's published defaults with the given learning rate.
    pub fn with_lr(lr: f64) -> Self {
        Hyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct OptimizerState<S> {
    pub kind: OptimizerKind,
    pub hyper: Hyper,
    pub step_count: u64,
    /// First moment.
    pub m: Vec<S>,
    /// Second moment (Adam) or exponentially weighted infinity norm (Adamax).
    pub v: Vec<S>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(kind: OptimizerKind, hyper: Hyper, len: usize) -> Self {
        let moments = if kind == OptimizerKind::Sgd { 0 } else { len };
        OptimizerState {
            kind,
            hyper,
            step_count: 0,
            m: vec![S::zero(); moments],
            v: vec![S::zero(); moments],
        }
    }

    pub fn sgd(lr: f64, len: usize) -> Self {
        Self::new(OptimizerKind::Sgd, Hyper::with_lr(lr), len)
    }

    pub fn adam(lr: f64, len: usize) -> Self {
        Self::new(OptimizerKind::Adam, Hyper::with_lr(lr), len)
    }

    pub fn adamax(lr: f64, len: usize) -> Self {
        Self::new(OptimizerKind::Adamax, Hyper::with_lr(lr), len)
    }

    /// One update. With `ascent` the gradient is negated, i.e. the step
    /// maximizes instead of minimizing.
    pub fn step(&mut self, params: &mut [S], grad: &[S], ascent: bool) -> Result<()> {
        self.step_where(params, grad, ascent, None)
    }

    /// Like [`OptimizerState::step`] but coordinates with `active[i] == false`
    /// are left untouched, including their moments.
    pub fn step_masked(&mut self, params: &mut [S], grad: &[S], ascent: bool, active: &[bool]) -> Result<()> {
        if active.len() != params.len() {
            return Err(FedError::shape("optimizer mask", params.len(), active.len()));
        }
        self.step_where(params, grad, ascent, Some(active))
    }

    fn step_where(&mut self, params: &mut [S], grad: &[S], ascent: bool, active: Option<&[bool]>) -> Result<()> {
        if params.len() != grad.len() {
            return Err(FedError::shape("gradient", params.len(), grad.len()));
        }
        if self.kind != OptimizerKind::Sgd && self.m.len() != params.len() {
            return Err(FedError::shape("optimizer state", self.m.len(), params.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(FedError::NonFinite {
                what: "gradient",
                provenance: Provenance::default(),
            });
        }
        self.step_count += 1;
        let sign = if ascent { -S::one() } else { S::one() };
        let lr = S::of(self.hyper.lr);
        let (b1, b2, eps) = (S::of(self.hyper.beta1), S::of(self.hyper.beta2), S::of(self.hyper.eps));
        let t = self.step_count as i32;
        let on = |i: usize| active.is_none_or(|a| a[i]);
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
                    if on(i) {
                        *p -= lr * sign * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c1 = S::one() - b1.powi(t);
                let c2 = S::one() - b2.powi(t);
                for i in 0..params.len() {
                    if !on(i) {
                        continue;
                    }
                    let g = sign * grad[i];
                    self.m[i] = b1 * self.m[i] + (S::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (S::one() - b2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            OptimizerKind::Adamax => {
                let step = lr / (S::one() - b1.powi(t));
                for i in 0..params.len() {
                    if !on(i) {
                        continue;
                    }
                    let g = sign * grad[i];
                    self.m[i] = b1 * self.m[i] + (S::one() - b1) * g;
                    self.v[i] = (b2 * self.v[i]).max(g.abs());
                    params[i] -= step * self.m[i] / (self.v[i] + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sgd_example() {
        let mut opt = OptimizerState::<f64>::sgd(0.05, 1);
        let mut p = [1.0];
        opt.step(&mut p, &[0.2], false).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let mut opt = OptimizerState::<f64>::adam(0.001, 1);
        let mut p = [0.0];
        opt.step(&mut p, &[1.0], false).unwrap();
        let oracle = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - oracle).abs() < 1e-15);
    }

    #[test]
    fn ascent_flips_direction() {
        let mut opt = OptimizerState::<f64>::sgd(0.5, 1);
        let mut p = [0.0];
        opt.step(&mut p, &[1.0], true).unwrap();
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::Adamax] {
            let mut opt = OptimizerState::<f32>::new(kind, Hyper::with_lr(0.1), 3);
            let mut p = [1.0, -2.0, 0.5];
            opt.step(&mut p, &[0.0; 3], false).unwrap();
            assert_eq!(p, [1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn nan_gradient_is_reported() {
        let mut opt = OptimizerState::<f32>::adam(0.1, 2);
        let mut p = [0.0, 0.0];
        let err = opt.step(&mut p, &[0.0, f32::NAN], false).unwrap_err();
        let err = err.at(Some(3), Some(9), None);
        let msg = err.to_string();
        assert!(msg.contains("round 3") && msg.contains("client 9"), "{msg}");
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn masked_step_leaves_inactive_coordinates() {
        let mut opt = OptimizerState::<f64>::adam(0.1, 3);
        let mut p = [1.0, 2.0, 3.0];
        opt.step_masked(&mut p, &[1.0, 1.0, 1.0], true, &[true, false, true]).unwrap();
        assert_eq!(p[1], 2.0);
        assert_eq!(opt.m[1], 0.0);
        assert!(p[0] > 1.0 && p[2] > 3.0);
    }

    proptest! {
        #[test]
        fn first_step_magnitude_is_lr(mag in -3.0f64..6.0, neg in any::<bool>(), lr in 1e-4f64..1.0) {
            let g = if neg { -(10f64.powf(mag)) } else { 10f64.powf(mag) };
            for kind in [OptimizerKind::Adam, OptimizerKind::Adamax] {
                let mut opt = OptimizerState::<f64>::new(kind, Hyper::with_lr(lr), 1);
                let mut p = [0.0];
                opt.step(&mut p, &[g], false).unwrap();
                // deviation from lr comes only from eps in the denominator
                prop_assert!((p[0].abs() - lr).abs() <= lr * (1.01e-8 / g.abs() + 1e-12));
                prop_assert_eq!(p[0].signum(), -g.signum());
            }
        }

        #[test]
        fn state_round_trips_bit_exactly(grads in prop::collection::vec(-10.0f32..10.0, 1..6), steps in 1usize..4) {
            let mut opt = OptimizerState::<f32>::adamax(0.01, grads.len());
            let mut p = vec![0.0f32; grads.len()];
            for _ in 0..steps {
                opt.step(&mut p, &grads, false).unwrap();
            }
            let text = serde_json::to_string(&opt).unwrap();
            let back: OptimizerState<f32> = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back.step_count, opt.step_count);
            prop_assert_eq!(
                back.m.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                opt.m.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(
                back.v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                opt.v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
