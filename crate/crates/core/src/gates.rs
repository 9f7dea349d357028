//! Gate mathematics for structured spike-and-slab sparsity.
//!
//! Inclusion probabilities are tied to weight magnitudes: a group is on with
//! probability `σ((‖w_g‖ − τ_g)/T)`, where the threshold `τ_g = softplus(v_g)`
//! stays positive. Local training uses the hard-concrete relaxation of the
//! Bernoulli gates; uploads use its zero-temperature limit, which is exactly
//! binary.
//!
//! Weight norms are treated as constants by every derivative in this module,
//! so gate penalties shape the thresholds only.

use rand::Rng;

use crate::error::{FedError, Result};
use crate::scalar::{inverse_softplus, logit, sigmoid, sigmoid_slope, softplus, Scalar};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub const HC_BETA: f64 = 2.0 / 3.0;
pub const HC_GAMMA: f64 = -0.1;
pub const HC_ZETA: f64 = 1.1;

/// Per-group threshold pre-activations plus the shared temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState<S> {
    pub v: Vec<S>,
    pub temperature: S,
}

impl<S: Scalar> GateState<S> {
    pub fn new(v: Vec<S>, temperature: S) -> Result<Self> {
        if !(temperature > S::zero()) {
            return Err(FedError::InvalidArgument(format!(
                "gate temperature must be positive, got {temperature}"
            )));
        }
        Ok(GateState { v, temperature })
    }

    pub fn tau(&self) -> Vec<S> {
        self.v.iter().map(|&v| softplus(v)).collect()
    }

    pub fn logits(&self, norms: &[S]) -> Vec<S> {
        magnitude_logits(norms, &self.tau(), self.temperature)
    }

    pub fn probs(&self, norms: &[S]) -> Vec<S> {
        theta_from_magnitude(norms, &self.tau(), self.temperature)
    }
}

/// `(‖w_g‖ − τ_g)/T`, the log-odds of each gate.
pub fn magnitude_logits<S: Scalar>(norms: &[S], tau: &[S], temperature: S) -> Vec<S> {
    norms.iter().zip(tau).map(|(&n, &t)| (n - t) / temperature).collect()
}

pub fn theta_from_magnitude<S: Scalar>(norms: &[S], tau: &[S], temperature: S) -> Vec<S> {
    magnitude_logits(norms, tau, temperature).into_iter().map(sigmoid).collect()
}

/// `∂σ((n − softplus(v))/T)/∂v = −σ'(·)·σ(v)/T`, with the norm held fixed.
pub fn prob_slope_wrt_v<S: Scalar>(logits: &[S], v: &[S], temperature: S) -> Vec<S> {
    logits
        .iter()
        .zip(v)
        .map(|(&l, &v)| -sigmoid_slope(l) * sigmoid(v) / temperature)
        .collect()
}

/// Threshold pre-activations that make every group start at probability
/// `theta0`.
pub fn init_v_for_target<S: Scalar>(norms: &[S], theta0: f64, temperature: S) -> Result<Vec<S>> {
    if !(theta0 > 0.0 && theta0 < 1.0) {
        return Err(FedError::InvalidArgument(format!("theta0 must lie in (0,1), got {theta0}")));
    }
    let shift = temperature.as_f64() * logit(theta0);
    norms
        .iter()
        .enumerate()
        .map(|(g, &n)| {
            let tau = n.as_f64() - shift;
            if tau <= 0.0 {
                Err(FedError::InvalidArgument(format!(
                    "group {g} has norm {n}, too small for theta0 = {theta0} at T = {temperature}; \
                     use a larger initialization scale"
                )))
            } else {
                Ok(S::of(inverse_softplus(tau)))
            }
        })
        .collect()
}

/// `λ₀ = ½·ln(λ₂/λ)` from the slab precision `λ` and the relaxed spike
/// precision `λ₂`.
pub fn lambda0_from_precisions<S: Scalar>(lambda: S, lambda2: S) -> Result<S> {
    if !(lambda > S::zero() && lambda2 > S::zero()) {
        return Err(FedError::InvalidArgument(format!(
            "precisions must be positive, got lambda = {lambda}, lambda2 = {lambda2}"
        )));
    }
    Ok(S::of(0.5) * (lambda2 / lambda).ln())
}

/// Inverse of [`lambda0_from_precisions`]: `λ₂ = λ·exp(2λ₀)`.
pub fn lambda2_from_lambda0<S: Scalar>(lambda: S, lambda0: S) -> S {
    lambda * (S::of(2.0) * lambda0).exp()
}

pub fn l0_penalty<S: Scalar>(prob: &[S], lambda0: S) -> S {
    lambda0 * prob.iter().copied().sum::<S>()
}

fn clamp_prob<S: Scalar>(p: S) -> S {
    let eps = S::of(PROB_CLAMP);
    p.max(eps).min(S::one() - eps)
}

/// `Σ_j π_j ln θ_j + (1 − π_j) ln(1 − θ_j)`.
pub fn gate_cross_entropy<S: Scalar>(pi: &[S], theta: &[S]) -> S {
    pi.iter()
        .zip(theta)
        .map(|(&p, &t)| {
            let t = clamp_prob(t);
            p * t.ln() + (S::one() - p) * (S::one() - t).ln()
        })
        .sum()
}

/// `∂/∂π_j` of [`gate_cross_entropy`], i.e. `logit(θ_j)` after clamping.
pub fn gate_cross_entropy_slope<S: Scalar>(theta: &[S]) -> Vec<S> {
    theta.iter().map(|&t| logit(clamp_prob(t))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardConcreteParams<S> {
    pub log_alpha: Vec<S>,
    pub beta: S,
    pub gamma: S,
    pub zeta: S,
}

impl<S: Scalar> HardConcreteParams<S> {
    /// Standard stretch and temperature constants.
    pub fn with_defaults(log_alpha: Vec<S>) -> Self {
        HardConcreteParams {
            log_alpha,
            beta: S::of(HC_BETA),
            gamma: S::of(HC_GAMMA),
            zeta: S::of(HC_ZETA),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma < S::zero() && self.zeta > S::one() && self.beta > S::zero()) {
            return Err(FedError::InvalidArgument(format!(
                "hard-concrete needs gamma < 0 < 1 < zeta and beta > 0 (gamma={}, zeta={}, beta={})",
                self.gamma, self.zeta, self.beta
            )));
        }
        Ok(())
    }
}

fn logistic_noise<S: Scalar>(u: S) -> S {
    u.ln() - (S::one() - u).ln()
}

/// Gate values for the given uniform draws.
///
/// With `zero_temperature` the output is exactly 1 when
/// `ln u − ln(1 − u) + log_alpha > 0` and 0 otherwise (ties close the gate).
pub fn hard_concrete_sample<S: Scalar>(hc: &HardConcreteParams<S>, draws: &[S], zero_temperature: bool) -> Vec<S> {
    if zero_temperature {
        hc.log_alpha
            .iter()
            .zip(draws)
            .map(|(&la, &u)| if logistic_noise(u) + la > S::zero() { S::one() } else { S::zero() })
            .collect()
    } else {
        hard_concrete_sample_with_grad(hc, draws).0
    }
}

/// Relaxed samples together with `∂z/∂log_alpha` (zero where clamped).
pub fn hard_concrete_sample_with_grad<S: Scalar>(hc: &HardConcreteParams<S>, draws: &[S]) -> (Vec<S>, Vec<S>) {
    let span = hc.zeta - hc.gamma;
    hc.log_alpha
        .iter()
        .zip(draws)
        .map(|(&la, &u)| {
            let x = (logistic_noise(u) + la) / hc.beta;
            let s = sigmoid(x);
            let stretched = s * span + hc.gamma;
            if stretched <= S::zero() {
                (S::zero(), S::zero())
            } else if stretched >= S::one() {
                (S::one(), S::zero())
            } else {
                (stretched, span * sigmoid_slope(x) / hc.beta)
            }
        })
        .unzip()
}

/// `P(z > 0)` under the hard-concrete: `σ(log_alpha − β·ln(−γ/ζ))`.
pub fn hard_concrete_active_prob<S: Scalar>(hc: &HardConcreteParams<S>) -> Vec<S> {
    let shift = hc.beta * (-hc.gamma / hc.zeta).ln();
    hc.log_alpha.iter().map(|&la| sigmoid(la - shift)).collect()
}

/// A uniform draw strictly inside (0, 1).
pub fn open_uniform<S: Scalar, R: Rng + ?Sized>(rng: &mut R) -> S {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            let u = S::of(u);
            if u > S::zero() && u < S::one() {
                return u;
            }
        }
    }
}

pub fn open_uniforms<S: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<S> {
    (0..n).map(|_| open_uniform(rng)).collect()
}

/// Independent Bernoulli draws.
pub fn sample_binary_gates<S: Scalar, R: Rng + ?Sized>(prob: &[S], rng: &mut R) -> Vec<bool> {
    prob.iter()
        .map(|&p| {
            let u: f64 = rng.random();
            u < p.as_f64()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid64(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn probability_at_threshold_is_half() {
        let p = theta_from_magnitude(&[0.3f32], &[0.3], 0.001);
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn sharp_temperature_examples() {
        let p = theta_from_magnitude(&[0.51f64, 0.49], &[0.5, 0.5], 0.001);
        assert!((p[0] - sigmoid64(10.0)).abs() < 1e-9);
        assert!((p[0] - 0.9999546).abs() < 1e-7);
        assert!((p[1] - 4.5398e-5).abs() < 1e-8);
    }

    #[test]
    fn init_for_target_example() {
        let v = init_v_for_target(&[0.5f64], 0.99, 0.001).unwrap();
        let tau = softplus(v[0]);
        // τ = 0.5 − 0.001·ln(99)
        let oracle_tau = 0.5 - 0.001 * 99f64.ln();
        assert!((tau - oracle_tau).abs() < 1e-12);
        assert!((tau - 0.4954049).abs() < 1e-7);
        let oracle_v = (oracle_tau.exp() - 1.0).ln();
        assert!((v[0] - oracle_v).abs() < 1e-9);
        assert!((v[0] + 0.4444).abs() < 1e-3);
    }

    #[test]
    fn init_at_half_puts_threshold_on_norm() {
        let v = init_v_for_target(&[0.7f64], 0.5, 0.001).unwrap();
        assert!((softplus(v[0]) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn init_rejects_tiny_groups() {
        let err = init_v_for_target(&[0.001f64], 0.99, 0.001).unwrap_err();
        assert!(err.to_string().contains("larger initialization"));
    }

    #[test]
    fn lambda0_examples() {
        assert_eq!(lambda0_from_precisions(2.0f64, 2.0).unwrap(), 0.0);
        let e2 = 1f64.exp().powi(2);
        assert!((lambda0_from_precisions(1.0, e2).unwrap() - 1.0).abs() < 1e-15);
        let ratio = lambda2_from_lambda0(1.0f64, 5e-6);
        assert!((ratio - 1e-5f64.exp()).abs() < 1e-15);
        assert!(lambda0_from_precisions(0.0f64, 1.0).is_err());
        assert!(lambda0_from_precisions(1.0f64, -1.0).is_err());
    }

    #[test]
    fn l0_examples() {
        assert_eq!(l0_penalty(&[0.0f64; 4], 3.0), 0.0);
        assert_eq!(l0_penalty(&[1.0f64; 3], 2.0), 6.0);
        assert!((l0_penalty(&[0.3f64, 0.7], 5e-5) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = 2f64.ln();
        assert!((gate_cross_entropy(&[0.5f64], &[0.5]) + ln2).abs() < 1e-12);
        assert!((gate_cross_entropy(&[1.0f64], &[0.5]) + ln2).abs() < 1e-12);
        let oracle = 0.3 * 0.8f64.ln() + 0.7 * 0.2f64.ln();
        assert!((gate_cross_entropy(&[0.3f64], &[0.8]) - oracle).abs() < 1e-12);
        assert!((oracle + 1.19355).abs() < 1e-5);
        assert!(gate_cross_entropy(&[0.5f64], &[0.0]).is_finite());
    }

    #[test]
    fn cross_entropy_peaks_at_theta_equal_pi() {
        for &pi in &[0.1f64, 0.3, 0.5, 0.77, 0.95] {
            let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
            let best = grid
                .iter()
                .copied()
                .max_by(|a, b| {
                    gate_cross_entropy(&[pi], &[*a]).partial_cmp(&gate_cross_entropy(&[pi], &[*b])).unwrap()
                })
                .unwrap();
            assert!((best - pi).abs() <= 1e-3, "pi={pi} best={best}");
        }
    }

    #[test]
    fn zero_temperature_ties_close() {
        let hc = HardConcreteParams::with_defaults(vec![0.0f64]);
        assert_eq!(hard_concrete_sample(&hc, &[0.5], true), vec![0.0]);
        let hc = HardConcreteParams::with_defaults(vec![1e30f64]);
        assert_eq!(hard_concrete_sample(&hc, &[1e-9], true), vec![1.0]);
    }

    #[test]
    fn active_prob_examples() {
        let hc = HardConcreteParams::with_defaults(vec![f64::NEG_INFINITY, 0.0]);
        let p = hard_concrete_active_prob(&hc);
        assert_eq!(p[0], 0.0);
        let oracle = sigmoid64(-(2.0 / 3.0) * (0.1f64 / 1.1).ln());
        assert!((p[1] - oracle).abs() < 1e-12);
        assert!((p[1] - 0.8318).abs() < 1e-4);
        let mid = HC_BETA * (-HC_GAMMA / HC_ZETA).ln();
        let hc = HardConcreteParams::with_defaults(vec![mid]);
        assert!((hard_concrete_active_prob(&hc)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn relaxed_sample_monte_carlo_matches_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let hc = HardConcreteParams::with_defaults(vec![0.0f64; n]);
        let draws = open_uniforms(n, &mut rng);
        let z = hard_concrete_sample(&hc, &draws, false);
        assert!(z.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let freq = z.iter().filter(|&&x| x > 0.0).count() as f64 / n as f64;
        let p = 0.8318;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * se + 1e-4, "freq={freq}");
    }

    #[test]
    fn relaxed_gradient_matches_finite_difference() {
        let hc = HardConcreteParams::with_defaults(vec![0.4f64]);
        let u = [0.37];
        let (_, g) = hard_concrete_sample_with_grad(&hc, &u);
        let h = 1e-6;
        let up = hard_concrete_sample(&HardConcreteParams::with_defaults(vec![0.4 + h]), &u, false)[0];
        let dn = hard_concrete_sample(&HardConcreteParams::with_defaults(vec![0.4 - h]), &u, false)[0];
        assert!((g[0] - (up - dn) / (2.0 * h)).abs() < 1e-6);
    }

    #[test]
    fn binary_gate_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(sample_binary_gates(&[1.0f32; 100], &mut rng).iter().all(|&z| z));
        assert!(sample_binary_gates(&[0.0f32; 100], &mut rng).iter().all(|&z| !z));
        let n = 100_000;
        let z = sample_binary_gates(&vec![0.25f64; n], &mut rng);
        let mean = z.iter().filter(|&&b| b).count() as f64 / n as f64;
        assert!((mean - 0.25).abs() < 3.0 * (0.25f64 * 0.75 / n as f64).sqrt());
    }

    proptest! {
        #[test]
        fn probability_monotone(n in 0.0f64..2.0, t in 0.01f64..2.0, d in 1e-4f64..0.5) {
            let temp = 0.05;
            let base = theta_from_magnitude(&[n], &[t], temp)[0];
            prop_assert!(theta_from_magnitude(&[n + d], &[t], temp)[0] >= base);
            prop_assert!(theta_from_magnitude(&[n], &[t + d], temp)[0] <= base);
        }

        #[test]
        fn init_round_trips(norms in prop::collection::vec(0.05f64..3.0, 50), theta0 in 0.05f64..0.995) {
            let temp = 0.001;
            let v = init_v_for_target(&norms, theta0, temp).unwrap();
            let tau: Vec<f64> = v.iter().map(|&x| softplus(x)).collect();
            for (n, t) in norms.iter().zip(&tau) {
                prop_assert!((t - (n - temp * logit(theta0))).abs() < 1e-6);
            }
            for p in theta_from_magnitude(&norms, &tau, temp) {
                prop_assert!((p - theta0).abs() < 1e-6);
            }
        }
    }
}
