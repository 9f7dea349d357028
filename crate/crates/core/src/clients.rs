//! Local training rules (the E-step of each strategy).
//!
//! Each client copies the server's prior parameters, runs `epochs` passes of
//! minibatch SGD over its shard with a strategy-specific penalty, and returns
//! a [`ClientUpdate`]. Randomness comes only from the client's own
//! [`ClientStreams`].

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ShardDataset;
use crate::error::{FedError, Provenance, Result};
use crate::gates::{
    gate_cross_entropy, gate_cross_entropy_slope, hard_concrete_sample, hard_concrete_sample_with_grad,
    l0_penalty, open_uniforms, HardConcreteParams,
};
use crate::nn::{self, group_norms, Batch, GroupedParams, ModelKind, ModelSpec};
use crate::optim::OptimizerState;
use crate::rng::{Purpose, StreamRng, Streams};
use crate::scalar::{sigmoid, sigmoid_slope, softplus, Scalar};
use crate::server::mog_responsibilities;

fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    64
}
fn default_lr_w() -> f64 {
    0.05
}
fn default_lr_v() -> f64 {
    1e-3
}
fn default_ce() -> f64 {
    1e-4
}

/// Local optimization hyperparameters; unused strengths stay at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_w")]
    pub lr_weights: f64,
    #[serde(default = "default_lr_v")]
    pub lr_thresholds: f64,
    /// FedProx proximal strength.
    #[serde(default)]
    pub lambda_prox: f64,
    /// Laplace-prior strength (L1 pull towards the server weights).
    #[serde(default)]
    pub lambda_laplace: f64,
    /// L0 strength per group.
    #[serde(default)]
    pub lambda0: f64,
    /// FedSparse drift precision.
    #[serde(default)]
    pub lambda_drift: f64,
    /// Multiplier on the client/server gate cross-entropy.
    #[serde(default = "default_ce")]
    pub ce_scale: f64,
    /// FedL1 group-lasso strength and pruning threshold.
    #[serde(default)]
    pub l1_strength: f64,
    /// FedDrop hidden-unit drop probability.
    #[serde(default)]
    pub drop_rate: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr_weights: default_lr_w(),
            lr_thresholds: default_lr_v(),
            lambda_prox: 0.0,
            lambda_laplace: 0.0,
            lambda0: 0.0,
            lambda_drift: 0.0,
            ce_scale: default_ce(),
            l1_strength: 0.0,
            drop_rate: 0.0,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FedError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("client.epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("client.batch_size must be >= 1");
        }
        for (name, v) in [
            ("lr_weights", self.lr_weights),
            ("lr_thresholds", self.lr_thresholds),
            ("lambda_prox", self.lambda_prox),
            ("lambda_laplace", self.lambda_laplace),
            ("lambda0", self.lambda0),
            ("lambda_drift", self.lambda_drift),
            ("l1_strength", self.l1_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("client.{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.ce_scale) {
            return bad(&format!("client.ce_scale must lie in [0,1], got {}", self.ce_scale));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return bad(&format!("client.drop_rate must lie in [0,1), got {}", self.drop_rate));
        }
        Ok(())
    }
}

/// What a client sends back.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientUpdate {
    Dense {
        params: Vec<f32>,
    },
    /// Surviving groups (in group order) followed by every ungrouped
    /// coordinate, plus optionally the client's thresholds.
    Sparse {
        mask: Vec<bool>,
        weights: Vec<f32>,
        thresholds: Option<Vec<f32>>,
    },
    Submodel {
        unit_mask: Vec<bool>,
        params: Vec<f32>,
    },
}

impl ClientUpdate {
    /// Structural consistency of a sparse payload against a group layout.
    pub fn check(&self, layout: &nn::GroupLayout) -> Result<()> {
        if let ClientUpdate::Sparse {
            mask,
            weights,
            thresholds,
        } = self
        {
            if mask.len() != layout.num_groups() {
                return Err(FedError::shape("sparse bitmask", layout.num_groups(), mask.len()));
            }
            let expected: usize = layout
                .group_sizes()
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(s, _)| s)
                .sum::<usize>()
                + layout.ungrouped_len();
            if weights.len() != expected {
                return Err(FedError::shape("sparse weights", expected, weights.len()));
            }
            if let Some(v) = thresholds {
                if v.len() != layout.num_groups() {
                    return Err(FedError::shape("sparse thresholds", layout.num_groups(), v.len()));
                }
            }
        }
        Ok(())
    }
}

/// A client's result plus diagnostics that never go on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub update: ClientUpdate,
    /// Final local inclusion probabilities (FedSparse only).
    pub gate_probs: Option<Vec<f32>>,
    pub steps: usize,
}

/// The random streams owned by one client in one round.
pub struct ClientStreams {
    pub round: u32,
    pub client: u32,
    pub shuffle: StreamRng,
    pub gates: StreamRng,
    pub upload: StreamRng,
}

impl ClientStreams {
    pub fn new(streams: &Streams, round: u32, client: u32) -> Self {
        ClientStreams {
            round,
            client,
            shuffle: streams.get(round, client, Purpose::Shuffle),
            gates: streams.get(round, client, Purpose::RelaxedGates),
            upload: streams.get(round, client, Purpose::UploadGates),
        }
    }

    fn non_finite(&self, what: &'static str, step: usize) -> FedError {
        FedError::NonFinite {
            what,
            provenance: Provenance {
                round: Some(self.round),
                client: Some(self.client),
                step: Some(step),
            },
        }
    }
}

/// Minibatches for one epoch in shuffled order; the last one may be short.
fn epoch_batches(shard: &ShardDataset, batch_size: usize, rng: &mut StreamRng) -> Result<Vec<Batch<f32>>> {
    let mut order: Vec<usize> = (0..shard.train.len()).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|rows| shard.train.batch(rows)).collect()
}

fn require_data(shard: &ShardDataset) -> Result<()> {
    if shard.train.is_empty() {
        return Err(FedError::InvalidArgument(format!(
            "shard {} has no training examples",
            shard.shard_id
        )));
    }
    Ok(())
}

/// Plain minibatch SGD with an additive penalty gradient `extra(w_s, grad)`.
fn local_sgd<F>(
    spec: &ModelSpec,
    init: &GroupedParams<f32>,
    shard: &ShardDataset,
    cfg: &ClientConfig,
    rngs: &mut ClientStreams,
    mut extra: F,
) -> Result<(GroupedParams<f32>, usize)>
where
    F: FnMut(&[f32], &mut [f32]),
{
    require_data(shard)?;
    let mut w_s = init.clone();
    let mut sgd = OptimizerState::<f32>::sgd(cfg.lr_weights, w_s.len());
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(shard, cfg.batch_size, &mut rngs.shuffle)? {
            let lg = nn::loss_and_grad(spec, &w_s, &batch, None)?;
            if !lg.loss.is_finite() {
                return Err(rngs.non_finite("loss", step));
            }
            let mut grad = lg.params;
            extra(&w_s.flat, &mut grad);
            sgd.step(&mut w_s.flat, &grad, false)
                .map_err(|e| e.at(Some(rngs.round), Some(rngs.client), Some(step)))?;
            step += 1;
        }
    }
    Ok((w_s, step))
}

fn dense(params: GroupedParams<f32>, steps: usize) -> ClientOutcome {
    ClientOutcome {
        update: ClientUpdate::Dense { params: params.flat },
        gate_probs: None,
        steps,
    }
}

pub fn client_fedavg(
    spec: &ModelSpec,
    w: &GroupedParams<f32>,
    shard: &ShardDataset,
    cfg: &ClientConfig,
    rngs: &mut ClientStreams,
) -> Result<ClientOutcome> {
    let (w_s, steps) = local_sgd(spec, w, shard, cfg, rngs, |_, _| {})?;
    Ok(dense(w_s, steps))
}

/// SGD on the data loss plus `(λ/2)‖w_s − w‖²`.
pub fn client_fedprox(
    spec: &ModelSpec,
    w: &GroupedParams<f32>,
    shard: &ShardDataset,
    cfg: &ClientConfig,
    rngs: &mut ClientStreams,
) -> Result<ClientOutcome> {
    let lambda = cfg.lambda_prox as f32;
    let prior = &w.flat;
    let (w_s, steps) = local_sgd(spec, w, shard, cfg, rngs, |ws, g| {
        for ((gi, &x), &p) in g.iter_mut().zip(ws).zip(prior) {
            *gi += lambda * (x - p);
        }
    })?;
    Ok(dense(w_s, steps))
}

/// SGD on the data loss plus `λ‖w_s − w‖₁`, using `sign(0) = 0`.
pub fn client_laplace(
    spec: &ModelSpec,
    w: &GroupedParams<f32>,
    shard: &ShardDataset,
    cfg: &ClientConfig,
    rngs: &mut ClientStreams,
) -> Result<ClientOutcome> {
    let lambda = cfg.lambda_laplace as f32;
    let prior = &w.flat;
    let (w_s, steps) = local_sgd(spec, w, shard, cfg, rngs, |ws, g| {
        for ((gi, &x), &p) in g.iter_mut().zip(ws).zip(prior) {
            let d = x - p;
            if d != 0.0 {
                *gi += lambda * d.signum();
            }
        }
    })?;
    Ok(dense(w_s, steps))
}

/// Group-lasso SGD followed by hard thresholding of groups with
/// `‖w_g‖ ≤ λ`.
pub fn client_fedl1(
    spec: &ModelSpec,
    w: &GroupedParams<f32>,
    shard: &ShardDataset,
    cfg: &ClientConfig,
    rngs: &mut ClientStreams,
) -> Result<ClientOutcome> {
    let lambda = cfg.l1_strength as f32;
    let layout = w.layout().clone();
    let (w_s, steps) = local_sgd(spec, w, shard, cfg, rngs, |ws, g| {
        if lambda == 0.0 {
            return;
        }
        for group in layout.groups() {
            let norm = group.indices().map(|i| ws[i] * ws[i]).sum::<f32>().sqrt();
            if norm > 0.0 {
                for i in group.indices() {
                    g[i] += lambda * ws[i] / norm;
                }
            }
        }
    })?;
    let mask = l1_keep_mask(&w_s, cfg.l1_strength as f32);
    let weights = w_s.gather(&mask)?;
    Ok(ClientOutcome {
        update: ClientUpdate::Sparse {
            mask,
            weights,
            thresholds: None,
        },
        gate_probs: None,
        steps,
    })
}

/// Groups kept by the FedL1 thresholding operator (`‖w_g‖ > λ`).
pub fn l1_keep_mask<S: Scalar>(params: &GroupedParams<S>, lambda: S) -> Vec<bool> {
    group_norms(params).into_iter().map(|n| n > lambda).collect()
}

/// The FedSparse local objective (minimized), for fixed server weights and
/// server inclusion probabilities:
///
/// `data(w_s ⊙ z) + (λ_d/2)·Σ_g π_g‖w_sg − w_g‖² + λ₀·Σ_g π_g − c·Σ_g CE(π_g, θ_g)`
///
/// where `z` is a relaxed hard-concrete sample with log-odds
/// `(‖w_sg‖ − softplus(v_sg))/T`. Gate terms reach the weights only through
/// the masked forward pass; norms inside `π` and `log_alpha` are constants.
pub struct SparseObjective<'a, S> {
    pub spec: &'a ModelSpec,
    pub server_w: &'a GroupedParams<S>,
    pub theta: &'a [S],
    pub temperature: S,
    pub lambda0: S,
    pub lambda_drift: S,
    pub ce_scale: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrads<S> {
    pub objective: S,
    pub data_loss: S,
    pub weights: Vec<S>,
    pub thresholds: Vec<S>,
    pub probs: Vec<S>,
    pub gates: Vec<S>,
}

impl<S: Scalar> SparseObjective<'_, S> {
    /// Objective and gradients for one minibatch and one set of uniform
    /// draws. `batch = None` drops the data term.
    pub fn evaluate(
        &self,
        w_s: &GroupedParams<S>,
        v_s: &[S],
        batch: Option<&Batch<S>>,
        draws: &[S],
    ) -> Result<SparseGrads<S>> {
        let layout = w_s.layout();
        let g_count = layout.num_groups();
        if v_s.len() != g_count || draws.len() != g_count || self.theta.len() != g_count {
            return Err(FedError::shape("gate vectors", g_count, v_s.len().min(draws.len())));
        }
        let norms = group_norms(w_s);
        let log_alpha: Vec<S> = norms
            .iter()
            .zip(v_s)
            .map(|(&n, &v)| (n - softplus(v)) / self.temperature)
            .collect();
        let probs: Vec<S> = log_alpha.iter().map(|&l| sigmoid(l)).collect();
        let hc = HardConcreteParams::with_defaults(log_alpha.clone());
        let (gates, dz) = hard_concrete_sample_with_grad(&hc, draws);

        let (data_loss, mut grad_w, mask_grad) = match batch {
            Some(b) => {
                let lg = nn::loss_and_grad(self.spec, w_s, b, Some(&gates))?;
                (lg.loss, lg.params, lg.mask.expect("mask supplied"))
            }
            None => (S::zero(), vec![S::zero(); w_s.len()], vec![S::zero(); g_count]),
        };

        let half = S::of(0.5);
        let mut drift_sq = vec![S::zero(); g_count];
        let mut drift_total = S::zero();
        for i in 0..w_s.len() {
            let d = w_s.flat[i] - self.server_w.flat[i];
            let weight = match layout.owner(i) {
                Some(g) => {
                    drift_sq[g] += d * d;
                    probs[g]
                }
                None => {
                    drift_total += half * self.lambda_drift * d * d;
                    S::one()
                }
            };
            grad_w[i] += self.lambda_drift * weight * d;
        }
        for g in 0..g_count {
            drift_total += half * self.lambda_drift * probs[g] * drift_sq[g];
        }

        let ce_slope = gate_cross_entropy_slope(self.theta);
        let thresholds = (0..g_count)
            .map(|g| {
                let d_prob = half * self.lambda_drift * drift_sq[g] + self.lambda0 - self.ce_scale * ce_slope[g];
                let d_logit = mask_grad[g] * dz[g] + d_prob * sigmoid_slope(log_alpha[g]);
                -d_logit * sigmoid(v_s[g]) / self.temperature
            })
            .collect();

        let objective = data_loss + drift_total + l0_penalty(&probs, self.lambda0)
            - self.ce_scale * gate_cross_entropy(&probs, self.theta);
        Ok(SparseGrads {
            objective,
            data_loss,
            weights: grad_w,
            thresholds,
            probs,
            gates,
        })
    }
}

/// Everything FedSparse receives from the server.
pub struct SparsePrior<'a> {
    pub w: &'a GroupedParams<f32>,
    pub v: &'a [f32],
    pub temperature: f32,
}

impl SparsePrior<'_> {
    pub fn theta(&self) -> Vec<f32> {
        crate::gates::theta_from_magnitude(
            &group_norms(self.w),
            &self.v.iter().map(|&x| softplus(x)).collect::<Vec<_>>(),
            self.temperature,
        )
    }
}

/// FedSparse local update: weights by SGD, thresholds by Adamax, then an
/// exactly binary gate sample decides which groups are uploaded.
pub fn client_fedsparse(
    spec: &ModelSpec,
    prior: &SparsePrior<'_>,
    shard: &ShardDataset,
    cfg: &ClientConfig,
    rngs: &mut ClientStreams,
) -> Result<ClientOutcome> {
    require_data(shard)?;
    if !(cfg.lr_thresholds > 0.0) {
        return Err(FedError::Config("fedsparse needs client.lr_thresholds > 0".into()));
    }
    let g_count = prior.w.layout().num_groups();
    if prior.v.len() != g_count {
        return Err(FedError::shape("thresholds", g_count, prior.v.len()));
    }
    let theta = prior.theta();
    let objective = SparseObjective {
        spec,
        server_w: prior.w,
        theta: &theta,
        temperature: prior.temperature,
        lambda0: cfg.lambda0 as f32,
        lambda_drift: cfg.lambda_drift as f32,
        ce_scale: cfg.ce_scale as f32,
    };
    let mut w_s = prior.w.clone();
    let mut v_s = prior.v.to_vec();
    let mut sgd = OptimizerState::<f32>::sgd(cfg.lr_weights, w_s.len());
    let mut adamax = OptimizerState::<f32>::adamax(cfg.lr_thresholds, g_count);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(shard, cfg.batch_size, &mut rngs.shuffle)? {
            let draws = open_uniforms(g_count, &mut rngs.gates);
            let grads = objective.evaluate(&w_s, &v_s, Some(&batch), &draws)?;
            if !grads.objective.is_finite() {
                return Err(rngs.non_finite("local objective", step));
            }
            let at = |e: FedError| e.at(Some(rngs.round), Some(rngs.client), Some(step));
            sgd.step(&mut w_s.flat, &grads.weights, false).map_err(at)?;
            adamax.step(&mut v_s, &grads.thresholds, false).map_err(at)?;
            step += 1;
        }
    }
    let log_alpha: Vec<f32> = group_norms(&w_s)
        .iter()
        .zip(&v_s)
        .map(|(&n, &v)| (n - softplus(v)) / prior.temperature)
        .collect();
    let probs: Vec<f32> = log_alpha.iter().map(|&l| sigmoid(l)).collect();
    let draws = open_uniforms(g_count, &mut rngs.upload);
    let hc = HardConcreteParams::with_defaults(log_alpha);
    let mask: Vec<bool> = hard_concrete_sample(&hc, &draws, true).into_iter().map(|z| z > 0.0).collect();
    let weights = w_s.gather(&mask)?;
    Ok(ClientOutcome {
        update: ClientUpdate::Sparse {
            mask,
            weights,
            thresholds: Some(v_s),
        },
        gate_probs: Some(probs),
        steps: step,
    })
}

/// Local training under a mixture-of-Gaussians prior. The client starts
/// from the component that fits its training data best and adds the prior
/// gradient `λ·Σ_k r_k(w_s)(w_s − w_k)`.
pub fn client_mog(
    spec: &ModelSpec,
    ensemble: &[GroupedParams<f32>],
    lambda: f64,
    shard: &ShardDataset,
    cfg: &ClientConfig,
    rngs: &mut ClientStreams,
) -> Result<ClientOutcome> {
    require_data(shard)?;
    if ensemble.is_empty() {
        return Err(FedError::InvalidArgument("mixture prior needs at least one component".into()));
    }
    let all = shard.train.all()?;
    let mut best = 0;
    let mut best_loss = f32::INFINITY;
    for (k, comp) in ensemble.iter().enumerate() {
        let (loss, _) = nn::forward(spec, comp, &all, None)?;
        if loss < best_loss {
            best = k;
            best_loss = loss;
        }
    }
    let lam = lambda as f32;
    let (w_s, steps) = local_sgd(spec, &ensemble[best], shard, cfg, rngs, |ws, g| {
        let resp = mog_responsibilities(ws, ensemble.iter().map(|c| c.flat.as_slice()), lam);
        for (r, comp) in resp.iter().zip(ensemble) {
            for ((gi, &x), &c) in g.iter_mut().zip(ws).zip(&comp.flat) {
                *gi += lam * r * (x - c);
            }
        }
    })?;
    Ok(dense(w_s, steps))
}

/// Shape of the MLP that keeps `retained` hidden units.
pub fn submodel_spec(spec: &ModelSpec, retained: usize) -> ModelSpec {
    ModelSpec {
        hidden_dim: retained,
        grouping: nn::Grouping::PerHiddenUnit,
        group_output: false,
        ..spec.clone()
    }
}

fn require_mlp(spec: &ModelSpec) -> Result<()> {
    if spec.kind != ModelKind::Mlp {
        return Err(FedError::InvalidArgument("federated dropout needs an mlp model".into()));
    }
    Ok(())
}

/// Per-unit parameter footprint on the wire: incoming weights, bias and
/// outgoing weights; the output bias is always sent.
pub fn submodel_wire_layout(spec: &ModelSpec) -> crate::comms::MaskedLayout {
    crate::comms::MaskedLayout {
        slot_sizes: vec![spec.input_dim + 1 + spec.num_classes; spec.hidden_dim],
        always: spec.num_classes,
    }
}

/// Flat parameters of the submodel made of the units with `unit_mask` set.
pub fn extract_submodel<S: Scalar>(spec: &ModelSpec, full: &[S], unit_mask: &[bool]) -> Result<Vec<S>> {
    require_mlp(spec)?;
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    if unit_mask.len() != h || full.len() != spec.param_count() {
        return Err(FedError::shape("submodel mask", h, unit_mask.len()));
    }
    let kept: Vec<usize> = (0..h).filter(|&k| unit_mask[k]).collect();
    let mut out = Vec::with_capacity(kept.len() * (d + 1 + c) + c);
    for &k in &kept {
        out.extend_from_slice(&full[k * d..(k + 1) * d]);
    }
    out.extend(kept.iter().map(|&k| full[h * d + k]));
    let w2 = h * d + h;
    for row in 0..c {
        out.extend(kept.iter().map(|&k| full[w2 + row * h + k]));
    }
    out.extend_from_slice(&full[w2 + c * h..]);
    Ok(out)
}

/// Full-model indices covered by each submodel coordinate, in submodel order.
pub fn submodel_indices(spec: &ModelSpec, unit_mask: &[bool]) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..spec.param_count()).collect();
    let as_f: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
    Ok(extract_submodel(spec, &as_f, unit_mask)?.into_iter().map(|x| x as usize).collect())
}

/// Standard SGD on the dispatched subnetwork.
pub fn client_feddrop(
    spec: &ModelSpec,
    sub_w: &[f32],
    unit_mask: &[bool],
    shard: &ShardDataset,
    cfg: &ClientConfig,
    rngs: &mut ClientStreams,
) -> Result<ClientOutcome> {
    require_mlp(spec)?;
    let retained = unit_mask.iter().filter(|&&m| m).count();
    if retained == 0 {
        return Err(FedError::InvalidArgument(
            "federated dropout submodel retains no hidden units".into(),
        ));
    }
    let sub_spec = submodel_spec(spec, retained);
    let layout = Arc::new(sub_spec.layout()?);
    let init = GroupedParams::new(sub_w.to_vec(), layout)?;
    let (trained, steps) = local_sgd(&sub_spec, &init, shard, cfg, rngs, |_, _| {})?;
    Ok(ClientOutcome {
        update: ClientUpdate::Submodel {
            unit_mask: unit_mask.to_vec(),
            params: trained.flat,
        },
        gate_probs: None,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_single_class, split_train_test, synth_classification};
    use crate::gates::init_v_for_target;

    fn setup() -> (ModelSpec, GroupedParams<f32>, ShardDataset) {
        let ds = synth_classification(1, 30, 4, 2, 3.0).unwrap();
        let mut shards = crate::data::partition_dirichlet(&ds, 1, 1.0, 0).unwrap();
        let shard = split_train_test(&ds, &shards.remove(0), 0.2, 0).unwrap();
        let spec = ModelSpec::mlp(4, 5, 2);
        let layout = Arc::new(spec.layout().unwrap());
        let mut rng = crate::rng::stream(0, 0, 0, Purpose::Init);
        let w = spec.init_params(layout, &mut rng).unwrap();
        (spec, w, shard)
    }

    fn streams() -> ClientStreams {
        ClientStreams::new(&Streams::new(5), 1, 0)
    }

    fn dense_params(o: &ClientOutcome) -> &[f32] {
        match &o.update {
            ClientUpdate::Dense { params } => params,
            other => panic!("expected dense, got {other:?}"),
        }
    }

    #[test]
    fn zero_lr_returns_prior() {
        let (spec, w, shard) = setup();
        let cfg = ClientConfig {
            lr_weights: 0.0,
            epochs: 3,
            ..Default::default()
        };
        let out = client_fedavg(&spec, &w, &shard, &cfg, &mut streams()).unwrap();
        assert_eq!(dense_params(&out), w.flat.as_slice());
    }

    #[test]
    fn single_step_matches_backward() {
        let (spec, w, shard) = setup();
        let cfg = ClientConfig {
            batch_size: 1000,
            lr_weights: 0.1,
            ..Default::default()
        };
        let out = client_fedavg(&spec, &w, &shard, &cfg, &mut streams()).unwrap();
        assert_eq!(out.steps, 1);
        // a full batch is order-invariant up to summation order; use the same order
        let mut rngs = streams();
        let batch = epoch_batches(&shard, 1000, &mut rngs.shuffle).unwrap().remove(0);
        let g = nn::backward(&spec, &w, &batch, None).unwrap();
        let expected: Vec<f32> = w.flat.iter().zip(&g).map(|(p, g)| p - 0.1 * g).collect();
        assert_eq!(dense_params(&out), expected.as_slice());
    }

    #[test]
    fn strong_prox_pins_to_prior() {
        let (spec, w, shard) = setup();
        let cfg = ClientConfig {
            lambda_prox: 1e6,
            lr_weights: 1e-6,
            ..Default::default()
        };
        let out = client_fedprox(&spec, &w, &shard, &cfg, &mut streams()).unwrap();
        let dist: f32 = dense_params(&out)
            .iter()
            .zip(&w.flat)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt();
        assert!(dist < 1e-3, "{dist}");
    }

    #[test]
    fn zero_strength_variants_match_fedavg() {
        let (spec, w, shard) = setup();
        let cfg = ClientConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let base = client_fedavg(&spec, &w, &shard, &cfg, &mut streams()).unwrap();
        let prox = client_fedprox(&spec, &w, &shard, &cfg, &mut streams()).unwrap();
        let lap = client_laplace(&spec, &w, &shard, &cfg, &mut streams()).unwrap();
        assert_eq!(dense_params(&base), dense_params(&prox));
        assert_eq!(dense_params(&base), dense_params(&lap));
    }

    #[test]
    fn laplace_pull_shrinks_l1_drift() {
        let (spec, w, shard) = setup();
        let cfg = ClientConfig {
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let l1 = |p: &[f32]| p.iter().zip(&w.flat).map(|(a, b)| (a - b).abs()).sum::<f32>();
        let base = client_fedavg(&spec, &w, &shard, &cfg, &mut streams()).unwrap();
        let strong = ClientConfig { lambda_laplace: 0.5, ..cfg };
        let lap = client_laplace(&spec, &w, &shard, &strong, &mut streams()).unwrap();
        assert!(l1(dense_params(&lap)) < l1(dense_params(&base)));
    }

    #[test]
    fn fedl1_without_penalty_uploads_everything() {
        let (spec, w, shard) = setup();
        let out = client_fedl1(&spec, &w, &shard, &ClientConfig::default(), &mut streams()).unwrap();
        let avg = client_fedavg(&spec, &w, &shard, &ClientConfig::default(), &mut streams()).unwrap();
        match out.update {
            ClientUpdate::Sparse { mask, weights, thresholds } => {
                assert!(mask.iter().all(|&m| m));
                assert!(thresholds.is_none());
                let full = GroupedParams::scatter(w.layout().clone(), &mask, &weights).unwrap();
                assert_eq!(full.flat.as_slice(), dense_params(&avg));
            }
            other => panic!("expected sparse, got {other:?}"),
        }
    }

    #[test]
    fn fedsparse_closed_gates_upload_nothing() {
        let (spec, w, shard) = setup();
        let v = vec![50.0f32; w.layout().num_groups()];
        let prior = SparsePrior {
            w: &w,
            v: &v,
            temperature: 0.001,
        };
        let out = client_fedsparse(&spec, &prior, &shard, &ClientConfig::default(), &mut streams()).unwrap();
        out.update.check(w.layout()).unwrap();
        match out.update {
            ClientUpdate::Sparse { mask, weights, .. } => {
                assert!(mask.iter().all(|&m| !m));
                assert_eq!(weights.len(), w.layout().ungrouped_len());
            }
            _ => panic!(),
        }
    }

    #[test]
    fn fedsparse_payload_is_consistent() {
        let (spec, w, shard) = setup();
        let v = init_v_for_target(&group_norms(&w), 0.99, 0.001f32).unwrap();
        let prior = SparsePrior {
            w: &w,
            v: &v,
            temperature: 0.001,
        };
        let cfg = ClientConfig {
            lambda0: 5e-3,
            batch_size: 4,
            ..Default::default()
        };
        let out = client_fedsparse(&spec, &prior, &shard, &cfg, &mut streams()).unwrap();
        out.update.check(w.layout()).unwrap();
        assert_eq!(out.gate_probs.unwrap().len(), 5);
    }

    #[test]
    fn sparse_threshold_gradient_matches_finite_difference() {
        let spec = ModelSpec::mlp(3, 4, 3);
        let layout = Arc::new(spec.layout().unwrap());
        let mut rng = crate::rng::stream(3, 0, 0, Purpose::Init);
        let server = spec.init_params::<f64, _>(layout, &mut rng).unwrap();
        let mut w_s = server.clone();
        for (i, x) in w_s.flat.iter_mut().enumerate() {
            *x += 0.01 * ((i as f64) * 0.7).sin();
        }
        let norms = group_norms(&w_s);
        // thresholds close to the norms keep log_alpha moderate at T = 0.05
        let v: Vec<f64> = norms
            .iter()
            .enumerate()
            .map(|(g, n)| crate::scalar::inverse_softplus(n - 0.02 * (g as f64 - 1.5)))
            .collect();
        let theta = vec![0.9, 0.4, 0.7, 0.2];
        let x: Vec<f64> = (0..18).map(|i| ((i * 37 % 11) as f64 / 5.0) - 1.0).collect();
        let batch = Batch::new(nn::DenseMatrix::new(6, 3, x).unwrap(), vec![0, 1, 2, 0, 1, 2]).unwrap();
        let obj = SparseObjective {
            spec: &spec,
            server_w: &server,
            theta: &theta,
            temperature: 0.05,
            lambda0: 0.3,
            lambda_drift: 2.0,
            ce_scale: 0.5,
        };
        let draws = vec![0.3, 0.55, 0.62, 0.45];
        let grads = obj.evaluate(&w_s, &v, Some(&batch), &draws).unwrap();
        let h = 1e-6;
        for g in 0..4 {
            let mut up = v.clone();
            up[g] += h;
            let mut dn = v.clone();
            dn[g] -= h;
            let fd = (obj.evaluate(&w_s, &up, Some(&batch), &draws).unwrap().objective
                - obj.evaluate(&w_s, &dn, Some(&batch), &draws).unwrap().objective)
                / (2.0 * h);
            let an = grads.thresholds[g];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1.0), "group {g}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn detached_weight_gradient_is_drift_only() {
        let spec = ModelSpec::mlp(3, 4, 2);
        let layout = Arc::new(spec.layout().unwrap());
        let mut rng = crate::rng::stream(4, 0, 0, Purpose::Init);
        let server = spec.init_params::<f64, _>(layout, &mut rng).unwrap();
        let mut w_s = server.clone();
        for (i, x) in w_s.flat.iter_mut().enumerate() {
            *x += 0.05 * ((i as f64) * 1.3).cos();
        }
        let norms = group_norms(&w_s);
        let v: Vec<f64> = norms.iter().map(|n| crate::scalar::inverse_softplus(n - 0.01)).collect();
        let theta = vec![0.8; 4];
        let obj = SparseObjective {
            spec: &spec,
            server_w: &server,
            theta: &theta,
            temperature: 0.05,
            lambda0: 0.7,
            lambda_drift: 3.0,
            ce_scale: 1.0,
        };
        let grads = obj.evaluate(&w_s, &v, None, &[0.5; 4]).unwrap();
        assert!(grads.thresholds.iter().all(|g| g.abs() > 0.0));
        for i in 0..w_s.len() {
            let pi = w_s.layout().owner(i).map_or(1.0, |g| grads.probs[g]);
            let drift = 3.0 * pi * (w_s.flat[i] - server.flat[i]);
            assert!((grads.weights[i] - drift).abs() < 1e-15);
        }
    }

    #[test]
    fn fedl1_threshold_and_zero_strength() {
        let (spec, w, shard) = setup();
        let out = client_fedl1(&spec, &w, &shard, &ClientConfig::default(), &mut streams()).unwrap();
        match &out.update {
            ClientUpdate::Sparse { mask, weights, .. } => {
                assert!(mask.iter().all(|&m| m));
                assert_eq!(weights.len(), w.len());
            }
            _ => panic!(),
        }
        let layout = Arc::new(
            nn::GroupLayout::new(2, vec![nn::Group { id: 0, ranges: vec![0..2] }], vec![]).unwrap(),
        );
        let p = GroupedParams::new(vec![0.6f32, 0.8], layout).unwrap();
        assert_eq!(l1_keep_mask(&p, 1.0), vec![false]);
        assert_eq!(l1_keep_mask(&p, 0.99), vec![true]);
    }

    #[test]
    fn feddrop_full_mask_matches_fedavg() {
        let (spec, w, shard) = setup();
        let cfg = ClientConfig::default();
        let mask = vec![true; 5];
        let sub = extract_submodel(&spec, &w.flat, &mask).unwrap();
        assert_eq!(sub, w.flat);
        let drop = client_feddrop(&spec, &sub, &mask, &shard, &cfg, &mut streams()).unwrap();
        let avg = client_fedavg(&spec, &w, &shard, &cfg, &mut streams()).unwrap();
        match drop.update {
            ClientUpdate::Submodel { params, .. } => assert_eq!(params.as_slice(), dense_params(&avg)),
            _ => panic!(),
        }
    }

    #[test]
    fn feddrop_shapes() {
        let (_, _, shard) = setup();
        let spec = ModelSpec::mlp(4, 8, 2);
        let layout = Arc::new(spec.layout().unwrap());
        let mut rng = crate::rng::stream(0, 0, 0, Purpose::Init);
        let w = spec.init_params::<f32, _>(layout, &mut rng).unwrap();
        let mask = vec![true, false, true, true, false, false, true, false];
        let sub = extract_submodel(&spec, &w.flat, &mask).unwrap();
        // 4 retained units × (4 inputs + bias + 2 outputs) + 2 output biases
        assert_eq!(sub.len(), 4 * 7 + 2);
        assert_eq!(sub.len(), submodel_wire_layout(&spec).floats_for(&mask));
        let idx = submodel_indices(&spec, &mask).unwrap();
        for (s, &i) in sub.iter().zip(&idx) {
            assert_eq!(*s, w.flat[i]);
        }
        let err = client_feddrop(&spec, &[0.0; 2], &[false; 8], &shard, &ClientConfig::default(), &mut streams());
        assert!(err.is_err());
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let ds = synth_classification(1, 2, 2, 2, 1.0).unwrap();
        let shards = partition_single_class(&ds, 2).unwrap();
        let mut shard = shards[0].clone();
        shard.train = shard.test.clone();
        let spec = ModelSpec::logreg(2, 2);
        let w = GroupedParams::zeros(Arc::new(spec.layout().unwrap()));
        assert!(client_fedavg(&spec, &w, &shard, &ClientConfig::default(), &mut streams()).is_err());
    }
}
