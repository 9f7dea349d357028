//! Aggregation rules (the M-step of each strategy).

use rand::Rng;

use crate::error::{FedError, Result};
use crate::gates::theta_from_magnitude;
use crate::nn::{group_norms, GroupedParams};
use crate::optim::OptimizerState;
use crate::rng::{Purpose, Streams};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Resampling budget when a dropout mask retains no hidden unit.
pub const DROP_RETRIES: usize = 100;

/// Components whose total responsibility falls below this keep their value.
pub const MOG_MIN_MASS: f64 = 1e-12;

fn check_updates<S, U: AsRef<[S]>>(updates: &[U], len: Option<usize>) -> Result<usize> {
    let first = updates
        .first()
        .ok_or_else(|| FedError::InvalidArgument("no client updates to aggregate".into()))?
        .as_ref()
        .len();
    let n = len.unwrap_or(first);
    for u in updates {
        if u.as_ref().len() != n {
            return Err(FedError::shape("client update", n, u.as_ref().len()));
        }
    }
    Ok(n)
}

/// Coordinate-wise mean.
pub fn aggregate_average<S: Scalar, U: AsRef<[S]>>(updates: &[U]) -> Result<Vec<S>> {
    let n = check_updates(updates, None)?;
    let count = S::of_usize(updates.len());
    let mut out = vec![S::zero(); n];
    for u in updates {
        for (o, &x) in out.iter_mut().zip(u.as_ref()) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= count);
    Ok(out)
}

/// `(1/|B|)·Σ_s (w_s − w)`.
pub fn difference_gradient<S: Scalar, U: AsRef<[S]>>(w: &[S], updates: &[U]) -> Result<Vec<S>> {
    let n = check_updates(updates, Some(w.len()))?;
    let count = S::of_usize(updates.len());
    let mut g = vec![S::zero(); n];
    for u in updates {
        for ((gi, &x), &p) in g.iter_mut().zip(u.as_ref()).zip(w) {
            *gi += x - p;
        }
    }
    g.iter_mut().for_each(|x| *x /= count);
    Ok(g)
}

/// Feed the difference pseudo-gradient to an ascent step.
pub fn server_step_difference<S: Scalar, U: AsRef<[S]>>(
    w: &mut [S],
    updates: &[U],
    optimizer: &mut OptimizerState<S>,
) -> Result<()> {
    let g = difference_gradient(w, updates)?;
    optimizer.step(w, &g, true)
}

/// Coordinate-wise median; an even count takes the mean of the middle pair.
pub fn aggregate_median<S: Scalar, U: AsRef<[S]>>(updates: &[U]) -> Result<Vec<S>> {
    let n = check_updates(updates, None)?;
    let m = updates.len();
    let two = S::of(2.0);
    let mut column = vec![S::zero(); m];
    Ok((0..n)
        .map(|j| {
            for (c, u) in column.iter_mut().zip(updates) {
                *c = u.as_ref()[j];
            }
            column.sort_by(|a, b| a.partial_cmp(b).expect("finite updates"));
            if m % 2 == 1 {
                column[m / 2]
            } else {
                (column[m / 2 - 1] + column[m / 2]) / two
            }
        })
        .collect())
}

/// `r_k ∝ exp(−λ/2·‖w_s − w_k‖²)`, normalized through log-sum-exp.
pub fn mog_responsibilities<'a, S: Scalar, I>(w_s: &[S], components: I, lambda: S) -> Vec<S>
where
    I: IntoIterator<Item = &'a [S]>,
{
    let half = S::of(0.5);
    let logits: Vec<S> = components
        .into_iter()
        .map(|c| {
            let d2: S = w_s.iter().zip(c).map(|(&a, &b)| (a - b) * (a - b)).sum();
            -half * lambda * d2
        })
        .collect();
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// One closed-form centroid update per component.
pub fn mog_update<S: Scalar, U: AsRef<[S]>>(ensemble: &[Vec<S>], updates: &[U], lambda: S) -> Result<Vec<Vec<S>>> {
    let n = check_updates(updates, ensemble.first().map(Vec::len))?;
    if ensemble.is_empty() {
        return Err(FedError::InvalidArgument("mixture needs at least one component".into()));
    }
    let k = ensemble.len();
    let mut mass = vec![S::zero(); k];
    let mut sums = vec![vec![S::zero(); n]; k];
    for u in updates {
        let u = u.as_ref();
        let r = mog_responsibilities(u, ensemble.iter().map(Vec::as_slice), lambda);
        for c in 0..k {
            mass[c] += r[c];
            for (s, &x) in sums[c].iter_mut().zip(u) {
                *s += r[c] * x;
            }
        }
    }
    Ok((0..k)
        .map(|c| {
            if mass[c].as_f64() < MOG_MIN_MASS {
                ensemble[c].clone()
            } else {
                sums[c].iter().map(|&s| s / mass[c]).collect()
            }
        })
        .collect())
}

/// Stationary point of the FedSparse server objective: a π-weighted average
/// of the local weights and the plain average of the local probabilities.
/// Coordinates of ungrouped ranges weigh every client equally.
pub fn stationary_weighted_average<S: Scalar>(
    previous: &GroupedParams<S>,
    updates: &[(&[S], &[S])],
) -> Result<(Vec<S>, Vec<S>)> {
    let layout = previous.layout();
    let g_count = layout.num_groups();
    let mut theta = vec![S::zero(); g_count];
    let mut num = vec![S::zero(); previous.len()];
    let mut den = vec![S::zero(); previous.len()];
    for (w_s, pi) in updates {
        if w_s.len() != previous.len() {
            return Err(FedError::shape("client weights", previous.len(), w_s.len()));
        }
        if pi.len() != g_count {
            return Err(FedError::shape("client probabilities", g_count, pi.len()));
        }
        for (t, &p) in theta.iter_mut().zip(pi.iter()) {
            *t += p;
        }
        for i in 0..previous.len() {
            let p = layout.owner(i).map_or(S::one(), |g| pi[g]);
            num[i] += p * w_s[i];
            den[i] += p;
        }
    }
    if !updates.is_empty() {
        let count = S::of_usize(updates.len());
        theta.iter_mut().for_each(|t| *t /= count);
    }
    let w = (0..previous.len())
        .map(|i| if den[i] > S::zero() { num[i] / den[i] } else { previous.flat[i] })
        .collect();
    Ok((w, theta))
}

/// A decoded FedSparse upload, with dropped groups already zero-filled.
pub struct SparseUpload<'a, S> {
    pub mask: &'a [bool],
    pub weights: &'a [S],
}

/// Server pseudo-gradients for weights and thresholds, each averaged over
/// the received uploads:
///
/// `∇w = Σ z_s(ŵ_s − w)`, `∇v = Σ −(z_s(1−θ) − (1−z_s)θ)·σ(v)/T`.
///
/// Ungrouped coordinates always count as open.
pub fn fedsparse_gradients<S: Scalar>(
    w: &GroupedParams<S>,
    v: &[S],
    theta: &[S],
    temperature: S,
    uploads: &[SparseUpload<'_, S>],
) -> Result<(Vec<S>, Vec<S>)> {
    let layout = w.layout();
    let g_count = layout.num_groups();
    if v.len() != g_count || theta.len() != g_count {
        return Err(FedError::shape("server thresholds", g_count, v.len()));
    }
    if uploads.is_empty() {
        return Err(FedError::InvalidArgument("no client updates to aggregate".into()));
    }
    let mut gw = vec![S::zero(); w.len()];
    let mut gv = vec![S::zero(); g_count];
    for up in uploads {
        if up.mask.len() != g_count {
            return Err(FedError::Protocol(format!(
                "upload bitmask has {} bits, model has {} groups",
                up.mask.len(),
                g_count
            )));
        }
        if up.weights.len() != w.len() {
            return Err(FedError::shape("upload weights", w.len(), up.weights.len()));
        }
        for i in 0..w.len() {
            if layout.owner(i).is_none_or(|g| up.mask[g]) {
                gw[i] += up.weights[i] - w.flat[i];
            }
        }
        for g in 0..g_count {
            let open = if up.mask[g] { S::one() } else { S::zero() };
            let d_theta = open * (S::one() - theta[g]) - (S::one() - open) * theta[g];
            gv[g] += -d_theta * sigmoid(v[g]) / temperature;
        }
    }
    let count = S::of_usize(uploads.len());
    gw.iter_mut().for_each(|x| *x /= count);
    gv.iter_mut().for_each(|x| *x /= count);
    Ok((gw, gv))
}

/// Groups that survive pruning (`θ > ε`).
pub fn keep_mask<S: Scalar>(theta: &[S], epsilon: S) -> Vec<bool> {
    theta.iter().map(|&t| t > epsilon).collect()
}

/// Zero every group with `θ ≤ ε`; returns the survivors.
pub fn prune<S: Scalar>(w: &mut GroupedParams<S>, theta: &[S], epsilon: S) -> Vec<bool> {
    let keep = keep_mask(theta, epsilon);
    for (g, &k) in keep.iter().enumerate() {
        if !k {
            w.zero_group(g);
        }
    }
    keep
}

/// Server side of FedSparse: the global weights, their thresholds and the
/// two ascent optimizers.
#[derive(Debug, Clone)]
pub struct SparseServer {
    pub w: GroupedParams<f32>,
    pub v: Vec<f32>,
    pub temperature: f32,
    pub epsilon: f32,
    pub opt_w: OptimizerState<f32>,
    pub opt_v: OptimizerState<f32>,
}

impl SparseServer {
    pub fn theta(&self) -> Vec<f32> {
        let tau: Vec<f32> = self.v.iter().map(|&x| softplus(x)).collect();
        theta_from_magnitude(&group_norms(&self.w), &tau, self.temperature)
    }

    /// Recompute θ and prune; returns (θ, surviving groups).
    pub fn prune(&mut self) -> (Vec<f32>, Vec<bool>) {
        let theta = self.theta();
        let keep = prune(&mut self.w, &theta, self.epsilon);
        (theta, keep)
    }

    /// Aggregate one round's uploads. `theta` is the value the round was
    /// dispatched with.
    pub fn round(&mut self, theta: &[f32], uploads: &[SparseUpload<'_, f32>]) -> Result<()> {
        let (gw, gv) = fedsparse_gradients(&self.w, &self.v, theta, self.temperature, uploads)?;
        self.opt_w.step(&mut self.w.flat, &gw, true)?;
        self.opt_v.step(&mut self.v, &gv, true)?;
        Ok(())
    }
}

/// Independent retain-masks over `hidden` units, one per client.
pub fn feddrop_masks(hidden: usize, drop_rate: f64, streams: &Streams, round: u32, clients: &[u32]) -> Result<Vec<Vec<bool>>> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(FedError::InvalidArgument(format!("drop rate {drop_rate} outside [0,1)")));
    }
    clients
        .iter()
        .map(|&c| {
            let mut rng = streams.get(round, c, Purpose::DropMask);
            for _ in 0..DROP_RETRIES {
                let mask: Vec<bool> = (0..hidden).map(|_| !rng.random_bool(drop_rate)).collect();
                if mask.iter().any(|&m| m) {
                    return Ok(mask);
                }
            }
            Err(FedError::InvalidArgument(format!(
                "dropout mask for client {c} retained no hidden unit after {DROP_RETRIES} draws; lower the drop rate"
            )))
        })
        .collect()
}

/// Per-coordinate mean over the clients whose submodel covers it, returned
/// as a difference pseudo-gradient together with the coverage mask.
/// Uncovered coordinates get a zero gradient.
pub fn feddrop_pseudo_gradient<S: Scalar>(w: &[S], submodels: &[(Vec<usize>, Vec<S>)]) -> Result<(Vec<S>, Vec<bool>)> {
    let mut sums = vec![S::zero(); w.len()];
    let mut counts = vec![0usize; w.len()];
    for (idx, vals) in submodels {
        if idx.len() != vals.len() {
            return Err(FedError::shape("submodel values", idx.len(), vals.len()));
        }
        for (&i, &x) in idx.iter().zip(vals) {
            if i >= w.len() {
                return Err(FedError::shape("submodel index bound", w.len(), i));
            }
            sums[i] += x - w[i];
            counts[i] += 1;
        }
    }
    let covered: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    let grad = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / S::of_usize(c) } else { S::zero() })
        .collect();
    Ok((grad, covered))
}

/// Closed-form merge: covered coordinates become the mean over covering
/// clients, the rest are left as they were.
pub fn feddrop_merge<S: Scalar>(w: &[S], submodels: &[(Vec<usize>, Vec<S>)]) -> Result<Vec<S>> {
    let mut sums = vec![S::zero(); w.len()];
    let mut counts = vec![0usize; w.len()];
    for (idx, vals) in submodels {
        for (&i, &x) in idx.iter().zip(vals) {
            if i >= w.len() {
                return Err(FedError::shape("submodel index bound", w.len(), i));
            }
            sums[i] += x;
            counts[i] += 1;
        }
    }
    Ok((0..w.len())
        .map(|i| if counts[i] > 0 { sums[i] / S::of_usize(counts[i]) } else { w[i] })
        .collect())
}
