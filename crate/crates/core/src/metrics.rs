//! Accuracy, sparsity and gate-alignment statistics, and the per-round
//! record written to `metrics.csv`.

use serde::{Deserialize, Serialize};

use crate::data::{Examples, ShardDataset};
use crate::error::{FedError, Result};
use crate::nn::{self, argmax_rows, GroupedParams, ModelSpec};

/// Column order of `metrics.csv`.
pub const CSV_COLUMNS: [&str; 9] = [
    "round",
    "global_acc",
    "local_acc_mean",
    "sparsity_pct",
    "tv_avg",
    "tv_max",
    "bytes_up_cum",
    "bytes_down_cum",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub global_acc: f64,
    pub local_acc_mean: f64,
    pub sparsity_pct: f64,
    pub tv_avg: f64,
    pub tv_max: f64,
    pub bytes_up_cum: u64,
    pub bytes_down_cum: u64,
    pub wall_ms: u64,
}

/// How the server model predicts.
pub enum Predictor<'a> {
    Single(&'a GroupedParams<f32>),
    /// Mixture ensemble: class probabilities averaged over components.
    Ensemble(&'a [GroupedParams<f32>]),
}

fn correct(spec: &ModelSpec, model: &Predictor<'_>, set: &Examples) -> Result<usize> {
    if set.is_empty() {
        return Ok(0);
    }
    let pred = match model {
        Predictor::Single(p) => nn::predict(spec, p, &set.inputs, None)?,
        Predictor::Ensemble(comps) => {
            let c = spec.num_classes;
            let mut avg = vec![0.0f32; set.len() * c];
            for comp in comps.iter() {
                let probs = nn::predict_proba(spec, comp, &set.inputs)?;
                for (a, &p) in avg.iter_mut().zip(probs.data()) {
                    *a += p;
                }
            }
            argmax_rows(&avg, c)
        }
    };
    Ok(pred.iter().zip(&set.labels).filter(|(p, y)| p == y).count())
}

/// Accuracy of one model on one example set.
pub fn accuracy(spec: &ModelSpec, params: &GroupedParams<f32>, set: &Examples) -> Result<f64> {
    if set.is_empty() {
        return Err(FedError::InvalidArgument("accuracy over an empty test set".into()));
    }
    Ok(correct(spec, &Predictor::Single(params), set)? as f64 / set.len() as f64)
}

/// Accuracy of the server model on the union of all shard test sets.
pub fn global_accuracy(spec: &ModelSpec, model: &Predictor<'_>, shards: &[ShardDataset]) -> Result<f64> {
    let total: usize = shards.iter().map(|s| s.test.len()).sum();
    if total == 0 {
        return Err(FedError::InvalidArgument("global accuracy over an empty test union".into()));
    }
    let mut hits = 0;
    for s in shards {
        hits += correct(spec, model, &s.test)?;
    }
    Ok(hits as f64 / total as f64)
}

/// Mean over shards of each shard's last-communicated model on its own test
/// set. Snapshots already carry any gate or dropout masking.
pub fn local_accuracy(spec: &ModelSpec, snapshots: &[GroupedParams<f32>], shards: &[ShardDataset]) -> Result<f64> {
    if snapshots.len() != shards.len() {
        return Err(FedError::shape("snapshots", shards.len(), snapshots.len()));
    }
    if shards.is_empty() {
        return Err(FedError::InvalidArgument("local accuracy without shards".into()));
    }
    let mut sum = 0.0;
    for (snap, shard) in snapshots.iter().zip(shards) {
        sum += accuracy(spec, snap, &shard.test)?;
    }
    Ok(sum / shards.len() as f64)
}

/// Percentage of grouped parameters whose group has `θ ≤ ε`.
pub fn sparsity_ratio(theta: &[f32], epsilon: f32, group_sizes: &[usize]) -> f64 {
    let total: usize = group_sizes.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let off: usize = theta
        .iter()
        .zip(group_sizes)
        .filter(|(&t, _)| t <= epsilon)
        .map(|(_, &s)| s)
        .sum();
    100.0 * off as f64 / total as f64
}

/// Percentage of grouped parameters in groups flagged as removed.
pub fn pruned_ratio(removed: &[bool], group_sizes: &[usize]) -> f64 {
    let total: usize = group_sizes.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let off: usize = removed.iter().zip(group_sizes).filter(|(&r, _)| r).map(|(_, &s)| s).sum();
    100.0 * off as f64 / total as f64
}

/// Mean and maximum of `|π − θ|` over every (client, gate) pair.
pub fn tv_alignment(pis: &[Vec<f32>], theta: &[f32]) -> Result<(f64, f64)> {
    let mut sum = 0.0f64;
    let mut max = 0.0f64;
    let mut count = 0usize;
    for pi in pis {
        if pi.len() != theta.len() {
            return Err(FedError::shape("client gate probabilities", theta.len(), pi.len()));
        }
        for (&p, &t) in pi.iter().zip(theta) {
            let d = (p as f64 - t as f64).abs();
            sum += d;
            max = max.max(d);
            count += 1;
        }
    }
    Ok(if count == 0 { (0.0, 0.0) } else { (sum / count as f64, max) })
}
