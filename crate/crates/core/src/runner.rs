//! Experiment configuration and the round loop.
//!
//! Every message between server and clients is encoded to bytes, counted,
//! and decoded on the receiving side, so the cost ledger measures exactly
//! what the algorithms consume.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{self, ClientConfig, ClientOutcome, ClientStreams, ClientUpdate, SparsePrior};
use crate::comms::{self, CostLedger, MaskedLayout, SparsePayload, SubmodelPayload, WireMessage};
use crate::data::{self, Dataset, ShardDataset};
use crate::error::{FedError, Result};
use crate::gates::init_v_for_target;
use crate::metrics::{self, Predictor, RoundRecord};
use crate::nn::{group_norms, GroupLayout, GroupedParams, Grouping, ModelKind, ModelSpec};
use crate::optim::{Hyper, OptimizerKind, OptimizerState};
use crate::rng::{self, Purpose, Streams, SERVER};
use crate::server::{self, SparseServer, SparseUpload};
use crate::strategy::Strategy;

pub const VERSION: &str = concat!("fedsim ", env!("CARGO_PKG_VERSION"));

/// Environment variable that overrides `--jobs`.
pub const JOBS_ENV: &str = "FEDSIM_JOBS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        n_per_class: usize,
        dim: usize,
        num_classes: usize,
        separation: f64,
    },
    /// Paths are relative to the config file.
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Dirichlet,
    SingleClass,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    pub num_shards: usize,
    /// Dirichlet concentration.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_dim: usize,
    /// Defaults to hidden units for the MLP and input features for logreg.
    #[serde(default)]
    pub grouping: Option<Grouping>,
    #[serde(default)]
    pub group_output: bool,
}

fn default_server_lr() -> f64 {
    1e-3
}
fn default_threshold_lr() -> f64 {
    1e-2
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_temperature() -> f64 {
    1e-3
}
fn default_theta_init() -> f64 {
    0.99
}
fn default_components() -> usize {
    2
}
fn default_mog_lambda() -> f64 {
    1.0
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    /// Optimizer fed with the difference pseudo-gradient.
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_server_lr")]
    pub lr: f64,
    /// Adamax step size for the FedSparse thresholds.
    #[serde(default = "default_threshold_lr")]
    pub threshold_lr: f64,
    #[serde(default = "default_epsilon")]
    pub prune_epsilon: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Initial inclusion probability of every group.
    #[serde(default = "default_theta_init")]
    pub theta_init: f64,
    #[serde(default = "default_components")]
    pub mog_components: usize,
    #[serde(default = "default_mog_lambda")]
    pub mog_lambda: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            optimizer: default_optimizer(),
            lr: default_server_lr(),
            threshold_lr: default_threshold_lr(),
            prune_epsilon: default_epsilon(),
            temperature: default_temperature(),
            theta_init: default_theta_init(),
            mog_components: default_components(),
            mog_lambda: default_mog_lambda(),
        }
    }
}

fn default_cohort() -> usize {
    10
}
fn default_eval_interval() -> u32 {
    10
}
fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u32,
    #[serde(default = "default_cohort")]
    pub cohort: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u32,
    pub strategy: Strategy,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Off by default so that metrics files are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub client: ClientConfig,
    #[serde(default)]
    pub server: ServerConfig,
    /// Directory that relative dataset paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> FedError {
    FedError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FedError::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// Replace one dotted key, e.g. `client.lambda0`, with a literal that is
    /// parsed as an integer, float, boolean or, failing those, a string.
    pub fn with_param(&self, key: &str, value: &str) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| config_err(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().ok_or_else(|| config_err("empty parameter key"))?;
        let mut table = &mut doc;
        for p in path {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| config_err(format!("`{p}` in `{key}` is not a table")))?;
        }
        let parsed = if let Ok(i) = value.parse::<i64>() {
            toml::Value::Integer(i)
        } else if let Ok(f) = value.parse::<f64>() {
            toml::Value::Float(f)
        } else if let Ok(b) = value.parse::<bool>() {
            toml::Value::Boolean(b)
        } else {
            toml::Value::String(value.to_string())
        };
        // integers are accepted where floats are expected
        let parsed = match (table.get(*last), parsed) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(last.to_string(), parsed);
        let text = toml::to_string(&doc).map_err(|e| config_err(e.to_string()))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| config_err(format!("setting `{key}` = {value}: {e}")))?;
        cfg.base_dir = self.base_dir.clone();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(config_err("rounds must be >= 1"));
        }
        if self.eval_interval == 0 {
            return Err(config_err("eval_interval must be >= 1"));
        }
        if self.partition.num_shards == 0 {
            return Err(config_err("partition.num_shards must be >= 1"));
        }
        if self.cohort == 0 || self.cohort > self.partition.num_shards {
            return Err(config_err(format!(
                "cohort must lie in [1, num_shards = {}], got {}",
                self.partition.num_shards, self.cohort
            )));
        }
        if !(self.partition.test_fraction > 0.0 && self.partition.test_fraction < 1.0) {
            return Err(config_err("partition.test_fraction must lie in (0,1)"));
        }
        match (self.partition.kind, self.partition.alpha) {
            (PartitionKind::Dirichlet, None) => return Err(config_err("dirichlet partition needs partition.alpha")),
            (PartitionKind::Dirichlet, Some(a)) if !(a > 0.0 && a.is_finite()) => {
                return Err(config_err("partition.alpha must be > 0"))
            }
            _ => {}
        }
        if let DatasetConfig::Synthetic {
            n_per_class,
            dim,
            num_classes,
            separation,
        } = &self.dataset
        {
            if *n_per_class == 0 || *dim == 0 || *num_classes < 2 {
                return Err(config_err("synthetic dataset needs n_per_class, dim >= 1 and num_classes >= 2"));
            }
            if !(*separation >= 0.0) {
                return Err(config_err("dataset.separation must be >= 0"));
            }
        }
        self.client.validate()?;
        let s = &self.server;
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return Err(config_err("server.lr must be > 0"));
        }
        if !(s.prune_epsilon > 0.0 && s.prune_epsilon < 1.0) {
            return Err(config_err("server.prune_epsilon must lie in (0,1)"));
        }
        if !(s.temperature > 0.0) {
            return Err(config_err("server.temperature must be > 0"));
        }
        match self.strategy {
            Strategy::Fedsparse => {
                if !(s.theta_init > 0.0 && s.theta_init < 1.0) {
                    return Err(config_err("server.theta_init must lie in (0,1)"));
                }
                if !(s.threshold_lr > 0.0) {
                    return Err(config_err("server.threshold_lr must be > 0"));
                }
                if !(self.client.lr_thresholds > 0.0) {
                    return Err(config_err("fedsparse needs client.lr_thresholds > 0"));
                }
            }
            Strategy::Mog => {
                if s.mog_components == 0 || !(s.mog_lambda > 0.0) {
                    return Err(config_err("mog needs server.mog_components >= 1 and server.mog_lambda > 0"));
                }
            }
            Strategy::Feddrop if self.model.kind != ModelKind::Mlp => {
                return Err(config_err("feddrop drops hidden units and needs model.kind = \"mlp\""));
            }
            _ => {}
        }
        let probe = self.model_spec(1, 2)?;
        probe.validate()?;
        probe.layout()?;
        Ok(())
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec> {
        let m = &self.model;
        let grouping = m.grouping.unwrap_or(match m.kind {
            ModelKind::Mlp => Grouping::PerHiddenUnit,
            ModelKind::Logreg => Grouping::PerInputFeature,
        });
        let spec = ModelSpec {
            kind: m.kind,
            input_dim,
            hidden_dim: m.hidden_dim,
            num_classes,
            grouping,
            group_output: m.group_output,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Dataset, shards (with train/test splits) and the model built on them.
pub struct Prepared {
    pub dataset: Dataset,
    pub shards: Vec<ShardDataset>,
    pub spec: ModelSpec,
}

fn seed_for(master: u64, client: u32, purpose: Purpose) -> u64 {
    rng::stream(master, 0, client, purpose).next_u64()
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let dataset = match &cfg.dataset {
        DatasetConfig::Synthetic {
            n_per_class,
            dim,
            num_classes,
            separation,
        } => data::synth_classification(
            seed_for(cfg.seed, SERVER, Purpose::Synth),
            *n_per_class,
            *dim,
            *num_classes,
            *separation,
        )?,
        DatasetConfig::Idx { images, labels } => {
            let base = cfg.base_dir.clone().unwrap_or_default();
            data::load_idx(&base.join(images), &base.join(labels))?
        }
    };
    let raw = match cfg.partition.kind {
        PartitionKind::Dirichlet => data::partition_dirichlet(
            &dataset,
            cfg.partition.num_shards,
            cfg.partition.alpha.unwrap_or(1.0),
            seed_for(cfg.seed, SERVER, Purpose::Partition),
        )?,
        PartitionKind::SingleClass => data::partition_single_class(&dataset, cfg.partition.num_shards)?,
    };
    let shards = raw
        .iter()
        .map(|s| data::split_train_test(&dataset, s, cfg.partition.test_fraction, seed_for(cfg.seed, s.shard_id, Purpose::Split)))
        .collect::<Result<Vec<_>>>()?;
    let spec = cfg.model_spec(dataset.dim(), dataset.num_classes)?;
    Ok(Prepared { dataset, shards, spec })
}

/// Per-strategy server state.
enum ServerModel {
    Global { w: GroupedParams<f32>, opt: OptimizerState<f32> },
    Sparse(SparseServer),
    Mixture(Vec<GroupedParams<f32>>),
}

/// Byte totals measured on the serialized frames themselves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportTotals {
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: String,
    pub strategy: Strategy,
    pub rounds: u32,
    pub num_params: usize,
    pub num_groups: usize,
    pub final_record: Option<RoundRecord>,
    pub bytes_up_total: u64,
    pub bytes_down_total: u64,
    /// Mean number of floats per upload.
    pub mean_upload_floats: f64,
    /// Groups removed at the end of training (FedSparse and FedL1).
    pub final_removed_groups: usize,
    pub config: ExperimentConfig,
}

pub struct RunReport {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    pub ledger: CostLedger,
    pub transport: TransportTotals,
    /// Final server weights (first component for mixtures).
    pub final_params: GroupedParams<f32>,
}

/// Sent over the simulated link: serialize, count, parse.
fn transmit(msg: &WireMessage) -> Result<(WireMessage, u64)> {
    let bytes = msg.to_bytes();
    let n = bytes.len() as u64;
    Ok((WireMessage::from_bytes(&bytes)?, n))
}

fn check_header(msg: &WireMessage, round: u32, client: u32, strategy: Strategy) -> Result<()> {
    let h = msg.header;
    if h.round != round || h.client_id != client || h.strategy != strategy {
        return Err(FedError::Protocol(format!(
            "frame for round {} client {} ({}) arrived at round {round} client {client} ({strategy})",
            h.round, h.client_id, h.strategy
        )));
    }
    Ok(())
}

/// What one client hands back for aggregation.
struct Returned {
    upload: WireMessage,
    probs: Option<Vec<f32>>,
}

pub fn resolve_jobs(flag: Option<usize>) -> usize {
    std::env::var(JOBS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&j| j > 0)
        .or(flag)
        .unwrap_or(1)
}

/// Run without touching the file system; `sink` sees each record as it is
/// produced.
pub fn simulate(
    cfg: &ExperimentConfig,
    jobs: usize,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<RunReport> {
    cfg.validate()?;
    let Prepared { shards, spec, .. } = prepare(cfg)?;
    let layout = Arc::new(spec.layout()?);
    let group_wire = MaskedLayout::from_groups(&layout);
    let unit_wire = clients::submodel_wire_layout(&spec);
    let streams = Streams::new(cfg.seed);
    let strategy = cfg.strategy;
    let sc = &cfg.server;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| FedError::InvalidArgument(format!("thread pool: {e}")))?;

    let w0 = spec.init_params::<f32, _>(layout.clone(), &mut streams.get(0, SERVER, Purpose::Init))?;
    let epsilon = sc.prune_epsilon as f32;
    let temperature = sc.temperature as f32;
    let server_opt = |len| OptimizerState::<f32>::new(sc.optimizer, Hyper::with_lr(sc.lr), len);
    let mut model = match strategy {
        Strategy::Fedsparse => {
            let v = init_v_for_target(&group_norms(&w0), sc.theta_init, temperature)?;
            ServerModel::Sparse(SparseServer {
                opt_w: server_opt(w0.len()),
                opt_v: OptimizerState::adamax(sc.threshold_lr, v.len()),
                w: w0.clone(),
                v,
                temperature,
                epsilon,
            })
        }
        Strategy::Mog => ServerModel::Mixture(
            (0..sc.mog_components)
                .map(|k| spec.init_params::<f32, _>(layout.clone(), &mut streams.get(k as u32, SERVER, Purpose::MixtureInit)))
                .collect::<Result<_>>()?,
        ),
        _ => ServerModel::Global {
            opt: server_opt(w0.len()),
            w: w0.clone(),
        },
    };

    let initial_snapshot = match &model {
        ServerModel::Mixture(comps) => comps[0].clone(),
        _ => w0.clone(),
    };
    let mut snapshots = vec![initial_snapshot; shards.len()];
    let mut ledger = CostLedger::new();
    let mut transport = TransportTotals::default();
    let mut records = Vec::new();
    let mut upload_floats = 0u64;
    let mut uploads_seen = 0u64;
    let started = Instant::now();
    let ccfg = &cfg.client;
    let l1 = ccfg.l1_strength as f32;

    for round in 1..=cfg.rounds {
        let mut chosen: Vec<u32> = rand::seq::index::sample(
            &mut streams.get(round, SERVER, Purpose::Cohort),
            shards.len(),
            cfg.cohort,
        )
        .into_iter()
        .map(|i| i as u32)
        .collect();
        chosen.sort_unstable();

        // the dispatch θ is what clients see and what their gates are compared to
        let mut dispatch_theta = None;
        let mut outbound: Vec<Vec<WireMessage>> = Vec::with_capacity(chosen.len());
        match &mut model {
            ServerModel::Sparse(srv) => {
                let (theta, keep) = srv.prune();
                let payload = SparsePayload {
                    weights: srv.w.gather(&keep)?,
                    mask: keep,
                    thresholds: Some(srv.v.clone()),
                };
                for &c in &chosen {
                    outbound.push(vec![comms::encode_sparse(round, c, strategy, &group_wire, &payload)?]);
                }
                dispatch_theta = Some(theta);
            }
            ServerModel::Mixture(comps) => {
                for &c in &chosen {
                    outbound.push(
                        comps
                            .iter()
                            .map(|w| comms::encode_dense(round, c, strategy, &w.flat))
                            .collect::<Result<_>>()?,
                    );
                }
            }
            ServerModel::Global { w, .. } => match strategy {
                Strategy::Fedl1 => {
                    let keep = clients::l1_keep_mask(w, l1);
                    let payload = SparsePayload {
                        weights: w.gather(&keep)?,
                        mask: keep,
                        thresholds: None,
                    };
                    for &c in &chosen {
                        outbound.push(vec![comms::encode_sparse(round, c, strategy, &group_wire, &payload)?]);
                    }
                }
                Strategy::Feddrop => {
                    let drop_masks = server::feddrop_masks(spec.hidden_dim, ccfg.drop_rate, &streams, round, &chosen)?;
                    for (&c, mask) in chosen.iter().zip(&drop_masks) {
                        let payload = SubmodelPayload {
                            params: clients::extract_submodel(&spec, &w.flat, mask)?,
                            unit_mask: mask.clone(),
                        };
                        outbound.push(vec![comms::encode_submodel(round, c, strategy, &unit_wire, &payload)?]);
                    }
                }
                _ => {
                    for &c in &chosen {
                        outbound.push(vec![comms::encode_dense(round, c, strategy, &w.flat)?]);
                    }
                }
            },
        }

        let mut inbound = Vec::with_capacity(outbound.len());
        for msgs in &outbound {
            let mut got = Vec::with_capacity(msgs.len());
            for m in msgs {
                let (received, n) = transmit(m)?;
                ledger.record_dispatch(m);
                transport.bytes_down += n;
                got.push(received);
            }
            inbound.push(got);
        }

        let work: Vec<(u32, Vec<WireMessage>)> = chosen.iter().copied().zip(inbound).collect();
        let run_client = |(c, msgs): &(u32, Vec<WireMessage>)| -> Result<Returned> {
            let c = *c;
            for m in msgs {
                check_header(m, round, c, strategy)?;
            }
            let shard = &shards[c as usize];
            let mut rngs = ClientStreams::new(&streams, round, c);
            let outcome: ClientOutcome = match strategy {
                Strategy::Fedsparse => {
                    let p = comms::decode_sparse(&msgs[0], &group_wire)?;
                    let w = GroupedParams::scatter(layout.clone(), &p.mask, &p.weights)?;
                    let v = p
                        .thresholds
                        .ok_or_else(|| FedError::Protocol("fedsparse dispatch without thresholds".into()))?;
                    let prior = SparsePrior {
                        w: &w,
                        v: &v,
                        temperature,
                    };
                    clients::client_fedsparse(&spec, &prior, shard, ccfg, &mut rngs)?
                }
                Strategy::Fedl1 => {
                    let p = comms::decode_sparse(&msgs[0], &group_wire)?;
                    let w = GroupedParams::scatter(layout.clone(), &p.mask, &p.weights)?;
                    clients::client_fedl1(&spec, &w, shard, ccfg, &mut rngs)?
                }
                Strategy::Feddrop => {
                    let p = comms::decode_submodel(&msgs[0], &unit_wire)?;
                    clients::client_feddrop(&spec, &p.params, &p.unit_mask, shard, ccfg, &mut rngs)?
                }
                Strategy::Mog => {
                    let comps = msgs
                        .iter()
                        .map(|m| GroupedParams::new(comms::decode_dense(m)?, layout.clone()))
                        .collect::<Result<Vec<_>>>()?;
                    clients::client_mog(&spec, &comps, sc.mog_lambda, shard, ccfg, &mut rngs)?
                }
                _ => {
                    let w = GroupedParams::new(comms::decode_dense(&msgs[0])?, layout.clone())?;
                    match strategy {
                        Strategy::Fedprox => clients::client_fedprox(&spec, &w, shard, ccfg, &mut rngs)?,
                        Strategy::Laplace | Strategy::Median => {
                            clients::client_laplace(&spec, &w, shard, ccfg, &mut rngs)?
                        }
                        _ => clients::client_fedavg(&spec, &w, shard, ccfg, &mut rngs)?,
                    }
                }
            };
            let upload = match outcome.update {
                ClientUpdate::Dense { params } => comms::encode_dense(round, c, strategy, &params)?,
                ClientUpdate::Sparse {
                    mask,
                    weights,
                    thresholds,
                } => comms::encode_sparse(
                    round,
                    c,
                    strategy,
                    &group_wire,
                    &SparsePayload {
                        mask,
                        weights,
                        thresholds,
                    },
                )?,
                ClientUpdate::Submodel { unit_mask, params } => {
                    comms::encode_submodel(round, c, strategy, &unit_wire, &SubmodelPayload { unit_mask, params })?
                }
            };
            Ok(Returned {
                upload,
                probs: outcome.gate_probs,
            })
        };
        let results: Vec<Result<Returned>> = pool.install(|| work.par_iter().map(run_client).collect());

        let mut returned = Vec::with_capacity(results.len());
        for (r, &c) in results.into_iter().zip(&chosen) {
            let r = r.map_err(|e| e.at(Some(round), Some(c), None))?;
            let (received, n) = transmit(&r.upload)?;
            check_header(&received, round, c, strategy)?;
            ledger.record_upload(&r.upload);
            transport.bytes_up += n;
            returned.push((c, received, r.probs));
        }

        let mut round_probs = Vec::new();
        match &mut model {
            ServerModel::Sparse(srv) => {
                let mut decoded = Vec::with_capacity(returned.len());
                for (c, msg, probs) in &returned {
                    let p = comms::decode_sparse(msg, &group_wire)?;
                    upload_floats += p.weights.len() as u64;
                    let full = GroupedParams::scatter(layout.clone(), &p.mask, &p.weights)?;
                    snapshots[*c as usize] = full.clone();
                    decoded.push((p.mask, full));
                    if let Some(pr) = probs {
                        round_probs.push(pr.clone());
                    }
                }
                let ups: Vec<SparseUpload<'_, f32>> = decoded
                    .iter()
                    .map(|(m, w)| SparseUpload {
                        mask: m,
                        weights: &w.flat,
                    })
                    .collect();
                srv.round(dispatch_theta.as_deref().expect("sparse dispatch"), &ups)
                    .map_err(|e| e.at(Some(round), None, None))?;
            }
            ServerModel::Mixture(comps) => {
                let mut ups = Vec::with_capacity(returned.len());
                for (c, msg, _) in &returned {
                    let flat = comms::decode_dense(msg)?;
                    upload_floats += flat.len() as u64;
                    snapshots[*c as usize] = GroupedParams::new(flat.clone(), layout.clone())?;
                    ups.push(flat);
                }
                let current: Vec<Vec<f32>> = comps.iter().map(|c| c.flat.clone()).collect();
                let next = server::mog_update(&current, &ups, sc.mog_lambda as f32)?;
                for (comp, flat) in comps.iter_mut().zip(next) {
                    comp.flat = flat;
                }
            }
            ServerModel::Global { w, opt } => match strategy {
                Strategy::Feddrop => {
                    let mut subs = Vec::with_capacity(returned.len());
                    for (c, msg, _) in &returned {
                        let p = comms::decode_submodel(msg, &unit_wire)?;
                        upload_floats += p.params.len() as u64;
                        let idx = clients::submodel_indices(&spec, &p.unit_mask)?;
                        let mut snap = GroupedParams::zeros(layout.clone());
                        for (&i, &x) in idx.iter().zip(&p.params) {
                            snap.flat[i] = x;
                        }
                        snapshots[*c as usize] = snap;
                        subs.push((idx, p.params));
                    }
                    let (g, covered) = server::feddrop_pseudo_gradient(&w.flat, &subs)?;
                    opt.step_masked(&mut w.flat, &g, true, &covered)
                        .map_err(|e| e.at(Some(round), None, None))?;
                }
                _ => {
                    let mut ups = Vec::with_capacity(returned.len());
                    for (c, msg, _) in &returned {
                        let flat = if strategy == Strategy::Fedl1 {
                            let p = comms::decode_sparse(msg, &group_wire)?;
                            upload_floats += p.weights.len() as u64;
                            GroupedParams::scatter(layout.clone(), &p.mask, &p.weights)?.flat
                        } else {
                            let flat = comms::decode_dense(msg)?;
                            upload_floats += flat.len() as u64;
                            flat
                        };
                        snapshots[*c as usize] = GroupedParams::new(flat.clone(), layout.clone())?;
                        ups.push(flat);
                    }
                    let at = |e: FedError| e.at(Some(round), None, None);
                    if strategy == Strategy::Median {
                        let target = server::aggregate_median(&ups)?;
                        let g: Vec<f32> = target.iter().zip(&w.flat).map(|(t, x)| t - x).collect();
                        opt.step(&mut w.flat, &g, true).map_err(at)?;
                    } else {
                        server::server_step_difference(&mut w.flat, &ups, opt).map_err(at)?;
                    }
                }
            },
        }
        uploads_seen += returned.len() as u64;

        if round % cfg.eval_interval == 0 || round == cfg.rounds {
            let (global_acc, sparsity_pct) = match &model {
                ServerModel::Sparse(srv) => {
                    let theta = srv.theta();
                    let mut pruned = srv.w.clone();
                    server::prune(&mut pruned, &theta, epsilon);
                    (
                        metrics::global_accuracy(&spec, &Predictor::Single(&pruned), &shards)?,
                        metrics::sparsity_ratio(&theta, epsilon, &layout.group_sizes()),
                    )
                }
                ServerModel::Mixture(comps) => (metrics::global_accuracy(&spec, &Predictor::Ensemble(comps), &shards)?, 0.0),
                ServerModel::Global { w, .. } => {
                    let sparsity = if strategy == Strategy::Fedl1 {
                        let removed: Vec<bool> = clients::l1_keep_mask(w, l1).iter().map(|k| !k).collect();
                        metrics::pruned_ratio(&removed, &layout.group_sizes())
                    } else {
                        0.0
                    };
                    (metrics::global_accuracy(&spec, &Predictor::Single(w), &shards)?, sparsity)
                }
            };
            let (tv_avg, tv_max) = match &dispatch_theta {
                Some(theta) => metrics::tv_alignment(&round_probs, theta)?,
                None => (0.0, 0.0),
            };
            let (bytes_up_cum, bytes_down_cum) = ledger.cumulative_through(round);
            let record = RoundRecord {
                round,
                global_acc,
                local_acc_mean: metrics::local_accuracy(&spec, &snapshots, &shards)?,
                sparsity_pct,
                tv_avg,
                tv_max,
                bytes_up_cum,
                bytes_down_cum,
                wall_ms: if cfg.record_wall_time {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            sink(&record)?;
            records.push(record);
        }
    }

    let (final_params, removed) = match &model {
        ServerModel::Sparse(srv) => {
            let theta = srv.theta();
            let mut w = srv.w.clone();
            let keep = server::prune(&mut w, &theta, epsilon);
            (w, keep.iter().filter(|&&k| !k).count())
        }
        ServerModel::Mixture(comps) => (comps[0].clone(), 0),
        ServerModel::Global { w, .. } => {
            let removed = if strategy == Strategy::Fedl1 {
                clients::l1_keep_mask(w, l1).iter().filter(|&&k| !k).count()
            } else {
                0
            };
            (w.clone(), removed)
        }
    };
    let summary = Summary {
        version: VERSION.to_string(),
        strategy,
        rounds: cfg.rounds,
        num_params: layout.len(),
        num_groups: layout.num_groups(),
        final_record: records.last().cloned(),
        bytes_up_total: ledger.bytes_up(),
        bytes_down_total: ledger.bytes_down(),
        mean_upload_floats: if uploads_seen == 0 {
            0.0
        } else {
            upload_floats as f64 / uploads_seen as f64
        },
        final_removed_groups: removed,
        config: cfg.clone(),
    };
    Ok(RunReport {
        records,
        summary,
        ledger,
        transport,
        final_params,
    })
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Run and write `metrics.csv` (flushed after every record) and
/// `summary.json` into the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<RunReport> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| FedError::io(format!("creating {}", dir.display()), e))?;
    let path = dir.join(METRICS_FILE);
    let file = File::create(&path).map_err(|e| FedError::io(format!("creating {}", path.display()), e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let io = |e: std::io::Error| FedError::io(format!("writing {}", path.display()), e);
    let csv_err = |e: csv::Error| FedError::io(format!("writing {}", path.display()), e.into());
    writer.write_record(metrics::CSV_COLUMNS).map_err(csv_err)?;
    writer.flush().map_err(io)?;
    let report = simulate(cfg, jobs, &mut |rec| {
        writer.serialize(rec).map_err(csv_err)?;
        writer.flush().map_err(io)
    })?;
    let summary_path = dir.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&report.summary)
        .map_err(|e| FedError::InvalidArgument(format!("serializing summary: {e}")))?;
    text.push('\n');
    fs::write(&summary_path, text).map_err(|e| FedError::io(format!("writing {}", summary_path.display()), e))?;
    Ok(report)
}

/// Per-shard split sizes and label histograms, one line per shard.
pub fn inspect_partition(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let mut out = String::new();
    out.push_str(&format!(
        "{} examples, {} classes, {} shards\n",
        prepared.dataset.len(),
        prepared.dataset.num_classes,
        prepared.shards.len()
    ));
    for s in &prepared.shards {
        let hist: Vec<String> = s.label_histogram.iter().map(usize::to_string).collect();
        out.push_str(&format!(
            "shard {:>4}  train {:>6}  test {:>5}  labels [{}]\n",
            s.shard_id,
            s.train.len(),
            s.test.len(),
            hist.join(" ")
        ));
    }
    Ok(out)
}

/// Group layout shared by every participant for a config.
pub fn layout_for(cfg: &ExperimentConfig) -> Result<GroupLayout> {
    prepare(cfg)?.spec.layout()
}
