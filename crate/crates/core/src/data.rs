//! Datasets and federated sharding.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{FedError, Result};
use crate::nn::{Batch, DenseMatrix};
use crate::rng::{stream, Purpose, SERVER};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Retries before a Dirichlet partition with an empty shard is abandoned.
pub const PARTITION_RETRIES: usize = 100;

/// A labelled dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DenseMatrix<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: DenseMatrix<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(FedError::InvalidArgument("dataset is empty".into()));
        }
        if labels.len() != inputs.rows() {
            return Err(FedError::shape("dataset labels", inputs.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(FedError::shape("dataset label", format!("< {num_classes}"), bad));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn histogram(&self, idx: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in idx {
            h[self.labels[i]] += 1;
        }
        h
    }

    fn examples(&self, idx: Vec<usize>) -> Examples {
        Examples {
            inputs: self.inputs.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            indices: idx,
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FedError::Format(format!("{what}: truncated header")))
}

/// Parse IDX image and label buffers; pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FedError::Format(format!("images: bad magic {magic:#010x}")));
    }
    let magic = read_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FedError::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let n = read_u32(images, 4, "images")? as usize;
    let rows = read_u32(images, 8, "images")? as usize;
    let cols = read_u32(images, 12, "images")? as usize;
    let n_labels = read_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(FedError::Consistency(format!(
            "image file holds {n} items but label file holds {n_labels}"
        )));
    }
    let d = rows * cols;
    let pixels = &images[16..];
    if pixels.len() != n * d {
        return Err(FedError::Format(format!(
            "images: expected {} pixel bytes, found {}",
            n * d,
            pixels.len()
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != n {
        return Err(FedError::Format(format!(
            "labels: expected {n} label bytes, found {}",
            label_bytes.len()
        )));
    }
    let data = pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| usize::from(b)).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    Dataset::new(DenseMatrix::new(n, d, data)?, labels, num_classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| FedError::io(images_path.display().to_string(), e))?;
    let labels = std::fs::read(labels_path).map_err(|e| FedError::io(labels_path.display().to_string(), e))?;
    parse_idx(&images, &labels)
}

/// Serialize images into the IDX layout (used to build fixtures).
pub fn encode_idx_images(rows: u32, cols: u32, pixels: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len() * (rows * cols) as usize);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    for img in pixels {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Gaussian blobs with unit within-class variance. Class means are
/// orthogonal (when `num_classes <= d`) and pairwise `class_separation` apart.
pub fn synth_classification(
    seed: u64,
    n_per_class: usize,
    d: usize,
    num_classes: usize,
    class_separation: f64,
) -> Result<Dataset> {
    if n_per_class == 0 || d == 0 || num_classes < 2 {
        return Err(FedError::InvalidArgument(
            "synthetic data needs n_per_class >= 1, d >= 1, num_classes >= 2".into(),
        ));
    }
    let mut rng = stream(seed, 0, SERVER, Purpose::Synth);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if dirs.len() < d {
            for q in &dirs {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(q) {
                    *a -= dot * b;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        dirs.push(v);
    }
    let radius = class_separation / std::f64::consts::SQRT_2;
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for q in &dirs[c] {
            let noise: f64 = rng.sample(StandardNormal);
            data.push((radius * q + noise) as f32);
        }
        labels.push(c);
    }
    Dataset::new(DenseMatrix::new(n, d, data)?, labels, num_classes)
}

/// A subset of a dataset, possibly empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    pub inputs: DenseMatrix<f32>,
    pub labels: Vec<usize>,
    /// Positions in the parent dataset.
    pub indices: Vec<usize>,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch<f32>> {
        Batch::new(
            self.inputs.select_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    pub fn all(&self) -> Result<Batch<f32>> {
        Batch::new(self.inputs.clone(), self.labels.clone())
    }
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardDataset {
    pub shard_id: u32,
    pub train: Examples,
    pub test: Examples,
    /// Label counts over train and test together.
    pub label_histogram: Vec<usize>,
}

impl ShardDataset {
    fn from_indices(dataset: &Dataset, shard_id: u32, idx: Vec<usize>) -> Self {
        let label_histogram = dataset.histogram(&idx);
        ShardDataset {
            shard_id,
            train: dataset.examples(idx),
            test: dataset.examples(Vec::new()),
            label_histogram,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| draws.into_iter().map(|g| g / total).collect())
}

/// Label-skewed split: each class is divided among the shards according to
/// proportions drawn from `Dirichlet(alpha·1)`.
pub fn partition_dirichlet(dataset: &Dataset, num_shards: usize, alpha: f64, seed: u64) -> Result<Vec<ShardDataset>> {
    if num_shards == 0 {
        return Err(FedError::InvalidArgument("num_shards must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let mut rng = stream(seed, 0, SERVER, Purpose::Partition);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for _ in 0..PARTITION_RETRIES {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); num_shards];
        let mut ok = true;
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let Some(props) = dirichlet(alpha, num_shards, &mut rng) else {
                ok = false;
                break;
            };
            let n = members.len();
            let mut start = 0;
            let mut acc = 0.0;
            for (s, p) in props.iter().enumerate() {
                acc += p;
                let end = if s + 1 == num_shards { n } else { ((acc * n as f64).round() as usize).min(n) };
                let end = end.max(start);
                shards[s].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if ok && shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards
                .into_iter()
                .enumerate()
                .map(|(s, idx)| ShardDataset::from_indices(dataset, s as u32, idx))
                .collect());
        }
    }
    Err(FedError::Partition(format!(
        "could not give every one of {num_shards} shards an example after {PARTITION_RETRIES} draws; \
         use a larger alpha or fewer shards"
    )))
}

/// Pathological split where shard `i` holds only class `i mod num_classes`.
pub fn partition_single_class(dataset: &Dataset, num_shards: usize) -> Result<Vec<ShardDataset>> {
    let c = dataset.num_classes;
    if num_shards == 0 || num_shards % c != 0 {
        return Err(FedError::Partition(format!(
            "num_shards ({num_shards}) must be a positive multiple of num_classes ({c})"
        )));
    }
    let per_class = num_shards / c;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut shards = Vec::with_capacity(num_shards);
    for s in 0..num_shards {
        let (class, slot) = (s % c, s / c);
        let members = &by_class[class];
        let n = members.len();
        let (start, end) = (slot * n / per_class, (slot + 1) * n / per_class);
        if start == end {
            return Err(FedError::Partition(format!(
                "class {class} has {n} examples, too few for {per_class} shards"
            )));
        }
        shards.push(ShardDataset::from_indices(dataset, s as u32, members[start..end].to_vec()));
    }
    Ok(shards)
}

/// Seeded disjoint train/test split; the test side gets
/// `ceil(test_fraction · size)` examples.
pub fn split_train_test(dataset: &Dataset, shard: &ShardDataset, test_fraction: f64, seed: u64) -> Result<ShardDataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(FedError::InvalidArgument(format!(
            "test_fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    let size = shard.len();
    if size < 2 {
        return Err(FedError::Partition(format!(
            "shard {} holds {size} example(s); at least 2 are needed for a train/test split",
            shard.shard_id
        )));
    }
    let mut idx: Vec<usize> = shard.train.indices.iter().chain(&shard.test.indices).copied().collect();
    idx.sort_unstable();
    let mut rng = stream(seed, 0, shard.shard_id, Purpose::Split);
    idx.shuffle(&mut rng);
    // the epsilon keeps products like 0.1·30 from rounding up past an integer
    let n_test = ((test_fraction * size as f64 - 1e-9).ceil() as usize).clamp(1, size - 1);
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    Ok(ShardDataset {
        shard_id: shard.shard_id,
        train: dataset.examples(train),
        test: dataset.examples(test),
        label_histogram: shard.label_histogram.clone(),
    })
}
