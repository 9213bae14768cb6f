//! Dataset synthesis, client partitioning, and IDX loading.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

/// A labeled dataset for a P-class classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self, DataError> {
        if features.is_empty() {
            return Err(DataError::InvalidArgument("dataset must be nonempty".into()));
        }
        if features.len() != labels.len() {
            return Err(DataError::InvalidArgument(format!(
                "feature rows ({}) != label count ({})",
                features.len(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(DataError::InvalidArgument("class_count must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self { features, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features[0].len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i], self.labels[i])
    }

    /// Subset by row indices, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

/// How to split a dataset across simulated clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionMode {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    /// Dirichlet concentration alpha; unused in IID mode.
    pub concentration: f64,
    pub client_count: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.concentration <= 0.0 || !self.concentration.is_finite() {
            return Err(DataError::InvalidArgument("concentration must be > 0".into()));
        }
        if self.client_count < 2 {
            return Err(DataError::InvalidArgument("client_count must be >= 2".into()));
        }
        Ok(())
    }
}

/// Empirical label frequencies of a shard.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DataError> {
        if probs.is_empty() {
            return Err(DataError::InvalidArgument("empty distribution".into()));
        }
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(DataError::InvalidArgument("probabilities must lie in [0,1]".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(class_count: usize) -> Self {
        Self { probs: vec![1.0 / class_count as f64; class_count] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }
}

/// Gaussian-mixture dataset with `classes` isotropic unit-variance clusters
/// whose means are pairwise at least `separation` apart.
pub fn generate_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::InvalidArgument("classes must be >= 2".into()));
    }
    if dim < 1 || per_class < 1 {
        return Err(DataError::InvalidArgument("dim and per_class must be >= 1".into()));
    }
    if separation <= 0.0 || !separation.is_finite() {
        return Err(DataError::InvalidArgument("separation must be > 0".into()));
    }

    // Class k sits on axis (k mod dim) at radius (k/dim + 1) * separation:
    // same-axis means differ by >= separation, cross-axis pairs by more.
    let mut means = Vec::with_capacity(classes);
    for k in 0..classes {
        let mut mean = vec![0.0; dim];
        mean[k % dim] = ((k / dim) as f64 + 1.0) * separation;
        means.push(mean);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut features = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let row: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
            features.push(row);
            labels.push(k);
        }
    }
    Dataset::new(features, labels, classes)
}

/// Split `ds` into one shard per client.
///
/// IID mode shuffles and splits evenly (remainder going to the earliest
/// clients). Dirichlet mode draws per-class client proportions from
/// Dirichlet(alpha * 1) and assigns each sample to a client sampled from
/// its class's proportions. Empty shards are repaired by moving one sample
/// from the largest shard so every client ends up with at least one sample.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>, DataError> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(DataError::InvalidArgument("dataset must be nonempty".into()));
    }
    if spec.client_count > ds.len() {
        return Err(DataError::InvalidArgument(format!(
            "client_count ({}) exceeds sample count ({})",
            spec.client_count,
            ds.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = ds.len();
    let k = spec.client_count;
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); k];

    match spec.mode {
        PartitionMode::Iid => {
            let mut indices: Vec<usize> = (0..n).collect();
            indices.shuffle(&mut rng);
            let base = n / k;
            let rem = n % k;
            let mut cursor = 0;
            for (c, shard) in assignment.iter_mut().enumerate() {
                let take = base + usize::from(c < rem);
                shard.extend_from_slice(&indices[cursor..cursor + take]);
                cursor += take;
            }
        }
        PartitionMode::Dirichlet => {
            let gamma = Gamma::new(spec.concentration, 1.0)
                .map_err(|e| DataError::InvalidArgument(format!("bad concentration: {e}")))?;
            for class in 0..ds.class_count() {
                // Dirichlet(alpha * 1) via normalized Gamma draws.
                let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = props.iter().sum();
                if total <= 0.0 {
                    props = vec![1.0 / k as f64; k];
                } else {
                    for p in &mut props {
                        *p /= total;
                    }
                }
                // Cumulative thresholds for categorical sampling.
                let mut cdf = Vec::with_capacity(k);
                let mut acc = 0.0;
                for p in &props {
                    acc += p;
                    cdf.push(acc);
                }
                for i in 0..n {
                    if ds.labels()[i] != class {
                        continue;
                    }
                    let u: f64 = rng.gen::<f64>();
                    let client = cdf.iter().position(|&c| u < c).unwrap_or(k - 1);
                    assignment[client].push(i);
                }
            }
        }
    }

    // Repair empty shards: every client must hold at least one sample.
    loop {
        let Some(empty) = assignment.iter().position(Vec::is_empty) else {
            break;
        };
        let donor = assignment
            .iter()
            .enumerate()
            .max_by_key(|(_, s)| s.len())
            .map(|(i, _)| i)
            .expect("nonempty assignment");
        if assignment[donor].len() <= 1 {
            return Err(DataError::InvalidArgument(
                "cannot repair empty shard: not enough samples".into(),
            ));
        }
        let moved = assignment[donor].pop().expect("donor nonempty");
        assignment[empty].push(moved);
    }

    Ok(assignment.iter().map(|idx| ds.subset(idx)).collect())
}

/// Empirical label frequencies of a dataset.
pub fn label_distribution(ds: &Dataset) -> Result<LabelDistribution, DataError> {
    if ds.is_empty() {
        return Err(DataError::InvalidArgument("dataset must be nonempty".into()));
    }
    let mut counts = vec![0usize; ds.class_count()];
    for &l in ds.labels() {
        counts[l] += 1;
    }
    let n = ds.len() as f64;
    LabelDistribution::new(counts.iter().map(|&c| c as f64 / n).collect())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(buf)
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format("truncated header".into()))
}

/// Load an IDX image/label file pair (standard MNIST layout, big-endian).
///
/// Pixel bytes are scaled to [0,1]; images are flattened row-major. The
/// number of classes is taken as `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img = read_file(images_path)?;
    let lbl = read_file(labels_path)?;

    let img_magic = read_u32_be(&img, 0)?;
    if img_magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format(format!(
            "bad image magic {img_magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n_images = read_u32_be(&img, 4)? as usize;
    let rows = read_u32_be(&img, 8)? as usize;
    let cols = read_u32_be(&img, 12)? as usize;
    let pixels = rows * cols;
    if img.len() != 16 + n_images * pixels {
        return Err(DataError::Format(format!(
            "image payload is {} bytes, header implies {}",
            img.len() - 16.min(img.len()),
            n_images * pixels
        )));
    }

    let lbl_magic = read_u32_be(&lbl, 0)?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format(format!(
            "bad label magic {lbl_magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_labels = read_u32_be(&lbl, 4)? as usize;
    if lbl.len() != 8 + n_labels {
        return Err(DataError::Format("label payload length mismatch".into()));
    }
    if n_images != n_labels {
        return Err(DataError::CountMismatch { images: n_images, labels: n_labels });
    }
    if n_images == 0 {
        return Err(DataError::Format("empty IDX file".into()));
    }

    let features: Vec<Vec<f64>> = (0..n_images)
        .map(|i| {
            img[16 + i * pixels..16 + (i + 1) * pixels]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        })
        .collect();
    let labels: Vec<usize> = lbl[8..].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(features, labels, class_count)
}
