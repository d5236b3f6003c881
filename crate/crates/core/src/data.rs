//! Datasets, IID sharding, and the two node-contamination models.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `(samples × dim)`.
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

/// Isotropic Gaussian blobs, one per class, with balanced labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub samples: usize,
    pub classes: usize,
    pub features: usize,
    /// Standard deviation of the class centers around the origin.
    #[serde(default = "default_center_spread")]
    pub center_spread: f64,
    /// Standard deviation of samples around their center.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

fn default_center_spread() -> f64 {
    1.0
}

fn default_noise_std() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(BlobSpec),
    /// Header row required; the column named `label` holds class ids.
    Csv {
        path: PathBuf,
    },
    /// IDX-style pair: unsigned-byte feature tensor and 1-D label vector.
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }

    pub fn batch<T: Scalar>(&self) -> Result<Batch<T>> {
        Batch::from_f64(&self.features, self.dim, &self.labels)
    }

    /// Per-feature standardization to zero mean and unit variance; constant
    /// features are only centered.
    pub fn standardize(&mut self) {
        let n = self.len();
        if n == 0 {
            return;
        }
        for j in 0..self.dim {
            let mean = (0..n).map(|i| self.features[i * self.dim + j]).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (self.features[i * self.dim + j] - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let std = var.sqrt();
            let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
            for i in 0..n {
                let v = &mut self.features[i * self.dim + j];
                *v = (*v - mean) * scale;
            }
        }
    }

    /// Seeded shuffle, then the first `test_fraction` of samples become the
    /// test set.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::config("data.test_fraction", "must lie in [0, 1)"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = order.split_at(n_test);
        if train.is_empty() {
            return Err(Error::Data("split leaves no training samples".into()));
        }
        Ok((self.subset(train), self.subset(test)))
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Data(format!("label {bad} ≥ num_classes {}", self.num_classes)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(())
    }
}

/// Loads or generates a dataset and standardizes its features.
pub fn load(source: &DataSource, seed: u64) -> Result<Dataset> {
    let mut ds = match source {
        DataSource::Synthetic(spec) => blobs(spec, seed)?,
        DataSource::Csv { path } => read_csv(path)?,
        DataSource::Idx { images, labels } => read_idx(images, labels)?,
    };
    ds.validate()?;
    ds.standardize();
    Ok(ds)
}

fn blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    if spec.samples == 0 || spec.classes == 0 || spec.features == 0 {
        return Err(Error::Data(
            "synthetic spec needs samples, classes and features > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center_dist =
        Normal::new(0.0, spec.center_spread).map_err(|e| Error::config("data.center_spread", e.to_string()))?;
    let noise_dist = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config("data.noise_std", e.to_string()))?;
    let centers: Vec<f64> = (0..spec.classes * spec.features)
        .map(|_| center_dist.sample(&mut rng))
        .collect();
    let mut features = Vec::with_capacity(spec.samples * spec.features);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let y = i % spec.classes;
        let center = &centers[y * spec.features..(y + 1) * spec.features];
        features.extend(center.iter().map(|&c| c + noise_dist.sample(&mut rng)));
        labels.push(y);
    }
    Ok(Dataset {
        features,
        dim: spec.features,
        labels,
        num_classes: spec.classes,
        provenance: Provenance::Synthetic,
    })
}

fn read_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let label_col = headers.iter().position(|h| h.trim() == "label").ok_or(Error::Parse {
        line: 1,
        message: "no `label` column in header".into(),
    })?;
    let dim = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if j == label_col {
                let y = cell.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    message: format!("label `{cell}` is not a class id"),
                })?;
                labels.push(y);
            } else {
                let v = cell.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("column {j}: `{cell}` is not numeric"),
                })?;
                features.push(v);
            }
        }
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(Dataset {
        features,
        dim,
        labels,
        num_classes,
        provenance: Provenance::File(path.to_path_buf()),
    })
}

/// Parses an IDX tensor of unsigned bytes: two zero bytes, type 0x08, rank,
/// big-endian u32 dims, then the payload.
fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    let err = |offset: usize, message: &str| Error::protocol(offset, message.to_string());
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "truncated IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(err(2, "only unsigned-byte IDX payloads are supported"));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if rank == 0 || bytes.len() < header {
        return Err(err(bytes.len().min(header), "truncated IDX dims"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match count {
        Some(c) if bytes.len() - header == c => Ok((dims, &bytes[header..])),
        _ => Err(err(header, "IDX payload size does not match dims")),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let image_bytes = read_file(images)?;
    let label_bytes = read_file(labels)?;
    let (dims, payload) = parse_idx(&image_bytes)?;
    let (label_dims, label_payload) = parse_idx(&label_bytes)?;
    if label_dims.len() != 1 || label_dims[0] != dims[0] {
        return Err(Error::Data("IDX label count does not match image count".into()));
    }
    let dim = dims[1..].iter().product::<usize>().max(1);
    let labels: Vec<usize> = label_payload.iter().map(|&b| b as usize).collect();
    Ok(Dataset {
        features: payload.iter().map(|&b| f64::from(b)).collect(),
        dim,
        num_classes: labels.iter().max().map_or(0, |&m| m + 1),
        labels,
        provenance: Provenance::File(images.to_path_buf()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Contamination {
    Clean,
    Noisy {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    ShuffledLabels,
}

fn default_sigma() -> f64 {
    1.0
}

/// One node's slice of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub node: usize,
    /// Indices into the parent dataset.
    pub indices: Vec<usize>,
    pub data: Dataset,
    pub tag: Contamination,
}

/// Seeded shuffle followed by a round-robin deal, so shard sizes differ by
/// at most one.
pub fn partition_iid(ds: &Dataset, nodes: usize, seed: u64) -> Result<Vec<Shard>> {
    if nodes == 0 {
        return Err(Error::config("nodes", "need at least one node"));
    }
    if nodes > ds.len() {
        return Err(Error::Data(format!("{nodes} nodes but only {} samples", ds.len())));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut buckets: Vec<Vec<usize>> = vec![Vec::with_capacity(ds.len() / nodes + 1); nodes];
    for (pos, &i) in order.iter().enumerate() {
        buckets[pos % nodes].push(i);
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(node, indices)| Shard {
            node,
            data: ds.subset(&indices),
            indices,
            tag: Contamination::Clean,
        })
        .collect())
}

/// Adds independent `N(0, sigma²)` noise to every feature.
pub fn contaminate_noise(shard: &Shard, sigma: f64, seed: u64) -> Result<Shard> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::config("contamination.sigma", "sigma must be finite and ≥ 0"));
    }
    let mut out = shard.clone();
    if sigma > 0.0 {
        let dist = Normal::new(0.0, sigma).map_err(|e| Error::config("contamination.sigma", e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut out.data.features {
            *v += dist.sample(&mut rng);
        }
    }
    out.tag = Contamination::Noisy { sigma };
    Ok(out)
}

/// A bijection over class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPermutation(Vec<usize>);

impl LabelPermutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &t in &map {
            if t >= map.len() || std::mem::replace(&mut seen[t], true) {
                return Err(Error::config("contamination.permutation", "not a permutation"));
            }
        }
        Ok(LabelPermutation(map))
    }

    pub fn identity(classes: usize) -> Self {
        LabelPermutation((0..classes).collect())
    }

    /// A single random cycle through all classes (Sattolo), hence a
    /// derangement whenever there are at least two classes.
    pub fn random_derangement<R: Rng + ?Sized>(classes: usize, rng: &mut R) -> Self {
        let mut map: Vec<usize> = (0..classes).collect();
        for i in (1..classes).rev() {
            let j = rng.random_range(0..i);
            map.swap(i, j);
        }
        LabelPermutation(map)
    }

    pub fn apply(&self, y: usize) -> usize {
        self.0[y]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn contaminate_labels(shard: &Shard, permutation: &LabelPermutation) -> Result<Shard> {
    if permutation.len() != shard.data.num_classes {
        return Err(Error::config(
            "contamination.permutation",
            format!(
                "permutation covers {} classes, dataset has {}",
                permutation.len(),
                shard.data.num_classes
            ),
        ));
    }
    let mut out = shard.clone();
    for y in &mut out.data.labels {
        *y = permutation.apply(*y);
    }
    out.tag = Contamination::ShuffledLabels;
    Ok(out)
}
