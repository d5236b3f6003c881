use std::collections::BTreeSet;
use std::fmt;
use std::net::SocketAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BlobSpec, Contamination, DataSource};
use crate::error::{Error, Result};
use crate::federation::{ConsensusStrategy, ScoringMode};
use crate::nn::TrainConfig;
use crate::scalar::Precision;
use crate::scoring::NormOrder;
use crate::wire::bits::RawUpload;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Mask voting followed by masked federated averaging.
    Mpfl,
    /// Server-side pruning of averaged full-precision weights.
    PruningFl,
    /// Centralized train, prune, rewind after a raw data upload.
    #[serde(alias = "lth-central")]
    Lth,
    /// Plain federated averaging without pruning.
    Fedavg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mpfl => "mpfl",
            Algorithm::PruningFl => "pruning-fl",
            Algorithm::Lth => "lth",
            Algorithm::Fedavg => "fedavg",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar type used for local computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarKind {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Widths of the hidden layers; input and output widths come from the data.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub source: DataSource,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    /// Local epochs per round.
    pub epochs: usize,
    pub batch_size: usize,
    /// Federated averaging rounds after the pruning schedule.
    pub final_rounds: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 0.1,
            epochs: 1,
            batch_size: 32,
            final_rounds: 10,
        }
    }
}

impl TrainingConfig {
    pub fn local(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningConfig {
    #[serde(default)]
    pub scoring: ScoringMode,
    #[serde(default)]
    pub norm: NormOrder,
    /// Fraction of surviving groups pruned in each round.
    pub schedule: Vec<f64>,
    /// Nominal target: the sum of the increments. Increments compound on
    /// survivors, so the reached sparsity is lower.
    pub target: f64,
    #[serde(default = "default_min_keep")]
    pub min_keep: usize,
}

fn default_min_keep() -> usize {
    1
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            scoring: ScoringMode::Weight,
            norm: NormOrder::L2,
            schedule: vec![0.1; 5],
            target: 0.5,
            min_keep: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeContamination {
    pub node: usize,
    #[serde(flatten)]
    pub kind: Contamination,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransportConfig {
    #[default]
    Loopback,
    /// Real sockets on this host; port 0 picks a free port.
    Tcp { address: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountingConfig {
    /// Charge whole frames instead of message bodies.
    #[serde(default)]
    pub include_headers: bool,
    #[serde(default)]
    pub delta_masks: bool,
    #[serde(default = "default_true")]
    pub sparse_weights: bool,
    /// Raw-upload cost per feature value for the centralized baseline.
    #[serde(default = "default_raw_bits")]
    pub raw_bits_per_value: u64,
    #[serde(default)]
    pub raw_label_bits: u64,
    /// Charge this upload instead of the actual shards.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_upload: Option<RawUpload>,
}

fn default_true() -> bool {
    true
}

fn default_raw_bits() -> u64 {
    32
}

impl Default for AccountingConfig {
    fn default() -> Self {
        AccountingConfig {
            include_headers: false,
            delta_masks: false,
            sparse_weights: true,
            raw_bits_per_value: 32,
            raw_label_bits: 0,
            raw_upload: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub seed: u64,
    pub nodes: usize,
    /// Wire precision `b` in bits.
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub scalar: ScalarKind,
    pub arch: ArchConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub pruning: PruningConfig,
    #[serde(default)]
    pub consensus: ConsensusStrategy,
    #[serde(default)]
    pub contamination: Vec<NodeContamination>,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub accounting: AccountingConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map_or_else(|| "<document>".to_string(), |s| key_at(text, s.start));
            Error::config(path, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    /// Name used in CSV rows; defaults to `<algorithm>-n<nodes>`.
    pub fn run_label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("{}-n{}", self.algorithm, self.nodes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        if self.nodes == 0 {
            return Err(Error::config("nodes", "need at least one node"));
        }
        for (i, &h) in self.arch.hidden.iter().enumerate() {
            if h == 0 {
                return Err(Error::config(
                    format!("arch.hidden[{i}]"),
                    "layer width must be positive",
                ));
            }
        }
        let tf = self.data.test_fraction;
        if !(tf > 0.0 && tf < 1.0) {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        if let DataSource::Synthetic(BlobSpec {
            samples,
            classes,
            features,
            center_spread,
            noise_std,
        }) = &self.data.source
        {
            if *samples == 0 || *classes < 2 || *features == 0 {
                return Err(Error::config(
                    "data.source",
                    "synthetic data needs samples ≥ 1, classes ≥ 2, features ≥ 1",
                ));
            }
            if !(center_spread.is_finite() && *center_spread >= 0.0 && noise_std.is_finite() && *noise_std >= 0.0) {
                return Err(Error::config("data.source", "spreads must be finite and ≥ 0"));
            }
        }
        let t = &self.training;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config("training.lr", "must be positive and finite"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        let p = &self.pruning;
        for (i, &inc) in p.schedule.iter().enumerate() {
            if !(0.0..1.0).contains(&inc) {
                return Err(Error::config(
                    format!("pruning.schedule[{i}]"),
                    "increment must lie in [0, 1)",
                ));
            }
        }
        let sum: f64 = p.schedule.iter().sum();
        if (sum - p.target).abs() > 1e-6 {
            return Err(Error::config(
                "pruning.target",
                format!("target {} differs from the schedule sum {sum}", p.target),
            ));
        }
        if let ConsensusStrategy::Histogram { agreement } = self.consensus {
            if !(agreement > 0.0 && agreement <= 1.0) {
                return Err(Error::config("consensus.agreement", "must lie in (0, 1]"));
            }
        }
        let mut seen = BTreeSet::new();
        for (i, c) in self.contamination.iter().enumerate() {
            if c.node >= self.nodes {
                return Err(Error::config(
                    format!("contamination[{i}].node"),
                    format!("node {} out of range for {} nodes", c.node, self.nodes),
                ));
            }
            if !seen.insert(c.node) {
                return Err(Error::config(
                    format!("contamination[{i}].node"),
                    format!("node {} listed twice", c.node),
                ));
            }
            if let Contamination::Noisy { sigma } = c.kind {
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(Error::config(
                        format!("contamination[{i}].sigma"),
                        "must be finite and ≥ 0",
                    ));
                }
            }
        }
        if let TransportConfig::Tcp { address } = &self.transport {
            address
                .parse::<SocketAddr>()
                .map_err(|e| Error::config("transport.address", e.to_string()))?;
        }
        Ok(())
    }

    /// Built-in configurations.
    ///
    /// * `quick`: small two-class problem, four nodes, two pruning rounds.
    /// * `five-by-ten`: ten nodes, five rounds of 10%.
    /// * `ten-rounds`: ten nodes, ten rounds of 5%.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig {
            version: CONFIG_VERSION,
            algorithm: Algorithm::Mpfl,
            label: None,
            seed: 7,
            nodes: 10,
            precision: Precision::F32,
            scalar: ScalarKind::F64,
            arch: ArchConfig { hidden: vec![64, 32] },
            data: DataConfig {
                test_fraction: 0.2,
                source: DataSource::Synthetic(BlobSpec {
                    samples: 6000,
                    classes: 10,
                    features: 16,
                    center_spread: 1.0,
                    noise_std: 1.0,
                }),
            },
            training: TrainingConfig::default(),
            pruning: PruningConfig::default(),
            consensus: ConsensusStrategy::TopK,
            contamination: Vec::new(),
            transport: TransportConfig::Loopback,
            accounting: AccountingConfig::default(),
        };
        match name {
            "five-by-ten" => {}
            "ten-rounds" => {
                cfg.pruning.schedule = vec![0.05; 10];
                cfg.pruning.target = 0.5;
            }
            "quick" => {
                cfg.nodes = 4;
                cfg.arch.hidden = vec![16];
                cfg.data.source = DataSource::Synthetic(BlobSpec {
                    samples: 800,
                    classes: 2,
                    features: 8,
                    center_spread: 1.0,
                    noise_std: 1.0,
                });
                cfg.pruning.schedule = vec![0.25, 0.25];
                cfg.pruning.target = 0.5;
                cfg.training.final_rounds = 2;
            }
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset {other:?}; try quick, five-by-ten, ten-rounds"),
                ))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub const PRESETS: [&'static str; 3] = ["quick", "five-by-ten", "ten-rounds"];
}

/// Dotted key path of the innermost table entry enclosing byte `offset`.
fn key_at(text: &str, offset: usize) -> String {
    let offset = offset.min(text.len());
    let line_end = text[offset..].find('\n').map_or(text.len(), |i| offset + i);
    let upto = &text[..line_end];
    let mut table = String::new();
    let mut key = String::new();
    for line in upto.lines() {
        let t = line.trim();
        if let Some(inner) = t.strip_prefix("[[").and_then(|r| r.strip_suffix("]]")) {
            table = inner.trim().to_string();
            key.clear();
        } else if let Some(inner) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            table = inner.trim().to_string();
            key.clear();
        } else if let Some((k, _)) = t.split_once('=') {
            key = k.trim().to_string();
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (true, true) => "<document>".into(),
        (true, false) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}
