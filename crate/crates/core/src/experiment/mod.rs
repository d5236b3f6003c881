//! Experiment configuration, orchestration, and outputs.
//!
//! A run loads or generates data, shards it over the nodes, applies any
//! contamination, and drives one algorithm end to end. Each round becomes a
//! [`MetricsRow`]; the final masked model can be saved as a binary artifact.
//! All randomness derives from the config seed.

mod artifact;
mod compare;
mod config;
mod metrics;
mod runner;

pub use artifact::{read_artifact, write_artifact, Artifact, ARTIFACT_MAGIC, ARTIFACT_VERSION};
pub use compare::{compare, node_sweep, summary_table, CompareOutput, RunSummary};
pub use config::{
    AccountingConfig, Algorithm, ArchConfig, DataConfig, ExperimentConfig, NodeContamination, PruningConfig,
    ScalarKind, TrainingConfig, TransportConfig, CONFIG_VERSION,
};
pub use metrics::{metrics_to_string, read_metrics, write_metrics, MetricsRow, RoundBits, RoundPhase, METRICS_HEADER};
pub use runner::{run, sub_seed, RunOutput};
