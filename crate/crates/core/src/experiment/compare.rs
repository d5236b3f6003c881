use std::fmt::Write as _;

use crate::error::Error;
use crate::wire::bits::bits_to_mib;

use super::config::ExperimentConfig;
use super::metrics::{MetricsRow, RoundPhase};
use super::runner::{run, RunOutput};

/// Totals of one run, as in a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub algorithm: String,
    pub nodes: usize,
    pub final_sparsity: f64,
    pub final_accuracy: f64,
    pub total_bits: u64,
    pub mask_bits: u64,
    pub weight_bits: u64,
    pub raw_bits: u64,
    /// `(sparsity, accuracy)` after each pruning round.
    pub pruning_curve: Vec<(f64, f64)>,
}

impl RunSummary {
    pub fn from_output(out: &RunOutput) -> Self {
        let last = out.final_row();
        RunSummary {
            label: out.label.clone(),
            algorithm: out.algorithm.name().to_string(),
            nodes: last.nodes,
            final_sparsity: last.sparsity,
            final_accuracy: last.accuracy,
            total_bits: last.cumulative_bits,
            mask_bits: last.cumulative_mask_bits,
            weight_bits: last.cumulative_weight_bits,
            raw_bits: last.cumulative_raw_bits,
            pruning_curve: out
                .rows
                .iter()
                .filter(|r| r.phase == RoundPhase::Pruning)
                .map(|r| (r.sparsity, r.accuracy))
                .collect(),
        }
    }
}

#[derive(Debug, Default)]
pub struct CompareOutput {
    /// Rows of every successful run, in config order.
    pub rows: Vec<MetricsRow>,
    pub summaries: Vec<RunSummary>,
    pub outputs: Vec<RunOutput>,
    /// Label and error of each failed run; other runs still complete.
    pub failures: Vec<(String, Error)>,
}

/// Runs each config in order.
pub fn compare(configs: &[ExperimentConfig]) -> CompareOutput {
    let mut out = CompareOutput::default();
    for cfg in configs {
        match run(cfg) {
            Ok(result) => {
                out.rows.extend(result.rows.iter().cloned());
                out.summaries.push(RunSummary::from_output(&result));
                out.outputs.push(result);
            }
            Err(e) => {
                log::error!("run {} failed: {e}", cfg.run_label());
                out.failures.push((cfg.run_label(), e));
            }
        }
    }
    out
}

/// One copy of `cfg` per node count, labelled by algorithm and count.
pub fn node_sweep(cfg: &ExperimentConfig, counts: &[usize]) -> Vec<ExperimentConfig> {
    counts
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.nodes = n;
            c.label = Some(format!("{}-n{n}", cfg.algorithm));
            c.contamination.retain(|k| k.node < n);
            c
        })
        .collect()
}

/// Plain-text results: totals per run, then accuracy at each pruning level.
pub fn summary_table(summaries: &[RunSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>6} {:>9} {:>9} {:>14} {:>12} {:>14}",
        "run", "nodes", "sparsity", "accuracy", "total bits", "total MiB", "mask bits"
    );
    for r in summaries {
        let _ = writeln!(
            s,
            "{:<24} {:>6} {:>9.4} {:>9.4} {:>14} {:>12.4} {:>14}",
            r.label,
            r.nodes,
            r.final_sparsity,
            r.final_accuracy,
            r.total_bits,
            bits_to_mib(r.total_bits),
            r.mask_bits
        );
    }
    let mut levels: Vec<f64> = summaries
        .iter()
        .flat_map(|r| r.pruning_curve.iter().map(|&(sp, _)| (sp * 1000.0).round() / 1000.0))
        .collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.is_empty() {
        return s;
    }
    let _ = write!(s, "\naccuracy by sparsity\n{:<10}", "sparsity");
    for r in summaries {
        let _ = write!(s, " {:>16}", r.label);
    }
    s.push('\n');
    for level in levels {
        let _ = write!(s, "{level:<10.3}");
        for r in summaries {
            match r
                .pruning_curve
                .iter()
                .find(|&&(sp, _)| ((sp * 1000.0).round() / 1000.0 - level).abs() < 1e-9)
            {
                Some(&(_, acc)) => {
                    let _ = write!(s, " {acc:>16.4}");
                }
                None => {
                    let _ = write!(s, " {:>16}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}
