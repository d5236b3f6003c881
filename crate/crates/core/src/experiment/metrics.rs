use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wire::{BandwidthLedger, Direction, Traffic};

/// Column order of every metrics CSV. Changing it breaks downstream tooling.
pub const METRICS_HEADER: &str = "algorithm,label,nodes,round,phase,sparsity,accuracy,\
bits_up,bits_down,node_max_up,node_max_down,cumulative_bits,\
cumulative_mask_bits,cumulative_weight_bits,cumulative_raw_bits";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundPhase {
    /// Shared initialization (or the one-shot raw upload).
    Init,
    Pruning,
    /// Federated averaging under a fixed mask.
    Fl,
}

/// One line of output per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub algorithm: String,
    pub label: String,
    pub nodes: usize,
    pub round: u32,
    pub phase: RoundPhase,
    /// Fraction of prunable groups removed from the global model.
    pub sparsity: f64,
    pub accuracy: f64,
    pub bits_up: u64,
    pub bits_down: u64,
    /// Largest upload of a single node this round.
    pub node_max_up: u64,
    pub node_max_down: u64,
    pub cumulative_bits: u64,
    pub cumulative_mask_bits: u64,
    pub cumulative_weight_bits: u64,
    pub cumulative_raw_bits: u64,
}

/// Ledger-derived columns of a row, for round `round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundBits {
    pub up: u64,
    pub down: u64,
    pub node_max_up: u64,
    pub node_max_down: u64,
    pub cumulative: u64,
    pub mask: u64,
    pub weights: u64,
    pub raw: u64,
}

impl RoundBits {
    pub fn from_ledger(ledger: &BandwidthLedger, round: u32) -> Self {
        RoundBits {
            up: ledger.round_total(round, Direction::Up),
            down: ledger.round_total(round, Direction::Down),
            node_max_up: ledger.round_max_node(round, Direction::Up),
            node_max_down: ledger.round_max_node(round, Direction::Down),
            cumulative: ledger.total_bits(),
            mask: ledger.traffic_total(Traffic::Mask),
            weights: ledger.traffic_total(Traffic::Weights),
            raw: ledger.traffic_total(Traffic::RawData),
        }
    }
}

impl MetricsRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        algorithm: &str,
        label: &str,
        nodes: usize,
        round: u32,
        phase: RoundPhase,
        sparsity: f64,
        accuracy: f64,
        bits: RoundBits,
    ) -> Self {
        MetricsRow {
            algorithm: algorithm.to_string(),
            label: label.to_string(),
            nodes,
            round,
            phase,
            sparsity,
            accuracy,
            bits_up: bits.up,
            bits_down: bits.down,
            node_max_up: bits.node_max_up,
            node_max_down: bits.node_max_down,
            cumulative_bits: bits.cumulative,
            cumulative_mask_bits: bits.mask,
            cumulative_weight_bits: bits.weights,
            cumulative_raw_bits: bits.raw,
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER.split(',')).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected metrics header".into(),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

pub fn metrics_to_string(rows: &[MetricsRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_metrics(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: u32) -> MetricsRow {
        MetricsRow::new(
            "mpfl",
            "a,b",
            3,
            round,
            RoundPhase::Pruning,
            0.19,
            0.875,
            RoundBits {
                up: 10,
                down: 20,
                node_max_up: 4,
                node_max_down: 7,
                cumulative: 30 * u64::from(round),
                mask: 30,
                weights: 0,
                raw: 0,
            },
        )
    }

    #[test]
    fn golden_header_and_line() {
        let text = metrics_to_string(&[row(1)]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "mpfl,\"a,b\",3,1,pruning,0.19,0.875,10,20,4,7,30,30,0,0"
        );
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(1), row(2)];
        let text = metrics_to_string(&rows).unwrap();
        assert_eq!(read_metrics(text.as_bytes()).unwrap(), rows);
        assert!(read_metrics("a,b\n1,2\n".as_bytes()).is_err());
    }
}
