use std::collections::BTreeMap;

/// Which way a message travels relative to the parameter server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    /// Node to parameter server.
    Up,
    /// Parameter server to node.
    Down,
}

/// What a charged transfer carried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Traffic {
    Mask,
    Weights,
    /// Raw training data shipped to a central server.
    RawData,
}

/// Exact transmitted-bit counts per (round, node, direction), with a
/// separate tally per kind of traffic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BandwidthLedger {
    entries: BTreeMap<(u32, usize, Direction), u64>,
    by_traffic: BTreeMap<Traffic, u64>,
    total: u64,
}

impl BandwidthLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, round: u32, node: usize, direction: Direction, traffic: Traffic, bits: u64) {
        *self.entries.entry((round, node, direction)).or_insert(0) += bits;
        *self.by_traffic.entry(traffic).or_insert(0) += bits;
        self.total += bits;
    }

    pub fn traffic_total(&self, traffic: Traffic) -> u64 {
        self.by_traffic.get(&traffic).copied().unwrap_or(0)
    }

    pub fn total_bits(&self) -> u64 {
        self.total
    }

    pub fn total_in(&self, direction: Direction) -> u64 {
        self.entries
            .iter()
            .filter(|((_, _, d), _)| *d == direction)
            .map(|(_, &b)| b)
            .sum()
    }

    pub fn node_total(&self, node: usize, direction: Direction) -> u64 {
        self.entries
            .iter()
            .filter(|((_, n, d), _)| *n == node && *d == direction)
            .map(|(_, &b)| b)
            .sum()
    }

    pub fn round_total(&self, round: u32, direction: Direction) -> u64 {
        self.entries
            .range((round, 0, Direction::Up)..=(round, usize::MAX, Direction::Down))
            .filter(|((_, _, d), _)| *d == direction)
            .map(|(_, &b)| b)
            .sum()
    }

    /// Largest single-node count in one round and direction.
    pub fn round_max_node(&self, round: u32, direction: Direction) -> u64 {
        self.entries
            .range((round, 0, Direction::Up)..=(round, usize::MAX, Direction::Down))
            .filter(|((_, _, d), _)| *d == direction)
            .map(|(_, &b)| b)
            .max()
            .unwrap_or(0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, usize, Direction, u64)> + '_ {
        self.entries.iter().map(|(&(r, n, d), &b)| (r, n, d, b))
    }
}
