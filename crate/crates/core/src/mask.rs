//! Binary keep/drop masks over weight groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ArchSpec;

/// Groups per prunable layer, in architecture order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskLayout {
    pub groups: Vec<usize>,
}

impl MaskLayout {
    pub fn new(groups: Vec<usize>) -> Self {
        MaskLayout { groups }
    }

    pub fn from_arch(arch: &ArchSpec) -> Self {
        MaskLayout {
            groups: arch.prunable_layers().map(|l| l.groups()).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.groups.len()
    }

    pub fn total_groups(&self) -> usize {
        self.groups.iter().sum()
    }
}

/// One bit per weight group; `true` keeps the group, `false` prunes it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PruneMask {
    layers: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn from_layers(layers: Vec<Vec<bool>>) -> Self {
        PruneMask { layers }
    }

    pub fn all_ones(layout: &MaskLayout) -> Self {
        PruneMask {
            layers: layout.groups.iter().map(|&g| vec![true; g]).collect(),
        }
    }

    pub fn all_zeros(layout: &MaskLayout) -> Self {
        PruneMask {
            layers: layout.groups.iter().map(|&g| vec![false; g]).collect(),
        }
    }

    pub fn layout(&self) -> MaskLayout {
        MaskLayout {
            groups: self.layers.iter().map(Vec::len).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn layer(&self, m: usize) -> &[bool] {
        &self.layers[m]
    }

    pub fn layer_mut(&mut self, m: usize) -> &mut [bool] {
        &mut self.layers[m]
    }

    pub fn get(&self, m: usize, l: usize) -> bool {
        self.layers[m][l]
    }

    pub fn set(&mut self, m: usize, l: usize, keep: bool) {
        self.layers[m][l] = keep;
    }

    /// `‖c(m)‖₀`, the number of kept groups in layer `m`.
    pub fn keep_count(&self, m: usize) -> usize {
        self.layers[m].iter().filter(|&&b| b).count()
    }

    pub fn total_keep(&self) -> usize {
        (0..self.layers.len()).map(|m| self.keep_count(m)).sum()
    }

    pub fn total_groups(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Fraction of groups pruned across all layers.
    pub fn sparsity(&self) -> f64 {
        let total = self.total_groups();
        if total == 0 {
            0.0
        } else {
            1.0 - self.total_keep() as f64 / total as f64
        }
    }

    pub fn check_layout(&self, layout: &MaskLayout) -> Result<()> {
        let own = self.layout();
        if &own != layout {
            return Err(Error::shape(format!(
                "mask layout {:?} does not match expected {:?}",
                own.groups, layout.groups
            )));
        }
        Ok(())
    }

    /// True when every kept bit here is also kept in `other`.
    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.layout() == other.layout()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.iter().zip(b).all(|(&x, &y)| !x || y))
    }

    pub fn intersect(&self, other: &PruneMask) -> Result<PruneMask> {
        other.check_layout(&self.layout())?;
        Ok(PruneMask {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x && y).collect())
                .collect(),
        })
    }
}
