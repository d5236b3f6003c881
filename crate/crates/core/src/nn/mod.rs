//! Dense feed-forward networks whose layers expose prunable weight groups.
//!
//! A weight group is one output neuron of a dense layer: its row of
//! incoming weights plus its bias. Every dense layer except the classifier
//! head is prunable, so the mask layout has one entry per hidden layer.

mod model;
mod train;

pub use model::{Batch, DenseLayer, ForwardOutput, Gradients, Model};
pub use train::{train_masked, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    Relu { dim: usize },
}

impl LayerSpec {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_dim, .. } => in_dim,
            LayerSpec::Relu { dim } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { out_dim, .. } => out_dim,
            LayerSpec::Relu { dim } => dim,
        }
    }

    /// Number of prunable weight groups `L(m)`: one per output neuron.
    pub fn groups(&self) -> usize {
        match *self {
            LayerSpec::Dense { out_dim, .. } => out_dim,
            LayerSpec::Relu { .. } => 0,
        }
    }

    /// Scalars per group: the incoming weights plus the bias.
    pub fn group_size(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_dim, .. } => in_dim + 1,
            LayerSpec::Relu { .. } => 0,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    /// Builds `dims[0] -> dims[1] -> ... -> dims[n]` with ReLU between dense
    /// layers and none after the last one.
    pub fn mlp(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("arch", "an MLP needs at least input and output dims"));
        }
        let mut layers = Vec::with_capacity(2 * dims.len());
        for (i, pair) in dims.windows(2).enumerate() {
            layers.push(LayerSpec::Dense {
                in_dim: pair[0],
                out_dim: pair[1],
            });
            if i + 2 < dims.len() {
                layers.push(LayerSpec::Relu { dim: pair[1] });
            }
        }
        let arch = ArchSpec { layers };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::config("arch.layers", "empty architecture"))?;
        if !first.is_dense() {
            return Err(Error::config("arch.layers[0]", "first layer must be dense"));
        }
        if !self.layers.last().is_some_and(LayerSpec::is_dense) {
            return Err(Error::config("arch.layers", "last layer must be dense"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_dim() == 0 || layer.out_dim() == 0 {
                return Err(Error::config(
                    format!("arch.layers[{i}]"),
                    "dimensions must be positive",
                ));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::config(
                    format!("arch.layers[{}]", i + 1),
                    format!(
                        "in_dim {} does not match previous out_dim {}",
                        pair[1].in_dim(),
                        pair[0].out_dim()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dense_layers(&self) -> impl Iterator<Item = &LayerSpec> + '_ {
        self.layers.iter().filter(|l| l.is_dense())
    }

    /// Dense layers that carry a pruning mask (all but the classifier head).
    pub fn prunable_layers(&self) -> impl Iterator<Item = &LayerSpec> + '_ {
        let n = self.dense_layers().count();
        self.dense_layers().take(n.saturating_sub(1))
    }

    /// Total scalar parameter count `d`.
    pub fn param_count(&self) -> usize {
        self.dense_layers().map(|l| l.groups() * l.group_size()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_builder_interleaves_relu() {
        let arch = ArchSpec::mlp(&[4, 3, 2]).unwrap();
        assert_eq!(
            arch.layers,
            vec![
                LayerSpec::Dense { in_dim: 4, out_dim: 3 },
                LayerSpec::Relu { dim: 3 },
                LayerSpec::Dense { in_dim: 3, out_dim: 2 },
            ]
        );
        assert_eq!(arch.param_count(), 4 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(arch.prunable_layers().count(), 1);
        assert_eq!(arch.layers[0].group_size(), 5);
        assert_eq!(arch.layers[0].groups(), 3);
    }

    #[test]
    fn rejects_broken_chains() {
        let arch = ArchSpec {
            layers: vec![
                LayerSpec::Dense { in_dim: 4, out_dim: 3 },
                LayerSpec::Relu { dim: 2 },
                LayerSpec::Dense { in_dim: 2, out_dim: 2 },
            ],
        };
        assert!(matches!(arch.validate(), Err(Error::Config { .. })));
        assert!(ArchSpec::mlp(&[3]).is_err());
        assert!(ArchSpec::mlp(&[3, 0, 2]).is_err());
    }
}
