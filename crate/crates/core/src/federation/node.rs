use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::PruneMask;
use crate::nn::{train_masked, Batch, Model, TrainConfig};
use crate::scalar::Scalar;
use crate::scoring::{compute_mask, gradient_scores, weight_scores, NormOrder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    /// Norm of each group's trained weights.
    #[default]
    Weight,
    /// Norm of each group's full-shard loss gradient.
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalParams {
    pub train: TrainConfig,
    pub scoring: ScoringMode,
    pub norm: NormOrder,
    pub min_keep: usize,
}

impl Default for LocalParams {
    fn default() -> Self {
        LocalParams {
            train: TrainConfig::default(),
            scoring: ScoringMode::Weight,
            norm: NormOrder::L2,
            min_keep: 1,
        }
    }
}

/// One participant: a private shard, a local model, and its own RNG stream.
#[derive(Debug, Clone)]
pub struct Node<T: Scalar> {
    id: usize,
    data: Batch<T>,
    model: Model<T>,
    rng: ChaCha8Rng,
    flagged: bool,
    last_loss: Option<T>,
}

impl<T: Scalar> Node<T> {
    pub fn new(id: usize, data: Batch<T>, model: Model<T>, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data(format!("node {id} has an empty shard")));
        }
        if data.dim() != model.arch().input_dim() {
            return Err(Error::shape(format!(
                "node {id}: shard has {} features, model expects {}",
                data.dim(),
                model.arch().input_dim()
            )));
        }
        Ok(Node {
            id,
            data,
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            flagged: false,
            last_loss: None,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn data(&self) -> &Batch<T> {
        &self.data
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn set_model(&mut self, model: Model<T>) -> Result<()> {
        if !model.same_shape(&self.model) {
            return Err(Error::shape(format!("node {}: model shape changed", self.id)));
        }
        self.model = model;
        Ok(())
    }

    /// Whether local training has diverged at least once.
    pub fn flagged(&self) -> bool {
        self.flagged
    }

    pub fn last_loss(&self) -> Option<T> {
        self.last_loss
    }

    /// Masked local training. A non-finite loss restores the weights held
    /// before the call, flags the node, and returns `false`.
    pub fn train(&mut self, mask: &PruneMask, params: &LocalParams) -> Result<bool> {
        let backup = self.model.clone();
        let loss = train_masked(&mut self.model, &self.data, mask, &params.train, &mut self.rng)?;
        if loss.is_finite() && self.model.is_finite() {
            self.last_loss = Some(loss);
            return Ok(true);
        }
        log::warn!("node {} diverged (loss {loss}); keeping previous weights", self.id);
        self.model = backup;
        self.flagged = true;
        Ok(false)
    }

    /// Trains under `global_mask`, scores the result, and proposes a mask
    /// that prunes `increment` of each layer's survivors. A node whose
    /// training diverges proposes `global_mask` unchanged.
    pub fn node_round(&mut self, global_mask: &PruneMask, increment: f64, params: &LocalParams) -> Result<PruneMask> {
        if !self.train(global_mask, params)? {
            return Ok(global_mask.clone());
        }
        let scores = match params.scoring {
            ScoringMode::Weight => weight_scores(&self.model, params.norm),
            ScoringMode::Gradient => {
                let grads = self.model.backward(&self.data)?;
                gradient_scores(&grads, &global_mask.layout(), params.norm)?
            }
        };
        compute_mask(&scores, increment, global_mask, params.min_keep)
    }
}
