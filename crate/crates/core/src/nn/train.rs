use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, Model};
use crate::error::{Error, Result};
use crate::mask::PruneMask;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            lr: 0.1,
            batch_size: 32,
        }
    }
}

/// Minibatch SGD on `ℓ(w ⊙ c)`, keeping pruned groups at zero.
///
/// Returns the mean minibatch loss of the last epoch. Training stops as soon
/// as a loss turns non-finite and that loss is returned; callers decide what
/// divergence means for them.
pub fn train_masked<T: Scalar, R: Rng + ?Sized>(
    model: &mut Model<T>,
    data: &Batch<T>,
    mask: &PruneMask,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<T> {
    if !cfg.lr.is_finite() || cfg.lr <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::config("training", "lr must be > 0 and batch_size ≥ 1"));
    }
    model.mask_in_place(mask)?;
    let lr = T::from_f64_lossy(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = T::zero();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = T::zero();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            let (loss, grads) = model.loss_and_gradients(&batch)?;
            if !loss.is_finite() {
                return Ok(loss);
            }
            model.sgd_step_in_place(&grads, lr, mask)?;
            total += loss;
            steps += 1;
        }
        epoch_loss = total / T::from_usize(steps.max(1)).expect("step count");
    }
    Ok(epoch_loss)
}
