//! Reference protocols.
//!
//! Pruning-FL: nodes upload full weights, the server averages and prunes
//! the average by weight magnitude, then sends the pruned model back.
//! Lottery-ticket (LTH): nodes ship their raw data once; the server then
//! trains, prunes, and rewinds to the original initialization centrally.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::federation::{fedavg, Federation};
use crate::mask::PruneMask;
use crate::nn::{train_masked, Batch, Model, TrainConfig};
use crate::scalar::Scalar;
use crate::scoring::{apply_mask, compute_mask, weight_scores, NormOrder};
use crate::wire::bits::RawUpload;
use crate::wire::{BandwidthLedger, Direction, Traffic};

/// One Pruning-FL round. Returns the pruned global model and its mask.
pub fn pruning_fl_round<T: Scalar>(fed: &mut Federation<T>, increment: f64) -> Result<(Model<T>, PruneMask)> {
    let round = fed.next_round();
    let step = |fed: &mut Federation<T>| -> Result<(Model<T>, PruneMask)> {
        fed.train_nodes()?;
        let uploads = fed.upload_weights()?;
        let mut avg = fedavg(&uploads)?;
        avg.mask_in_place(fed.global_mask())?;
        let params = fed.params();
        let scores = weight_scores(&avg, params.norm);
        let mask = compute_mask(&scores, increment, fed.global_mask(), params.min_keep)?;
        let pruned = apply_mask(&avg, &mask)?;
        fed.broadcast_mask(&mask)?;
        fed.broadcast_weights(&pruned)?;
        Ok((pruned, mask))
    };
    step(fed).map_err(|e| e.in_round(round))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LthConfig {
    /// Fraction of survivors pruned in each round.
    pub schedule: Vec<f64>,
    /// Training run between prunes.
    pub train: TrainConfig,
    /// Training run of the final ticket.
    pub final_train: TrainConfig,
    pub norm: NormOrder,
    pub min_keep: usize,
    pub seed: u64,
}

/// Centralized iterative magnitude pruning with rewind to `w0`.
///
/// `uploads` holds each node's raw-data upload; each is charged once to
/// `ledger` (round 0, upstream) before any training. `on_round` sees every
/// pruned model together with its mask, numbered from 1. Returns the
/// retrained ticket and its mask.
pub fn lth_central<T: Scalar>(
    w0: &Model<T>,
    data: &Batch<T>,
    cfg: &LthConfig,
    uploads: &[RawUpload],
    ledger: &mut BandwidthLedger,
    mut on_round: impl FnMut(u32, &Model<T>, &PruneMask),
) -> Result<(Model<T>, PruneMask)> {
    for (node, upload) in uploads.iter().enumerate() {
        ledger.record(0, node, Direction::Up, Traffic::RawData, upload.bits());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask = PruneMask::all_ones(&w0.mask_layout());
    for (r, &increment) in cfg.schedule.iter().enumerate() {
        let round = r as u32 + 1;
        let mut model = w0.clone();
        train(&mut model, data, &mask, &cfg.train, &mut rng).map_err(|e| e.in_round(round))?;
        mask = compute_mask(&weight_scores(&model, cfg.norm), increment, &mask, cfg.min_keep)?;
        on_round(round, &apply_mask(&model, &mask)?, &mask);
    }
    let mut ticket = w0.clone();
    train(&mut ticket, data, &mask, &cfg.final_train, &mut rng)?;
    Ok((ticket, mask))
}

fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Batch<T>,
    mask: &PruneMask,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let loss = train_masked(model, data, mask, cfg, rng)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            node: 0,
            message: format!("central training loss {loss}"),
        });
    }
    Ok(())
}
