//! Group importance scores, per-layer percentile cuts, and mask derivation.
//!
//! Pruning is always decided inside a layer: each layer drops the requested
//! fraction of its *surviving* groups, so repeated rounds compound on the
//! live network. Ties at the cut prune the lower group index first, which
//! keeps the pruned count exact.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{MaskLayout, PruneMask};
use crate::nn::{DenseLayer, Gradients, Model};
use crate::scalar::Scalar;

/// Order `p` of the norm used to score a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NormOrder {
    L1,
    #[default]
    L2,
}

impl TryFrom<u8> for NormOrder {
    type Error = String;

    fn try_from(p: u8) -> std::result::Result<Self, Self::Error> {
        match p {
            1 => Ok(NormOrder::L1),
            2 => Ok(NormOrder::L2),
            other => Err(format!("norm order must be 1 or 2, got {other}")),
        }
    }
}

impl From<NormOrder> for u8 {
    fn from(p: NormOrder) -> u8 {
        match p {
            NormOrder::L1 => 1,
            NormOrder::L2 => 2,
        }
    }
}

pub fn group_norm<T: Scalar>(values: impl IntoIterator<Item = T>, p: NormOrder) -> T {
    match p {
        NormOrder::L1 => values.into_iter().map(|v| v.abs()).sum(),
        NormOrder::L2 => values.into_iter().map(|v| v * v).sum::<T>().sqrt(),
    }
}

/// Per-layer group scores `s(m)`; [`ScoreVector::concatenated`] gives `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector<T> {
    pub layers: Vec<Vec<T>>,
}

impl<T: Scalar> ScoreVector<T> {
    pub fn concatenated(&self) -> Vec<T> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn layout(&self) -> MaskLayout {
        MaskLayout::new(self.layers.iter().map(Vec::len).collect())
    }

    pub fn scaled(&self, alpha: T) -> Self {
        ScoreVector {
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|&s| s * alpha).collect())
                .collect(),
        }
    }
}

fn layer_scores<T: Scalar>(layers: &[DenseLayer<T>], p: NormOrder) -> ScoreVector<T> {
    ScoreVector {
        layers: layers
            .iter()
            .map(|layer| (0..layer.out_dim).map(|l| group_norm(layer.group(l), p)).collect())
            .collect(),
    }
}

/// Score every prunable group by the p-norm of its weights and bias.
pub fn weight_scores<T: Scalar>(model: &Model<T>, p: NormOrder) -> ScoreVector<T> {
    let prunable = model.mask_layout().num_layers();
    layer_scores(&model.layers()[..prunable], p)
}

/// Score every prunable group by the p-norm of its loss gradient.
pub fn gradient_scores<T: Scalar>(grads: &Gradients<T>, layout: &MaskLayout, p: NormOrder) -> Result<ScoreVector<T>> {
    if grads.layers.len() != layout.num_layers() + 1
        || grads
            .layers
            .iter()
            .zip(&layout.groups)
            .any(|(g, &groups)| g.out_dim != groups)
    {
        return Err(Error::shape("gradients do not match the mask layout"));
    }
    Ok(layer_scores(&grads.layers[..layout.num_layers()], p))
}

/// Number of groups removed when pruning `sparsity` of `n` survivors
/// (nearest-rank: `ceil(sparsity · n)`).
pub fn prune_count(sparsity: f64, n: usize) -> usize {
    let raw = sparsity * n as f64;
    // absorb representation error such as 0.1 * 30 = 3.0000000000000004
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keep budget `K` after pruning `sparsity` of `total` units.
pub fn keep_budget(total: usize, sparsity: f64) -> usize {
    total - prune_count(sparsity, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutStatus {
    Ok,
    /// Every group was frozen; nothing to rank.
    AllFrozen,
}

/// Outcome of ranking one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCut<T> {
    /// Nearest-rank percentile of the non-frozen scores.
    pub threshold: T,
    /// Indices to prune, ascending by (score, index).
    pub pruned: Vec<usize>,
    pub status: CutStatus,
}

fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::config(
            "pruning.sparsity",
            format!("sparsity must lie in [0, 1), got {sparsity}"),
        ));
    }
    Ok(())
}

fn rank_cmp<T: Scalar>(a: (usize, T), b: (usize, T)) -> Ordering {
    a.1.to_f64_lossless()
        .total_cmp(&b.1.to_f64_lossless())
        .then(a.0.cmp(&b.0))
}

/// Ranks a layer's non-frozen scores and picks the groups to prune.
///
/// At most `survivors - min_keep` groups are selected.
pub fn layer_cut<T: Scalar>(scores: &[T], sparsity: f64, frozen: &[bool], min_keep: usize) -> Result<LayerCut<T>> {
    check_sparsity(sparsity)?;
    if scores.len() != frozen.len() {
        return Err(Error::shape("scores and frozen flags differ in length"));
    }
    let mut live: Vec<(usize, T)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|&(i, _)| !frozen[i])
        .collect();
    if live.is_empty() {
        return Ok(LayerCut {
            threshold: T::zero(),
            pruned: Vec::new(),
            status: CutStatus::AllFrozen,
        });
    }
    live.sort_by(|&a, &b| rank_cmp(a, b));
    let k = prune_count(sparsity, live.len());
    let threshold = if k == 0 { live[0].1 } else { live[k - 1].1 };
    let k = k.min(live.len().saturating_sub(min_keep));
    Ok(LayerCut {
        threshold,
        pruned: live[..k].iter().map(|&(i, _)| i).collect(),
        status: CutStatus::Ok,
    })
}

/// Threshold for one layer; frozen groups are excluded from the distribution.
pub fn layer_threshold<T: Scalar>(scores: &[T], sparsity: f64, frozen: &[bool]) -> Result<(T, CutStatus)> {
    let cut = layer_cut(scores, sparsity, frozen, 0)?;
    if cut.status == CutStatus::AllFrozen {
        log::warn!("all {} groups frozen; threshold defaults to 0", scores.len());
    }
    Ok((cut.threshold, cut.status))
}

/// Derives the next mask: prunes `sparsity` of each layer's surviving groups,
/// never reviving a group already pruned in `prev_mask`, and never leaving a
/// layer with fewer than `min_keep` groups through this call.
pub fn compute_mask<T: Scalar>(
    scores: &ScoreVector<T>,
    sparsity: f64,
    prev_mask: &PruneMask,
    min_keep: usize,
) -> Result<PruneMask> {
    check_sparsity(sparsity)?;
    prev_mask.check_layout(&scores.layout())?;
    let mut mask = prev_mask.clone();
    for (m, layer) in scores.layers.iter().enumerate() {
        let frozen: Vec<bool> = prev_mask.layer(m).iter().map(|&keep| !keep).collect();
        let cut = layer_cut(layer, sparsity, &frozen, min_keep)?;
        for l in cut.pruned {
            mask.set(m, l, false);
        }
    }
    Ok(mask)
}

/// Copy of `model` with every pruned group's weights and bias set to zero.
pub fn apply_mask<T: Scalar>(model: &Model<T>, mask: &PruneMask) -> Result<Model<T>> {
    let mut out = model.clone();
    out.mask_in_place(mask)?;
    Ok(out)
}
