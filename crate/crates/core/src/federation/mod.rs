//! Mask voting, consensus, and federated averaging.
//!
//! Each node uploads its local mask; the parameter server counts keep-votes
//! per group and reduces the histogram to a global mask with one of two
//! strategies: a per-layer keep budget (top-K by votes) or an agreement
//! threshold. Either way the result never revives a group that was already
//! pruned and never exceeds the round's keep budget.

mod node;
mod session;

pub use node::{LocalParams, Node, ScoringMode};
pub use session::{Federation, SessionSettings};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{MaskLayout, PruneMask};
use crate::nn::Model;
use crate::scalar::Scalar;
use crate::scoring::prune_count;

/// Per-group keep-vote counts over `N` nodes; fractions are `count / N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteHistogram {
    counts: Vec<Vec<u32>>,
    nodes: u32,
}

impl VoteHistogram {
    pub fn nodes(&self) -> u32 {
        self.nodes
    }

    pub fn count(&self, m: usize, l: usize) -> u32 {
        self.counts[m][l]
    }

    pub fn fraction(&self, m: usize, l: usize) -> f64 {
        f64::from(self.counts[m][l]) / f64::from(self.nodes)
    }

    pub fn layer_fractions(&self, m: usize) -> Vec<f64> {
        (0..self.counts[m].len()).map(|l| self.fraction(m, l)).collect()
    }

    pub fn layout(&self) -> MaskLayout {
        MaskLayout::new(self.counts.iter().map(Vec::len).collect())
    }
}

/// `ĉ = (1/N) Σ c_n`, kept as exact counts.
pub fn average_mask(masks: &[PruneMask]) -> Result<VoteHistogram> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Constraint("cannot average an empty set of masks".into()))?;
    let layout = first.layout();
    let mut counts: Vec<Vec<u32>> = layout.groups.iter().map(|&g| vec![0; g]).collect();
    for mask in masks {
        mask.check_layout(&layout)?;
        for (layer, bits) in counts.iter_mut().zip(mask.layers()) {
            for (c, &b) in layer.iter_mut().zip(bits) {
                *c += u32::from(b);
            }
        }
    }
    Ok(VoteHistogram {
        counts,
        nodes: masks.len() as u32,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum ConsensusStrategy {
    /// Keep the `K(m)` most-voted surviving groups of each layer.
    #[default]
    TopK,
    /// Keep groups whose keep-vote fraction reaches `agreement`.
    Histogram { agreement: f64 },
}

/// Candidates ranked by votes, highest first; equal votes keep the lower index.
fn rank_by_votes(hist: &VoteHistogram, m: usize, candidates: &mut [usize]) {
    candidates.sort_by(|&a, &b| hist.count(m, b).cmp(&hist.count(m, a)).then(a.cmp(&b)));
}

fn survivors(prev: &PruneMask, m: usize) -> Vec<usize> {
    (0..prev.layer(m).len()).filter(|&l| prev.get(m, l)).collect()
}

pub fn consensus_topk(
    hist: &VoteHistogram,
    budget: &[usize],
    prev_mask: &PruneMask,
    min_keep: usize,
) -> Result<PruneMask> {
    let layout = hist.layout();
    prev_mask.check_layout(&layout)?;
    if budget.len() != layout.num_layers() {
        return Err(Error::shape("keep budget does not cover every layer"));
    }
    let mut mask = PruneMask::all_zeros(&layout);
    for (m, (&k, &groups)) in budget.iter().zip(&layout.groups).enumerate() {
        if k > groups {
            return Err(Error::Constraint(format!(
                "layer {m}: budget {k} exceeds {groups} groups"
            )));
        }
        if k == 0 && min_keep > 0 {
            return Err(Error::Constraint(format!(
                "layer {m}: zero budget with min_keep {min_keep}"
            )));
        }
        let mut live = survivors(prev_mask, m);
        rank_by_votes(hist, m, &mut live);
        for &l in live.iter().take(k) {
            mask.set(m, l, true);
        }
    }
    Ok(mask)
}

/// Smallest count `v` with `v / N ≥ agreement`.
fn required_votes(agreement: f64, nodes: u32) -> u32 {
    ((agreement * f64::from(nodes)) - 1e-9).ceil().max(0.0) as u32
}

pub fn consensus_histogram(
    hist: &VoteHistogram,
    agreement: f64,
    prev_mask: &PruneMask,
    min_keep: usize,
) -> Result<PruneMask> {
    if !(agreement > 0.0 && agreement <= 1.0) {
        return Err(Error::config("consensus.agreement", "agreement must lie in (0, 1]"));
    }
    let layout = hist.layout();
    prev_mask.check_layout(&layout)?;
    let needed = required_votes(agreement, hist.nodes());
    let mut mask = PruneMask::all_zeros(&layout);
    for m in 0..layout.num_layers() {
        let mut live = survivors(prev_mask, m);
        let mut kept = 0;
        for &l in &live {
            if hist.count(m, l) >= needed {
                mask.set(m, l, true);
                kept += 1;
            }
        }
        let floor = min_keep.min(live.len());
        if kept < floor {
            rank_by_votes(hist, m, &mut live);
            for &l in &live {
                if kept == floor {
                    break;
                }
                if !mask.get(m, l) {
                    mask.set(m, l, true);
                    kept += 1;
                }
            }
        }
    }
    Ok(mask)
}

/// Keep budget for the next round: each layer drops `increment` of its
/// surviving groups, but never below `min_keep` (or below what survives).
pub fn round_budget(prev_mask: &PruneMask, increment: f64, min_keep: usize) -> Vec<usize> {
    (0..prev_mask.num_layers())
        .map(|m| {
            let live = prev_mask.keep_count(m);
            (live - prune_count(increment, live)).max(min_keep.min(live))
        })
        .collect()
}

/// Averages the uploaded masks and reduces them to the next global mask.
pub fn ps_round(
    masks: &[PruneMask],
    strategy: ConsensusStrategy,
    budget: &[usize],
    prev_mask: &PruneMask,
    min_keep: usize,
) -> Result<PruneMask> {
    let hist = average_mask(masks)?;
    let consensus = match strategy {
        ConsensusStrategy::TopK => consensus_topk(&hist, budget, prev_mask, min_keep)?,
        ConsensusStrategy::Histogram { agreement } => consensus_histogram(&hist, agreement, prev_mask, min_keep)?,
    };
    let mut mask = consensus.intersect(prev_mask)?;
    for (m, &k) in budget.iter().enumerate() {
        if mask.keep_count(m) > k {
            let mut kept = survivors(&mask, m);
            rank_by_votes(&hist, m, &mut kept);
            for &l in &kept[k..] {
                mask.set(m, l, false);
            }
        }
    }
    Ok(mask)
}

/// Coordinatewise mean of the models.
pub fn fedavg<T: Scalar>(models: &[Model<T>]) -> Result<Model<T>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Constraint("cannot average an empty set of models".into()))?;
    let mut sum = first.clone();
    for other in &models[1..] {
        if !other.same_shape(first) {
            return Err(Error::shape("models differ in shape"));
        }
        for (acc, layer) in sum.layers_mut().iter_mut().zip(other.layers()) {
            for (a, &b) in acc.weights.iter_mut().zip(&layer.weights) {
                *a += b;
            }
            for (a, &b) in acc.bias.iter_mut().zip(&layer.bias) {
                *a += b;
            }
        }
    }
    let n = T::from_usize(models.len()).expect("model count");
    for layer in sum.layers_mut() {
        for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *v /= n;
        }
    }
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pruning,
    FinalFl,
}

/// Parameter-server bookkeeping between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    /// Completed pruning rounds.
    pub round: u32,
    pub global_mask: PruneMask,
    pub phase: Phase,
    pub last_masks: Vec<Option<PruneMask>>,
    /// Keep budget `K(m)` applied in the most recent round.
    pub budget: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ParameterServer {
    state: RoundState,
    strategy: ConsensusStrategy,
    min_keep: usize,
}

impl ParameterServer {
    pub fn new(layout: &MaskLayout, nodes: usize, strategy: ConsensusStrategy, min_keep: usize) -> Self {
        ParameterServer {
            state: RoundState {
                round: 0,
                global_mask: PruneMask::all_ones(layout),
                phase: Phase::Pruning,
                last_masks: vec![None; nodes],
                budget: layout.groups.clone(),
            },
            strategy,
            min_keep,
        }
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn global_mask(&self) -> &PruneMask {
        &self.state.global_mask
    }

    pub fn strategy(&self) -> ConsensusStrategy {
        self.strategy
    }

    pub fn min_keep(&self) -> usize {
        self.min_keep
    }

    /// Runs one consensus round over the masks uploaded for `increment`.
    pub fn aggregate(&mut self, masks: &[PruneMask], increment: f64) -> Result<PruneMask> {
        if self.state.phase != Phase::Pruning {
            return Err(Error::Constraint(
                "mask aggregation after the pruning phase ended".into(),
            ));
        }
        if masks.len() != self.state.last_masks.len() {
            return Err(Error::Constraint(format!(
                "expected {} masks, got {}",
                self.state.last_masks.len(),
                masks.len()
            )));
        }
        let budget = round_budget(&self.state.global_mask, increment, self.min_keep);
        let next = ps_round(masks, self.strategy, &budget, &self.state.global_mask, self.min_keep)?;
        self.state.last_masks = masks.iter().cloned().map(Some).collect();
        self.state.budget = budget;
        self.commit(next.clone())?;
        Ok(next)
    }

    /// Installs a mask computed elsewhere (server-side pruning).
    pub fn commit(&mut self, mask: PruneMask) -> Result<()> {
        if !mask.is_subset_of(&self.state.global_mask) {
            return Err(Error::Constraint("global mask may not regrow pruned groups".into()));
        }
        self.state.global_mask = mask;
        self.state.round += 1;
        Ok(())
    }

    pub fn enter_final_phase(&mut self) -> Result<()> {
        if self.state.phase == Phase::FinalFl {
            return Err(Error::Constraint("already in the final FL phase".into()));
        }
        self.state.phase = Phase::FinalFl;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;
    use crate::scoring::NormOrder;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_layer(bits: &[u8]) -> PruneMask {
        PruneMask::from_layers(vec![bits.iter().map(|&b| b == 1).collect()])
    }

    fn hist_from_counts(counts: &[u32], nodes: u32) -> VoteHistogram {
        VoteHistogram {
            counts: vec![counts.to_vec()],
            nodes,
        }
    }

    fn random_mask<R: Rng>(layout: &MaskLayout, p_keep: f64, rng: &mut R) -> PruneMask {
        PruneMask::from_layers(
            layout
                .groups
                .iter()
                .map(|&g| (0..g).map(|_| rng.random_bool(p_keep)).collect())
                .collect(),
        )
    }

    #[test]
    fn unanimous_and_hand_histograms() {
        let m = one_layer(&[1, 0, 1, 1]);
        let h = average_mask(&[m.clone(), m.clone(), m.clone()]).unwrap();
        assert_eq!(h.layer_fractions(0), vec![1.0, 0.0, 1.0, 1.0]);
        let h = average_mask(&[one_layer(&[1, 0, 1]), one_layer(&[1, 1, 0])]).unwrap();
        assert_eq!(h.layer_fractions(0), vec![1.0, 0.5, 0.5]);
        assert!(average_mask(&[]).is_err());
        assert!(average_mask(&[one_layer(&[1]), one_layer(&[1, 0])]).is_err());
    }

    #[test]
    fn histogram_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layout = MaskLayout::new(vec![7, 13]);
        let masks: Vec<PruneMask> = (0..10).map(|_| random_mask(&layout, 0.6, &mut rng)).collect();
        let h = average_mask(&masks).unwrap();
        for m in 0..2 {
            for l in 0..layout.groups[m] {
                let pop = masks.iter().filter(|mask| mask.get(m, l)).count();
                assert_eq!(h.fraction(m, l), pop as f64 / 10.0);
            }
        }
    }

    #[test]
    fn topk_tie_keeps_lower_index() {
        let h = hist_from_counts(&[10, 5, 5, 2], 10);
        let prev = PruneMask::all_ones(&h.layout());
        let mask = consensus_topk(&h, &[2], &prev, 1).unwrap();
        assert_eq!(mask, one_layer(&[1, 1, 0, 0]));
        assert_eq!(consensus_topk(&h, &[4], &prev, 1).unwrap(), prev);
        assert!(matches!(consensus_topk(&h, &[0], &prev, 1), Err(Error::Constraint(_))));
        assert!(consensus_topk(&h, &[5], &prev, 1).is_err());
    }

    #[test]
    fn topk_respects_previous_mask() {
        let h = hist_from_counts(&[10, 9, 1, 8], 10);
        let prev = one_layer(&[0, 1, 1, 1]);
        let mask = consensus_topk(&h, &[2], &prev, 1).unwrap();
        assert_eq!(mask, one_layer(&[0, 1, 0, 1]));
    }

    #[test]
    fn ninety_percent_agreement() {
        let h = hist_from_counts(&[9, 8, 10, 0], 10);
        let prev = PruneMask::all_ones(&h.layout());
        let mask = consensus_histogram(&h, 0.9, &prev, 0).unwrap();
        assert_eq!(mask, one_layer(&[1, 0, 1, 0]));
        let tiny = consensus_histogram(&h, 1e-9, &prev, 0).unwrap();
        assert_eq!(tiny, one_layer(&[1, 1, 1, 0]));
        assert!(consensus_histogram(&h, 0.0, &prev, 0).is_err());
        assert!(consensus_histogram(&h, 1.5, &prev, 0).is_err());
    }

    #[test]
    fn tiny_agreement_keeps_voted_survivors() {
        // every surviving group has at least one vote
        let h = hist_from_counts(&[1, 3, 2], 3);
        let prev = one_layer(&[1, 0, 1]);
        assert_eq!(consensus_histogram(&h, 1e-6, &prev, 0).unwrap(), prev);
    }

    #[test]
    fn histogram_min_keep_restores_best_voted() {
        let h = hist_from_counts(&[3, 5, 4, 0], 10);
        let prev = PruneMask::all_ones(&h.layout());
        let mask = consensus_histogram(&h, 0.9, &prev, 2).unwrap();
        assert_eq!(mask, one_layer(&[0, 1, 1, 0]));
    }

    #[test]
    fn histogram_matches_direct_comparison() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..200 {
            let n = rng.random_range(1..15u32);
            let counts: Vec<u32> = (0..20).map(|_| rng.random_range(0..=n)).collect();
            let h = hist_from_counts(&counts, n);
            let prev = random_mask(&h.layout(), 0.8, &mut rng);
            let agreement: f64 = rng.random_range(0.05..1.0);
            let mask = consensus_histogram(&h, agreement, &prev, 0).unwrap();
            for (l, &c) in counts.iter().enumerate() {
                let direct = prev.get(0, l) && f64::from(c) / f64::from(n) >= agreement - 1e-12;
                assert_eq!(mask.get(0, l), direct);
            }
        }
    }

    #[test]
    fn strategies_diverge_on_crafted_histogram() {
        // votes (10, 9, 9, 6, 3) of 10 with K = 2 and 90% agreement
        let masks: Vec<PruneMask> = (0..10)
            .map(|n| one_layer(&[1, u8::from(n < 9), u8::from(n >= 1), u8::from(n < 6), u8::from(n < 3)]))
            .collect();
        let prev = PruneMask::all_ones(&masks[0].layout());
        let topk = ps_round(&masks, ConsensusStrategy::TopK, &[2], &prev, 1).unwrap();
        assert_eq!(topk, one_layer(&[1, 1, 0, 0, 0]));
        let hist = ps_round(&masks, ConsensusStrategy::Histogram { agreement: 0.9 }, &[4], &prev, 1).unwrap();
        assert_eq!(hist, one_layer(&[1, 1, 1, 0, 0]));
        // the budget caps the histogram result as well
        let capped = ps_round(&masks, ConsensusStrategy::Histogram { agreement: 0.9 }, &[2], &prev, 1).unwrap();
        assert_eq!(capped, topk);
    }

    #[test]
    fn unanimous_ps_round_returns_that_mask() {
        let honest = one_layer(&[1, 0, 1, 1, 0, 1]);
        let masks = vec![honest.clone(); 6];
        let prev = PruneMask::all_ones(&honest.layout());
        for strategy in [ConsensusStrategy::TopK, ConsensusStrategy::Histogram { agreement: 0.9 }] {
            assert_eq!(ps_round(&masks, strategy, &[4], &prev, 1).unwrap(), honest);
        }
    }

    #[test]
    fn adversary_is_outvoted() {
        let honest = one_layer(&[1, 0, 1, 1, 0, 1, 1, 0]);
        let mut masks = vec![honest.clone(); 9];
        masks.push(PruneMask::all_zeros(&honest.layout()));
        let prev = PruneMask::all_ones(&honest.layout());
        let budget = round_budget(&prev, 0.375, 1);
        assert_eq!(budget, vec![5]);
        let out = ps_round(
            &masks,
            ConsensusStrategy::Histogram { agreement: 0.9 },
            &budget,
            &prev,
            1,
        )
        .unwrap();
        assert_eq!(out, honest);
    }

    #[test]
    fn mask_of_average_differs_from_average_of_masks() {
        use crate::nn::DenseLayer;
        use crate::scoring::{compute_mask, weight_scores};
        let arch = ArchSpec::mlp(&[1, 3, 1]).unwrap();
        let build = |w: [f64; 3]| {
            let hidden = DenseLayer {
                in_dim: 1,
                out_dim: 3,
                weights: w.to_vec(),
                bias: vec![0.0; 3],
            };
            Model::from_layers(&arch, vec![hidden, DenseLayer::zeros(3, 1)]).unwrap()
        };
        let a = build([1.0, 2.0, -3.0]);
        let b = build([1.0, 2.0, 3.0]);
        let all = PruneMask::all_ones(&a.mask_layout());
        let local = |m: &Model<f64>| compute_mask(&weight_scores(m, NormOrder::L2), 1.0 / 3.0, &all, 1).unwrap();

        let of_average = local(&fedavg(&[a.clone(), b.clone()]).unwrap());
        assert_eq!(of_average, one_layer(&[1, 1, 0]));
        let voted = ps_round(&[local(&a), local(&b)], ConsensusStrategy::TopK, &[2], &all, 1).unwrap();
        assert_eq!(voted, one_layer(&[0, 1, 1]));
    }

    #[test]
    fn fedavg_cases() {
        let arch = ArchSpec::mlp(&[3, 4, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = Model::<f64>::init(&arch, &mut rng).unwrap();
        assert_eq!(fedavg(&[w.clone(), w.clone()]).unwrap(), w);
        assert_eq!(fedavg(&vec![w.clone(); 4]).unwrap(), w);
        let mut neg = w.clone();
        let flat: Vec<f64> = w.flat().iter().map(|v| -v).collect();
        neg.set_flat(&flat).unwrap();
        assert!(fedavg(&[w.clone(), neg]).unwrap().flat().iter().all(|&v| v == 0.0));
        assert!(fedavg::<f64>(&[]).is_err());
        let other = Model::<f64>::zeros(&ArchSpec::mlp(&[3, 5, 2]).unwrap()).unwrap();
        assert!(fedavg(&[w, other]).is_err());
    }

    #[test]
    fn fedavg_matches_scalar_loop() {
        let arch = ArchSpec::mlp(&[4, 6, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let models: Vec<Model<f64>> = (0..5).map(|_| Model::init(&arch, &mut rng).unwrap()).collect();
        let avg = fedavg(&models).unwrap().flat();
        let flats: Vec<Vec<f64>> = models.iter().map(Model::flat).collect();
        for i in 0..avg.len() {
            let mut s = 0.0;
            for f in &flats {
                s += f[i];
            }
            assert!((avg[i] - s / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn server_rejects_regrowth_and_double_phase_switch() {
        let layout = MaskLayout::new(vec![4]);
        let mut ps = ParameterServer::new(&layout, 2, ConsensusStrategy::TopK, 1);
        let m = one_layer(&[1, 1, 1, 0]);
        let out = ps.aggregate(&[m.clone(), m.clone()], 0.25).unwrap();
        assert_eq!(out, m);
        assert_eq!(ps.state().budget, vec![3]);
        assert!(ps.commit(PruneMask::all_ones(&layout)).is_err());
        assert!(ps.aggregate(std::slice::from_ref(&m), 0.25).is_err());
        ps.enter_final_phase().unwrap();
        assert!(ps.enter_final_phase().is_err());
        assert!(ps.aggregate(&[m.clone(), m], 0.25).is_err());
    }

    proptest! {
        #[test]
        fn votes_are_integral(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = MaskLayout::new(vec![9, 4]);
            let masks: Vec<PruneMask> = (0..n).map(|_| random_mask(&layout, 0.5, &mut rng)).collect();
            let h = average_mask(&masks).unwrap();
            for m in 0..2 {
                for l in 0..layout.groups[m] {
                    let scaled = h.fraction(m, l) * n as f64;
                    prop_assert!((scaled - scaled.round()).abs() < 1e-9);
                    prop_assert!(h.count(m, l) as usize <= n);
                }
            }
        }

        #[test]
        fn ps_round_respects_budget_and_monotonicity(
            seed in any::<u64>(),
            increment in 0.0..0.6f64,
            histogram in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = MaskLayout::new(vec![10, 6]);
            let prev = random_mask(&layout, 0.8, &mut rng);
            let masks: Vec<PruneMask> = (0..7).map(|_| random_mask(&layout, 0.7, &mut rng)).collect();
            let budget = round_budget(&prev, increment, 1);
            let strategy = if histogram {
                ConsensusStrategy::Histogram { agreement: 0.6 }
            } else {
                ConsensusStrategy::TopK
            };
            let out = ps_round(&masks, strategy, &budget, &prev, 1).unwrap();
            prop_assert!(out.is_subset_of(&prev));
            for (m, &k) in budget.iter().enumerate() {
                prop_assert!(out.keep_count(m) <= k);
            }
        }

        #[test]
        fn fedavg_is_homogeneous(seed in any::<u64>(), alpha in -3.0..3.0f64) {
            let arch = ArchSpec::mlp(&[3, 4, 2]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let models: Vec<Model<f64>> = (0..4).map(|_| Model::init(&arch, &mut rng).unwrap()).collect();
            let scaled: Vec<Model<f64>> = models
                .iter()
                .map(|m| {
                    let mut s = m.clone();
                    let flat: Vec<f64> = m.flat().iter().map(|v| v * alpha).collect();
                    s.set_flat(&flat).unwrap();
                    s
                })
                .collect();
            let lhs = fedavg(&scaled).unwrap().flat();
            let rhs: Vec<f64> = fedavg(&models).unwrap().flat().iter().map(|v| v * alpha).collect();
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
