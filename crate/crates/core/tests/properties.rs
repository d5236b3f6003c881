use mpfl::federation::{fedavg, ConsensusStrategy, Federation, LocalParams, Node, ParameterServer, SessionSettings};
use mpfl::nn::TrainConfig;
use mpfl::scoring::{group_norm, weight_scores};
use mpfl::wire::{Channel, Direction};
use mpfl::{ArchSpec, Batch, Model, NormOrder, PruneMask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn group_instance() -> impl Strategy<Value = (Vec<Vec<f64>>, NormOrder)> {
    (1usize..=10, 1usize..=64).prop_flat_map(|(n, g)| {
        (
            prop::collection::vec(prop::collection::vec(-1e3..1e3f64, g), n),
            prop_oneof![Just(NormOrder::L1), Just(NormOrder::L2)],
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn norm_of_mean_is_at_most_mean_of_norms((groups, p) in group_instance()) {
        let n = groups.len() as f64;
        let mean: Vec<f64> = (0..groups[0].len())
            .map(|j| groups.iter().map(|g| g[j]).sum::<f64>() / n)
            .collect();
        let lhs = group_norm(mean.iter().copied(), p);
        let rhs = groups.iter().map(|g| group_norm(g.iter().copied(), p)).sum::<f64>() / n;
        prop_assert!(lhs <= rhs + 1e-12 * rhs.max(1.0), "{lhs} > {rhs}");
    }

    #[test]
    fn averaged_model_scores_below_mean_scores(
        seed in any::<u64>(),
        n in 1usize..=10,
        p in prop_oneof![Just(NormOrder::L1), Just(NormOrder::L2)],
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [rng.random_range(1..64), rng.random_range(1..12), rng.random_range(1..6)];
        let arch = ArchSpec::mlp(&dims).unwrap();
        let models: Vec<Model<f64>> = (0..n).map(|_| Model::init(&arch, &mut rng).unwrap()).collect();
        let avg = weight_scores(&fedavg(&models).unwrap(), p).concatenated();
        let each: Vec<Vec<f64>> = models.iter().map(|m| weight_scores(m, p).concatenated()).collect();
        for (k, &s) in avg.iter().enumerate() {
            let mean = each.iter().map(|v| v[k]).sum::<f64>() / n as f64;
            prop_assert!(s <= mean + 1e-12, "group {k}: {s} > {mean}");
        }
    }
}

fn random_batch<R: Rng>(dim: usize, classes: usize, len: usize, rng: &mut R) -> Batch<f64> {
    let x: Vec<f64> = (0..dim * len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(x, dim, y).unwrap()
}

#[test]
fn backprop_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let depth = rng.random_range(1..4);
        let dims: Vec<usize> = (0..=depth)
            .map(|i| rng.random_range(if i == depth { 2 } else { 1 }..9))
            .collect();
        let arch = ArchSpec::mlp(&dims).unwrap();
        assert!(arch.param_count() <= 500);
        // Random biases keep pre-activations off the ReLU kink at exactly 0.
        let mut model: Model<f64> = Model::zeros(&arch).unwrap();
        let values: Vec<f64> = (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.set_flat(&values).unwrap();
        let batch = random_batch(dims[0], dims[depth], 6, &mut rng);
        let all = PruneMask::all_ones(&model.mask_layout());
        let (_, grads) = model.loss_and_gradients(&batch).unwrap();
        let analytic: Vec<f64> = grads
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect();
        let base = model.flat();
        for (i, &g) in analytic.iter().enumerate() {
            let mut probe = model.clone();
            let mut w = base.clone();
            w[i] = base[i] + h;
            probe.set_flat(&w).unwrap();
            let up = probe.masked_loss(&all, &batch).unwrap();
            w[i] = base[i] - h;
            probe.set_flat(&w).unwrap();
            let down = probe.masked_loss(&all, &batch).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let scale = g.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((g - numeric).abs() / scale);
            }
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

/// What a model looks like after a trip over the 32-bit wire.
fn wire32(m: &Model<f64>) -> Model<f64> {
    m.cast::<f32>().cast()
}

fn small_federation(seed: u64) -> (Federation<f64>, Model<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchSpec::mlp(&[4, 6, 3]).unwrap();
    let w0: Model<f64> = Model::init(&arch, &mut rng).unwrap();
    let nodes: Vec<Node<f64>> = (0..3)
        .map(|id| Node::new(id, random_batch(4, 3, 20, &mut rng), w0.clone(), seed + id as u64).unwrap())
        .collect();
    let server = ParameterServer::new(&w0.mask_layout(), 3, ConsensusStrategy::TopK, 1);
    let params = LocalParams {
        train: TrainConfig {
            epochs: 1,
            lr: 0.05,
            batch_size: 8,
        },
        ..LocalParams::default()
    };
    let fed = Federation::new(nodes, server, Channel::loopback(), SessionSettings::default(), params).unwrap();
    (fed, w0)
}

#[test]
fn zero_final_rounds_return_average_of_local_models() {
    let (mut fed, w0) = small_federation(5);
    fed.broadcast_init(&w0).unwrap();
    fed.pruning_round(0.2).unwrap();
    let locals: Vec<Model<f64>> = fed.nodes().iter().map(|n| wire32(n.model())).collect();
    let mut expected = fedavg(&locals).unwrap();
    expected.mask_in_place(fed.global_mask()).unwrap();
    let before = fed.ledger().total_in(Direction::Up);
    let got = fed.final_fl_phase(0, |_, _| Ok(())).unwrap();
    assert_eq!(got, expected);
    assert!(fed.ledger().total_in(Direction::Up) > before);
}

#[test]
fn all_ones_final_phase_is_plain_fedavg() {
    let (mut fed, w0) = small_federation(9);
    fed.broadcast_init(&w0).unwrap();
    let (oracle, _) = small_federation(9);
    let mut nodes: Vec<Node<f64>> = oracle.nodes().to_vec();
    let all = PruneMask::all_ones(&w0.mask_layout());
    let mut global = wire32(&w0);
    for _ in 0..3 {
        for node in &mut nodes {
            node.set_model(global.clone()).unwrap();
            node.train(&all, fed.params()).unwrap();
        }
        let models: Vec<Model<f64>> = nodes.iter().map(|n| wire32(n.model())).collect();
        global = wire32(&fedavg(&models).unwrap());
    }
    let got = fed.final_fl_phase(3, |_, _| Ok(())).unwrap();
    assert_eq!(wire32(&got), global);
}
