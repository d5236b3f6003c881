//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails.

use std::process::Command;
use std::time::{Duration, Instant};

use mpfl::data::{load, partition_iid, BlobSpec, Contamination, DataSource};
use mpfl::experiment::{run, Algorithm, ExperimentConfig, MetricsRow, NodeContamination};
use mpfl::federation::{
    average_mask, fedavg, ps_round, round_budget, ConsensusStrategy, Federation, LocalParams, Node, ParameterServer,
    SessionSettings,
};
use mpfl::nn::DenseLayer;
use mpfl::scoring::{compute_mask, group_norm, weight_scores};
use mpfl::wire::bits::{bits_to_bytes, RawUpload};
use mpfl::wire::fuzz::run_fuzz;
use mpfl::wire::Channel;
use mpfl::{ArchSpec, Batch, MaskLayout, Model, NormOrder, PruneMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mpfl"))
}

fn stdout_of(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn mpfl");
    assert!(
        out.status.success(),
        "{cmd:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(':')))
        .map(str::trim)
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

fn bandwidth_arithmetic() -> Verdict {
    let start = Instant::now();
    let text = stdout_of(bin().args(["bits", "--preset", "vgg16", "--precision", "64"]));
    let elapsed = start.elapsed();
    let dense: u64 = field(&text, "dense_bits").parse().unwrap();
    let mask: u64 = field(&text, "mask_bits").parse().unwrap();
    let savings: f64 = field(&text, "savings").trim_end_matches('%').parse().unwrap();
    Verdict::new(
        dense == 1_182_720 && mask == 16_512 && (savings - 98.6).abs() <= 0.05 && elapsed < Duration::from_secs(1),
        format!("dense {dense}, mask {mask}, savings {savings}%, {elapsed:.2?}"),
    )
}

fn lth_upload_accounting() -> Verdict {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::preset("quick").unwrap();
    cfg.algorithm = Algorithm::Lth;
    cfg.accounting.raw_upload = Some(RawUpload {
        samples: 60_000,
        values_per_sample: 32 * 32 * 3,
        bits_per_value: 8,
        label_bits: 0,
    });
    let out = run(&cfg).unwrap();
    let elapsed = start.elapsed();
    let bits = out.final_row().cumulative_raw_bits;
    let mb = bits_to_bytes(bits) as f64 / 1e6;
    let mib = bits_to_bytes(bits) as f64 / (1024.0 * 1024.0);
    let expected = 17.6;
    let within = |v: f64| (v - expected).abs() <= 0.01 * expected;
    Verdict::new(
        (within(mb) || within(mib)) && elapsed < Duration::from_secs(1),
        format!("ledger {bits} bits = {mb:.2} MB = {mib:.2} MiB, expected {expected} MB, {elapsed:.2?}"),
    )
}

fn triangle_inequality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = f64::NEG_INFINITY;
    let mut checked = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let g = rng.random_range(1..=64);
        let groups: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..g).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let mean: Vec<f64> = (0..g)
            .map(|j| groups.iter().map(|w| w[j]).sum::<f64>() / n as f64)
            .collect();
        for p in [NormOrder::L1, NormOrder::L2] {
            let lhs = group_norm(mean.iter().copied(), p);
            let rhs = groups.iter().map(|w| group_norm(w.iter().copied(), p)).sum::<f64>() / n as f64;
            worst = worst.max(lhs - rhs);
            checked += 1;
        }
    }
    Verdict::new(
        worst <= 1e-12,
        format!("{checked} checks, max score(mean) - mean(scores) = {worst:e}"),
    )
}

fn one_layer(bits: &[u8]) -> PruneMask {
    PruneMask::from_layers(vec![bits.iter().map(|&b| b == 1).collect()])
}

fn nonlinearity_witness() -> Verdict {
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
    let voted = ps_round(&[local(&a), local(&b)], ConsensusStrategy::TopK, &[2], &all, 1).unwrap();
    Verdict::new(
        of_average == one_layer(&[1, 1, 0]) && voted == one_layer(&[0, 1, 1]) && of_average != voted,
        format!(
            "mask of average {:?}, vote over masks {:?}",
            of_average.layer(0),
            voted.layer(0)
        ),
    )
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let depth = rng.random_range(1..4);
        let dims: Vec<usize> = (0..=depth)
            .map(|i| rng.random_range(if i == depth { 2 } else { 1 }..9))
            .collect();
        let arch = ArchSpec::mlp(&dims).unwrap();
        let mut model = Model::<f64>::zeros(&arch).unwrap();
        let values: Vec<f64> = (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.set_flat(&values).unwrap();
        let x: Vec<f64> = (0..dims[0] * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..6).map(|_| rng.random_range(0..dims[depth])).collect();
        let batch = Batch::new(x, dims[0], y).unwrap();
        let (_, grads) = model.loss_and_gradients(&batch).unwrap();
        let analytic: Vec<f64> = grads
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect();
        for (i, &g) in analytic.iter().enumerate() {
            let mut probe = values.clone();
            probe[i] += h;
            model.set_flat(&probe).unwrap();
            let up = model.forward(&batch).unwrap().loss;
            probe[i] -= 2.0 * h;
            model.set_flat(&probe).unwrap();
            let down = model.forward(&batch).unwrap().loss;
            let numeric = (up - down) / (2.0 * h);
            let scale = g.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((g - numeric).abs() / scale);
            }
        }
        model.set_flat(&values).unwrap();
    }
    let elapsed = start.elapsed();
    Verdict::new(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("100 nets, max relative error {worst:.2e}, {elapsed:.2?}"),
    )
}

fn codec_fuzz() -> Verdict {
    let report = run_fuzz(10_000, 1);
    Verdict::new(
        report.round_trips == 10_000 && report.round_trip_failures == 0 && report.panics == 0,
        format!(
            "{} round trips, {} failures, {} corrupt frames ({} rejected), {} panics",
            report.round_trips, report.round_trip_failures, report.corruptions, report.corrupt_rejected, report.panics
        ),
    )
}

fn consensus_constraints() -> Verdict {
    let mut detail = Vec::new();
    let mut pass = true;
    for strategy in [ConsensusStrategy::TopK, ConsensusStrategy::Histogram { agreement: 0.9 }] {
        let data = load(
            &DataSource::Synthetic(BlobSpec {
                samples: 2000,
                classes: 10,
                features: 16,
                center_spread: 1.0,
                noise_std: 1.0,
            }),
            3,
        )
        .unwrap();
        let shards = partition_iid(&data, 10, 4).unwrap();
        let arch = ArchSpec::mlp(&[16, 32, 16, 10]).unwrap();
        let w0 = Model::<f64>::init(&arch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let nodes: Vec<Node<f64>> = shards
            .iter()
            .map(|s| Node::new(s.node, s.data.batch().unwrap(), w0.clone(), 100 + s.node as u64).unwrap())
            .collect();
        let params = LocalParams::default();
        let server = ParameterServer::new(&w0.mask_layout(), 10, strategy, params.min_keep);
        let mut fed = Federation::new(nodes, server, Channel::loopback(), SessionSettings::default(), params).unwrap();
        fed.broadcast_init(&w0).unwrap();
        for round in 1..=5 {
            let prev = fed.global_mask().clone();
            let budget = round_budget(&prev, 0.1, 1);
            let mask = fed.pruning_round(0.1).unwrap();
            let within = (0..mask.num_layers()).all(|m| mask.keep_count(m) <= budget[m]);
            let monotone = mask.is_subset_of(&prev);
            pass &= within && monotone;
            if !(within && monotone) {
                detail.push(format!(
                    "{strategy:?} round {round}: within K {within}, monotone {monotone}"
                ));
            }
        }
        detail.push(format!(
            "{strategy:?} final sparsity {:.3}",
            fed.global_mask().sparsity()
        ));
    }
    Verdict::new(pass, detail.join("; "))
}

fn random_mask<R: Rng>(layout: &MaskLayout, p: f64, rng: &mut R) -> PruneMask {
    PruneMask::from_layers(
        layout
            .groups
            .iter()
            .map(|&g| (0..g).map(|_| rng.random_bool(p)).collect())
            .collect(),
    )
}

fn robustness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let layout = MaskLayout::new(vec![64, 32, 16]);
    let all = PruneMask::all_ones(&layout);
    let strategy = ConsensusStrategy::Histogram { agreement: 0.9 };
    let mut mismatches = 0;
    for case in 0..1000 {
        let mut honest = random_mask(&layout, rng.random_range(0.2..0.9), &mut rng);
        for m in 0..layout.num_layers() {
            if honest.keep_count(m) == 0 {
                honest.set(m, 0, true);
            }
        }
        let adversary = match case % 4 {
            0 => random_mask(&layout, rng.random_range(0.0..=1.0), &mut rng),
            1 => PruneMask::all_zeros(&layout),
            2 => all.clone(),
            _ => PruneMask::from_layers(
                honest
                    .layers()
                    .iter()
                    .map(|l| l.iter().map(|&b| !b).collect())
                    .collect(),
            ),
        };
        let mut masks = vec![honest.clone(); 9];
        masks.insert(rng.random_range(0..10), adversary);
        assert_eq!(average_mask(&masks).unwrap().nodes(), 10);
        let budget: Vec<usize> = (0..layout.num_layers()).map(|m| honest.keep_count(m)).collect();
        let out = ps_round(&masks, strategy, &budget, &all, 1).unwrap();
        if out != honest {
            mismatches += 1;
        }
    }
    Verdict::new(
        mismatches == 0,
        format!("1000 adversarial inputs, {mismatches} outputs differ from the honest mask"),
    )
}

/// Accuracy at the first and last row of each sparsity level >= 0.4.
fn levels(rows: &[MetricsRow]) -> Vec<(f64, f64, f64)> {
    let mut out: Vec<(f64, f64, f64)> = Vec::new();
    for r in rows.iter().filter(|r| r.sparsity >= 0.4) {
        match out.last_mut() {
            Some(last) if (last.0 - r.sparsity).abs() < 1e-12 => last.2 = r.accuracy,
            _ => out.push((r.sparsity, r.accuracy, r.accuracy)),
        }
    }
    out
}

fn desk_experiment() -> Verdict {
    let start = Instant::now();
    let base = ExperimentConfig::preset("five-by-ten").unwrap();
    let with = |alg: Algorithm, contaminated: bool| {
        let mut cfg = base.clone();
        cfg.algorithm = alg;
        if contaminated {
            cfg.contamination = vec![
                NodeContamination {
                    node: 3,
                    kind: Contamination::Noisy { sigma: 1.0 },
                },
                NodeContamination {
                    node: 7,
                    kind: Contamination::ShuffledLabels,
                },
            ];
        }
        run(&cfg).unwrap()
    };
    let fedavg_run = with(Algorithm::Fedavg, false);
    let mpfl_clean = with(Algorithm::Mpfl, false);
    let pfl_clean = with(Algorithm::PruningFl, false);
    let mpfl_dirty = with(Algorithm::Mpfl, true);
    let pfl_dirty = with(Algorithm::PruningFl, true);
    let elapsed = start.elapsed();

    let gap = fedavg_run.final_row().accuracy - mpfl_clean.final_row().accuracy;
    let a = gap <= 0.03;

    let m = levels(&mpfl_dirty.rows);
    let p = levels(&pfl_dirty.rows);
    let mut b = !p.is_empty() && m.len() == p.len();
    let mut curve = Vec::new();
    for (&(sm, m_first, m_last), &(sp, p_first, p_last)) in m.iter().zip(&p) {
        b &= (sm - sp).abs() < 1e-12 && m_first >= p_first && m_last >= p_last;
        curve.push(format!(
            "s={sm:.3}: mpfl {m_first:.4}/{m_last:.4} vs pruning-fl {p_first:.4}/{p_last:.4}"
        ));
    }

    let mask_bits = mpfl_clean.final_row().cumulative_mask_bits;
    let weight_bits = pfl_clean.final_row().cumulative_weight_bits;
    let c = (mask_bits as f64) < 0.01 * weight_bits as f64;

    Verdict::new(
        a && b && c && elapsed < Duration::from_secs(300),
        format!(
            "(a) {} fedavg {:.4} mpfl {:.4} at sparsity {:.3}; (b) {} {}; (c) {} mask {mask_bits} vs weights {weight_bits} bits; {elapsed:.2?}",
            if a { "ok" } else { "FAIL" },
            fedavg_run.final_row().accuracy,
            mpfl_clean.final_row().accuracy,
            mpfl_clean.final_row().sparsity,
            if b { "ok" } else { "FAIL" },
            curve.join(", "),
            if c { "ok" } else { "FAIL" },
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = 0;
    let mut differing = Vec::new();
    let cases: [&[&str]; 5] = [
        &["--preset", "quick"],
        &["--preset", "quick", "--algorithm", "pruning-fl", "--noisy", "1"],
        &["--preset", "quick", "--algorithm", "lth"],
        &["--preset", "quick", "--algorithm", "fedavg", "--shuffled", "2"],
        &["--preset", "five-by-ten", "--noisy", "3", "--shuffled", "7"],
    ];
    for (i, args) in cases.iter().enumerate() {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let path = dir.path().join(format!("{i}-{rep}.csv"));
            stdout_of(bin().arg("run").args(*args).arg("-o").arg(&path));
            outputs.push(std::fs::read(&path).unwrap());
            runs += 1;
        }
        if outputs[0] != outputs[1] || outputs[0].is_empty() {
            differing.push(args.join(" "));
        }
    }
    Verdict::new(
        differing.is_empty(),
        format!("{runs} runs, differing configs: {differing:?}"),
    )
}

fn main() {
    let criteria: [Check; 10] = [
        ("bandwidth arithmetic", bandwidth_arithmetic),
        ("centralized upload accounting", lth_upload_accounting),
        ("triangle inequality", triangle_inequality),
        ("non-linearity witness", nonlinearity_witness),
        ("gradient correctness", gradient_check),
        ("codec fuzz", codec_fuzz),
        ("consensus constraints", consensus_constraints),
        ("robustness to one adversary", robustness),
        ("desk-scale experiment", desk_experiment),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {}: {} ({})",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            name,
            v.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
