use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{lth_central, pruning_fl_round, LthConfig};
use crate::data::{
    contaminate_labels, contaminate_noise, load, partition_iid, Contamination, Dataset, LabelPermutation, Shard,
};
use crate::error::Result;
use crate::federation::{Federation, LocalParams, Node, ParameterServer, SessionSettings};
use crate::mask::PruneMask;
use crate::nn::{ArchSpec, Batch, Model, TrainConfig};
use crate::scalar::{Precision, Scalar};
use crate::wire::bits::RawUpload;
use crate::wire::{BandwidthLedger, Channel, TcpTransport};

use super::config::{Algorithm, ExperimentConfig, ScalarKind, TransportConfig};
use super::metrics::{MetricsRow, RoundBits, RoundPhase};

const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_PARTITION: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_CENTRAL: u64 = 5;
const STREAM_NODE: u64 = 1 << 16;
const STREAM_CONTAMINATION: u64 = 2 << 16;

/// Independent seed for one consumer of randomness, derived from the single
/// experiment seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub label: String,
    pub algorithm: Algorithm,
    pub rows: Vec<MetricsRow>,
    pub model: Model<f64>,
    pub mask: PruneMask,
    pub precision: Precision,
    pub ledger: BandwidthLedger,
    /// Nodes whose local training diverged at some point.
    pub flagged_nodes: Vec<usize>,
}

impl RunOutput {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("every run emits at least one row")
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.scalar {
        ScalarKind::F32 => run_typed::<f32>(cfg),
        ScalarKind::F64 => run_typed::<f64>(cfg),
    }
}

struct Setup<T: Scalar> {
    w0: Model<T>,
    shards: Vec<Shard>,
    test: Batch<T>,
}

fn prepare<T: Scalar>(cfg: &ExperimentConfig) -> Result<Setup<T>> {
    let seed = cfg.seed;
    let ds = load(&cfg.data.source, sub_seed(seed, STREAM_DATA))?;
    let (train, test) = ds.split(cfg.data.test_fraction, sub_seed(seed, STREAM_SPLIT))?;
    let mut shards = partition_iid(&train, cfg.nodes, sub_seed(seed, STREAM_PARTITION))?;
    for c in &cfg.contamination {
        let stream = sub_seed(seed, STREAM_CONTAMINATION + c.node as u64);
        let shard = &shards[c.node];
        shards[c.node] = match c.kind {
            Contamination::Clean => shard.clone(),
            Contamination::Noisy { sigma } => contaminate_noise(shard, sigma, stream)?,
            Contamination::ShuffledLabels => {
                let perm =
                    LabelPermutation::random_derangement(train.num_classes, &mut ChaCha8Rng::seed_from_u64(stream));
                contaminate_labels(shard, &perm)?
            }
        };
    }
    let mut dims = vec![train.dim];
    dims.extend(&cfg.arch.hidden);
    dims.push(train.num_classes);
    let arch = ArchSpec::mlp(&dims)?;
    let w0 = Model::init(&arch, &mut ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_INIT)))?;
    Ok(Setup {
        w0,
        shards,
        test: test.batch()?,
    })
}

fn federation<T: Scalar>(cfg: &ExperimentConfig, setup: &Setup<T>) -> Result<Federation<T>> {
    let arch = setup.w0.arch();
    let nodes = setup
        .shards
        .iter()
        .map(|s| {
            Node::new(
                s.node,
                s.data.batch()?,
                Model::zeros(arch)?,
                sub_seed(cfg.seed, STREAM_NODE + s.node as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let server = ParameterServer::new(&setup.w0.mask_layout(), cfg.nodes, cfg.consensus, cfg.pruning.min_keep);
    let channel = match &cfg.transport {
        TransportConfig::Loopback => Channel::loopback(),
        TransportConfig::Tcp { address } => Channel::new(Box::new(TcpTransport::bind(address.as_str(), cfg.nodes)?)),
    }
    .with_headers(cfg.accounting.include_headers);
    let settings = SessionSettings {
        precision: cfg.precision,
        delta_masks: cfg.accounting.delta_masks,
        sparse_weights: cfg.accounting.sparse_weights,
    };
    let params = LocalParams {
        train: cfg.training.local(),
        scoring: cfg.pruning.scoring,
        norm: cfg.pruning.norm,
        min_keep: cfg.pruning.min_keep,
    };
    Federation::new(nodes, server, channel, settings, params)
}

struct Recorder<'a> {
    cfg: &'a ExperimentConfig,
    label: String,
    rows: Vec<MetricsRow>,
}

impl Recorder<'_> {
    fn push(&mut self, ledger: &BandwidthLedger, round: u32, phase: RoundPhase, sparsity: f64, accuracy: f64) {
        log::info!(
            "{} round {round} ({phase:?}): sparsity {sparsity:.4}, accuracy {accuracy:.4}, {} bits so far",
            self.label,
            ledger.total_bits()
        );
        self.rows.push(MetricsRow::new(
            self.cfg.algorithm.name(),
            &self.label,
            self.cfg.nodes,
            round,
            phase,
            sparsity,
            accuracy,
            RoundBits::from_ledger(ledger, round),
        ));
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let setup = prepare::<T>(cfg)?;
    let mut rec = Recorder {
        cfg,
        label: cfg.run_label(),
        rows: Vec::new(),
    };
    let test = &setup.test;
    let (model, mask, ledger, flagged) = match cfg.algorithm {
        Algorithm::Lth => {
            let (model, mask, ledger) = run_lth(cfg, &setup, &mut rec)?;
            (model, mask, ledger, Vec::new())
        }
        algorithm => {
            let mut fed = federation(cfg, &setup)?;
            fed.broadcast_init(&setup.w0)?;
            rec.push(fed.ledger(), 0, RoundPhase::Init, 0.0, setup.w0.accuracy(test)?);
            let fl_rounds = match algorithm {
                Algorithm::Mpfl => {
                    for &inc in &cfg.pruning.schedule {
                        let mask = fed.pruning_round(inc)?;
                        let acc = fed.peek_average()?.accuracy(test)?;
                        rec.push(fed.ledger(), fed.round(), RoundPhase::Pruning, mask.sparsity(), acc);
                    }
                    cfg.training.final_rounds
                }
                Algorithm::PruningFl => {
                    for &inc in &cfg.pruning.schedule {
                        let (model, mask) = pruning_fl_round(&mut fed, inc)?;
                        let acc = model.accuracy(test)?;
                        rec.push(fed.ledger(), fed.round(), RoundPhase::Pruning, mask.sparsity(), acc);
                    }
                    cfg.training.final_rounds
                }
                // same number of training rounds, no pruning
                _ => cfg.pruning.schedule.len() + cfg.training.final_rounds,
            };
            let model = fed.final_fl_phase(fl_rounds, |f, m| {
                let acc = m.accuracy(test)?;
                rec.push(f.ledger(), f.round(), RoundPhase::Fl, f.global_mask().sparsity(), acc);
                Ok(())
            })?;
            let flagged = fed.flagged_nodes();
            (model, fed.global_mask().clone(), fed.ledger().clone(), flagged)
        }
    };
    Ok(RunOutput {
        label: rec.label,
        algorithm: cfg.algorithm,
        rows: rec.rows,
        model: model.cast(),
        mask,
        precision: cfg.precision,
        ledger,
        flagged_nodes: flagged,
    })
}

/// Shards pooled back into one dataset, in node order.
fn pool(shards: &[Shard]) -> Dataset {
    let first = &shards[0].data;
    let mut pooled = Dataset {
        features: Vec::new(),
        dim: first.dim,
        labels: Vec::new(),
        num_classes: first.num_classes,
        provenance: first.provenance.clone(),
    };
    for s in shards {
        pooled.features.extend_from_slice(&s.data.features);
        pooled.labels.extend_from_slice(&s.data.labels);
    }
    pooled
}

fn run_lth<T: Scalar>(
    cfg: &ExperimentConfig,
    setup: &Setup<T>,
    rec: &mut Recorder<'_>,
) -> Result<(Model<T>, PruneMask, BandwidthLedger)> {
    let acct = &cfg.accounting;
    let uploads: Vec<RawUpload> = match acct.raw_upload {
        Some(upload) => vec![upload],
        None => setup
            .shards
            .iter()
            .map(|s| RawUpload {
                samples: s.data.len() as u64,
                values_per_sample: s.data.dim as u64,
                bits_per_value: acct.raw_bits_per_value,
                label_bits: acct.raw_label_bits,
            })
            .collect(),
    };
    let train = cfg.training.local();
    let lth = LthConfig {
        schedule: cfg.pruning.schedule.clone(),
        train,
        final_train: TrainConfig {
            epochs: train.epochs * cfg.training.final_rounds.max(1),
            ..train
        },
        norm: cfg.pruning.norm,
        min_keep: cfg.pruning.min_keep,
        seed: sub_seed(cfg.seed, STREAM_CENTRAL),
    };
    let data = pool(&setup.shards).batch::<T>()?;
    let mut ledger = BandwidthLedger::new();
    let mut trace = vec![(0, RoundPhase::Init, 0.0, setup.w0.accuracy(&setup.test)?)];
    let mut failure = None;
    let (ticket, mask) = lth_central(
        &setup.w0,
        &data,
        &lth,
        &uploads,
        &mut ledger,
        |round, model, mask| match model.accuracy(&setup.test) {
            Ok(acc) => trace.push((round, RoundPhase::Pruning, mask.sparsity(), acc)),
            Err(e) => failure = failure.take().or(Some(e)),
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    let final_round = cfg.pruning.schedule.len() as u32 + 1;
    trace.push((
        final_round,
        RoundPhase::Fl,
        mask.sparsity(),
        ticket.accuracy(&setup.test)?,
    ));
    for (round, phase, sparsity, acc) in trace {
        rec.push(&ledger, round, phase, sparsity, acc);
    }
    Ok((ticket, mask, ledger))
}
