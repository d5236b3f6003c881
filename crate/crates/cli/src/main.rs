use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mpfl::data::{BlobSpec, Contamination, DataSource};
use mpfl::experiment::{
    compare, node_sweep, run, summary_table, write_artifact, write_metrics, Algorithm, ExperimentConfig,
    NodeContamination, ScalarKind, TransportConfig,
};
use mpfl::federation::{ConsensusStrategy, ScoringMode};
use mpfl::wire::bits::{
    arch_terms, bits_to_bytes, bits_to_kib, bits_to_mib, dense_bits, mask_bits, savings, vgg16_sketch_terms, RawUpload,
};
use mpfl::wire::fuzz::run_fuzz;
use mpfl::{ArchSpec, NormOrder, Precision};

#[derive(Parser)]
#[command(name = "mpfl", version, about = "Masked pruning over federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its per-round metrics as CSV.
    Run(RunArgs),
    /// Run several experiments in sequence and merge their metrics.
    Compare(CompareArgs),
    /// Dense-weight versus mask bit counts.
    Bits(BitsArgs),
    /// Fuzz the wire codecs.
    Fuzz(FuzzArgs),
}

#[derive(Args)]
struct Source {
    /// TOML experiment config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Built-in config: quick, five-by-ten, ten-rounds.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Mpfl,
    PruningFl,
    Lth,
    Fedavg,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Mpfl => Algorithm::Mpfl,
            AlgorithmArg::PruningFl => Algorithm::PruningFl,
            AlgorithmArg::Lth => Algorithm::Lth,
            AlgorithmArg::Fedavg => Algorithm::Fedavg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Topk,
    Histogram,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoringArg {
    Weight,
    Gradient,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalarArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Loopback,
    Tcp,
}

/// Flags override the matching config keys.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Wire precision in bits (32 or 64).
    #[arg(long)]
    precision: Option<u32>,
    #[arg(long, value_enum)]
    scalar: Option<ScalarArg>,
    /// Hidden layer widths, e.g. 64,32.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Synthetic data: samples,classes,features.
    #[arg(long, value_delimiter = ',')]
    blobs: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    final_rounds: Option<usize>,
    /// Per-round pruning increments, e.g. 0.1,0.1,0.1; the target becomes their sum.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    scoring: Option<ScoringArg>,
    /// Norm order p (1 or 2).
    #[arg(long)]
    norm: Option<u8>,
    #[arg(long)]
    min_keep: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Agreement threshold for histogram consensus.
    #[arg(long)]
    agreement: Option<f64>,
    /// Add Gaussian feature noise to a node: NODE[:SIGMA], sigma 1 by default.
    #[arg(long)]
    noisy: Vec<String>,
    /// Permute the labels of a node.
    #[arg(long)]
    shuffled: Vec<usize>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    #[arg(long)]
    address: Option<String>,
    /// Charge whole frames instead of message bodies.
    #[arg(long)]
    include_headers: bool,
    #[arg(long)]
    delta_masks: bool,
    /// Send pruned groups' zero weights too.
    #[arg(long)]
    dense_weights: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(a) = self.algorithm {
            cfg.algorithm = a.into();
        }
        if let Some(l) = &self.label {
            cfg.label = Some(l.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.nodes {
            cfg.nodes = n;
        }
        if let Some(b) = self.precision {
            cfg.precision = Precision::try_from(b).map_err(anyhow::Error::msg)?;
        }
        if let Some(s) = self.scalar {
            cfg.scalar = match s {
                ScalarArg::F32 => ScalarKind::F32,
                ScalarArg::F64 => ScalarKind::F64,
            };
        }
        if let Some(h) = &self.hidden {
            cfg.arch.hidden = h.clone();
        }
        if let Some(b) = &self.blobs {
            if b.len() != 3 {
                bail!("--blobs expects SAMPLES,CLASSES,FEATURES");
            }
            cfg.data.source = DataSource::Synthetic(BlobSpec {
                samples: b[0],
                classes: b[1],
                features: b[2],
                center_spread: 1.0,
                noise_std: 1.0,
            });
        }
        let t = &mut cfg.training;
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.final_rounds {
            t.final_rounds = v;
        }
        if let Some(s) = &self.schedule {
            cfg.pruning.schedule = s.clone();
            cfg.pruning.target = s.iter().sum();
        }
        if let Some(s) = self.scoring {
            cfg.pruning.scoring = match s {
                ScoringArg::Weight => ScoringMode::Weight,
                ScoringArg::Gradient => ScoringMode::Gradient,
            };
        }
        if let Some(p) = self.norm {
            cfg.pruning.norm = NormOrder::try_from(p).map_err(anyhow::Error::msg)?;
        }
        if let Some(k) = self.min_keep {
            cfg.pruning.min_keep = k;
        }
        let agreement = self.agreement.or(match cfg.consensus {
            ConsensusStrategy::Histogram { agreement } => Some(agreement),
            ConsensusStrategy::TopK => None,
        });
        match self.strategy {
            Some(StrategyArg::Topk) => cfg.consensus = ConsensusStrategy::TopK,
            Some(StrategyArg::Histogram) => {
                cfg.consensus = ConsensusStrategy::Histogram {
                    agreement: agreement.unwrap_or(0.9),
                }
            }
            None => {
                if let (Some(a), ConsensusStrategy::Histogram { .. }) = (self.agreement, cfg.consensus) {
                    cfg.consensus = ConsensusStrategy::Histogram { agreement: a };
                }
            }
        }
        for spec in &self.noisy {
            let (node, sigma) = spec.split_once(':').unwrap_or((spec, "1"));
            set_contamination(
                cfg,
                node.parse().context("--noisy expects NODE[:SIGMA]")?,
                Contamination::Noisy {
                    sigma: sigma.parse().context("--noisy expects NODE[:SIGMA]")?,
                },
            );
        }
        for &node in &self.shuffled {
            set_contamination(cfg, node, Contamination::ShuffledLabels);
        }
        match (self.transport, &self.address) {
            (Some(TransportArg::Loopback), _) => cfg.transport = TransportConfig::Loopback,
            (Some(TransportArg::Tcp), addr) => {
                cfg.transport = TransportConfig::Tcp {
                    address: addr.clone().unwrap_or_else(|| "127.0.0.1:0".into()),
                }
            }
            (None, Some(addr)) => {
                if let TransportConfig::Tcp { address } = &mut cfg.transport {
                    *address = addr.clone();
                } else {
                    bail!("--address needs a tcp transport");
                }
            }
            (None, None) => {}
        }
        if self.include_headers {
            cfg.accounting.include_headers = true;
        }
        if self.delta_masks {
            cfg.accounting.delta_masks = true;
        }
        if self.dense_weights {
            cfg.accounting.sparse_weights = false;
        }
        Ok(())
    }
}

fn set_contamination(cfg: &mut ExperimentConfig, node: usize, kind: Contamination) {
    cfg.contamination.retain(|c| c.node != node);
    cfg.contamination.push(NodeContamination { node, kind });
}

fn load_config(source: &Source) -> Result<ExperimentConfig> {
    match (&source.config, &source.preset) {
        (Some(path), _) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display())),
        (None, Some(name)) => Ok(ExperimentConfig::preset(name)?),
        (None, None) => bail!("give --config FILE or --preset NAME"),
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    overrides: Overrides,
    /// Metrics CSV path (default: stdout).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Write the final masked model here.
    #[arg(long)]
    artifact: Option<PathBuf>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.source)?;
    args.overrides.apply(&mut cfg)?;
    cfg.validate()?;
    if args.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let result = run(&cfg)?;
    let mut out = output(&args.out)?;
    write_metrics(&result.rows, &mut out)?;
    out.flush()?;
    if let Some(path) = &args.artifact {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_artifact(&result.model, &result.mask, result.precision, BufWriter::new(file))?;
    }
    let last = result.final_row();
    eprintln!(
        "{}: sparsity {:.4}, accuracy {:.4}, {} bits ({:.4} MiB)",
        result.label,
        last.sparsity,
        last.accuracy,
        last.cumulative_bits,
        bits_to_mib(last.cumulative_bits)
    );
    if !result.flagged_nodes.is_empty() {
        eprintln!("diverged nodes: {:?}", result.flagged_nodes);
    }
    Ok(())
}

#[derive(Args)]
struct CompareArgs {
    /// Config files to run in order.
    #[arg(long, short)]
    config: Vec<PathBuf>,
    /// Base preset when no config files are given.
    #[arg(long)]
    preset: Option<String>,
    /// Algorithms to run from the single base config.
    #[arg(long, value_enum, value_delimiter = ',')]
    algorithms: Vec<AlgorithmArg>,
    /// Repeat every run for each node count.
    #[arg(long, value_delimiter = ',')]
    sweep_nodes: Vec<usize>,
    #[command(flatten)]
    overrides: Overrides,
    /// Combined metrics CSV path (default: stdout).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn cmd_compare(args: &CompareArgs) -> Result<bool> {
    let mut bases = Vec::new();
    for path in &args.config {
        bases.push(ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?);
    }
    if bases.is_empty() {
        let name = args.preset.as_deref().unwrap_or("quick");
        bases.push(ExperimentConfig::preset(name)?);
    }
    let mut configs = Vec::new();
    for mut base in bases {
        args.overrides.apply(&mut base)?;
        let variants: Vec<ExperimentConfig> = if args.algorithms.is_empty() {
            vec![base]
        } else {
            args.algorithms
                .iter()
                .map(|&a| {
                    let mut c = base.clone();
                    c.algorithm = a.into();
                    c.label = None;
                    c
                })
                .collect()
        };
        for v in variants {
            if args.sweep_nodes.is_empty() {
                configs.push(v);
            } else {
                configs.extend(node_sweep(&v, &args.sweep_nodes));
            }
        }
    }
    for c in &configs {
        c.validate().with_context(|| format!("config for {}", c.run_label()))?;
    }
    let result = compare(&configs);
    let mut out = output(&args.out)?;
    write_metrics(&result.rows, &mut out)?;
    out.flush()?;
    eprint!("{}", summary_table(&result.summaries));
    for (label, err) in &result.failures {
        eprintln!("run {label} failed: {err}");
    }
    Ok(result.failures.is_empty())
}

#[derive(Clone, Copy, ValueEnum)]
enum BitsPreset {
    Vgg16,
}

#[derive(Args)]
struct BitsArgs {
    /// Published term list.
    #[arg(long, value_enum, conflicts_with = "arch")]
    preset: Option<BitsPreset>,
    /// Layer widths of a dense network, e.g. 784,300,100,10.
    #[arg(long, value_delimiter = ',')]
    arch: Option<Vec<usize>>,
    /// Bits per transmitted weight.
    #[arg(long, default_value_t = 64)]
    precision: u32,
    /// Also price a raw data upload: SAMPLES,VALUES_PER_SAMPLE,BITS_PER_VALUE[,LABEL_BITS].
    #[arg(long, value_delimiter = ',')]
    raw_upload: Option<Vec<u64>>,
}

fn cmd_bits(args: &BitsArgs) -> Result<()> {
    if args.precision == 0 {
        bail!("--precision must be positive");
    }
    // with no term source at all, the VGG sketch is the default
    let terms = match (&args.arch, args.preset) {
        (Some(widths), _) => arch_terms(&ArchSpec::mlp(widths)?),
        (None, Some(BitsPreset::Vgg16)) => vgg16_sketch_terms(),
        (None, None) if args.raw_upload.is_none() => vgg16_sketch_terms(),
        (None, None) => Vec::new(),
    };
    if !terms.is_empty() {
        let dense = dense_bits(&terms, args.precision);
        let mask = mask_bits(&terms);
        println!("dense_bits: {dense}");
        println!("mask_bits: {mask}");
        println!("savings: {:.3}%", 100.0 * savings(&terms, args.precision));
    }
    if let Some(v) = &args.raw_upload {
        if !(3..=4).contains(&v.len()) {
            bail!("--raw-upload expects SAMPLES,VALUES_PER_SAMPLE,BITS_PER_VALUE[,LABEL_BITS]");
        }
        let upload = RawUpload {
            samples: v[0],
            values_per_sample: v[1],
            bits_per_value: v[2],
            label_bits: v.get(3).copied().unwrap_or(0),
        };
        let bits = upload.bits();
        println!("raw_upload_bits: {bits}");
        println!("raw_upload_bytes: {}", bits_to_bytes(bits));
        println!("raw_upload_kib: {:.2}", bits_to_kib(bits));
        println!("raw_upload_mib: {:.2}", bits_to_mib(bits));
    }
    Ok(())
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long, default_value_t = 10_000)]
    cases: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn cmd_fuzz(args: &FuzzArgs) -> bool {
    let report = run_fuzz(args.cases, args.seed);
    println!("round_trips: {}", report.round_trips);
    println!("round_trip_failures: {}", report.round_trip_failures);
    println!("corruptions: {}", report.corruptions);
    println!("corrupt_rejected: {}", report.corrupt_rejected);
    println!("corrupt_accepted: {}", report.corrupt_accepted);
    println!("panics: {}", report.panics);
    for f in &report.failures {
        eprintln!("{f}");
    }
    report.is_clean()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // codec fuzzing reports panics itself
    if matches!(std::env::args().nth(1).as_deref(), Some("fuzz")) {
        std::panic::set_hook(Box::new(|_| {}));
    }
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a).map(|()| true),
        Command::Compare(a) => cmd_compare(a),
        Command::Bits(a) => cmd_bits(a).map(|()| true),
        Command::Fuzz(a) => Ok(cmd_fuzz(a)),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
