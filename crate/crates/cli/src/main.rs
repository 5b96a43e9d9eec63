//! `spoof`: train victims, run fooling attacks, retrain, aggregate, export.
//!
//! Exit codes: 0 success, 1 configuration error, 2 oracle error, 3 partial
//! failure (some seed was cut short by the oracle).

use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use spoof_core::encodings::EncodingKind;
use spoof_core::experiment::{
    aggregate_run_dir, collect_fooling_images, export_heatmap_csv, resolve_spec, run_experiment, ExperimentConfig,
    OracleConfig, RunOutcome,
};
use spoof_core::metrics::{write_aggregate_csv, AsrPolicy, Statistic};
use spoof_core::oracle::network::{Network, NetworkSpec};
use spoof_core::oracle::wire::{serve_connection, serve_tcp, UniformClassifier};
use spoof_core::oracle::weights::Weights;
use spoof_core::oracle::{BuiltinOracle, Classifier};
use spoof_core::retrain::idx::{default_mnist_dir, load_mnist, MnistPart};
use spoof_core::retrain::{
    accuracy, build_fooling_class_dataset, fine_tune_final_layer, train_dense, LabeledDataset, Split, TrainConfig,
    TrainableScope,
};
use spoof_core::{Error, InitMode};

#[derive(Parser)]
#[command(name = "spoof", version, about = "Black-box fooling attacks against image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a builtin victim on MNIST.
    Train(TrainArgs),
    /// Run SPOOF (greedy single-pixel hill climbing) over seeds.
    Attack(AttackArgs),
    /// Run Direct-Fool or CPPN-Fool (MAP-Elites) over seeds.
    Evolve(EvolveArgs),
    /// Fine-tune a victim's head with an extra class made of fooling images.
    Retrain(RetrainArgs),
    /// Recompute the aggregate table from run directories.
    Metrics(MetricsArgs),
    /// Export a long-format heatmap CSV from a run's trajectories.
    Export(ExportArgs),
    /// Serve a classifier over the wire protocol (TCP or stdio).
    ServeStub(ServeArgs),
}

#[derive(Args)]
struct MnistArgs {
    /// Directory holding the MNIST IDX files (optionally .gz).
    #[arg(long, env = "MNIST_DIR")]
    mnist_dir: Option<PathBuf>,
    /// Use only the first N training images.
    #[arg(long)]
    train_limit: Option<usize>,
}

impl MnistArgs {
    fn load(&self) -> Result<(LabeledDataset, LabeledDataset), Error> {
        let dir = self.mnist_dir.clone().unwrap_or_else(default_mnist_dir);
        let (ti, tl) = load_mnist(&dir, MnistPart::Train, self.train_limit)?;
        let (vi, vl) = load_mnist(&dir, MnistPart::Test, None)?;
        Ok((LabeledDataset::new(ti, tl, Split::Train)?, LabeledDataset::new(vi, vl, Split::Test)?))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// `mnist_mlp`, `lenet5`, or a network JSON file.
    #[arg(long, default_value = "mnist_mlp")]
    arch: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    mnist: MnistArgs,
    /// Receives spec.json, weights.spwt and history.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    /// Network for the builtin oracle: `mnist_mlp`, `lenet5` or a JSON file.
    #[arg(long, default_value = "mnist_mlp")]
    spec: String,
    /// SPWT weights for the builtin oracle.
    #[arg(long, conflicts_with_all = ["remote", "command"])]
    weights: Option<PathBuf>,
    /// host:port of a wire-protocol server.
    #[arg(long, conflicts_with = "command")]
    remote: Option<String>,
    #[arg(long, default_value_t = spoof_core::experiment::DEFAULT_REMOTE_TIMEOUT_MS)]
    timeout_ms: u64,
    /// Program speaking the wire protocol on stdio.
    #[arg(long)]
    command: Option<String>,
    /// Argument for --command (repeatable).
    #[arg(long = "command-arg", allow_hyphen_values = true)]
    command_args: Vec<String>,
}

impl OracleArgs {
    fn config(&self) -> Result<OracleConfig, Error> {
        match (&self.weights, &self.remote, &self.command) {
            (Some(w), None, None) => Ok(OracleConfig::Builtin { spec: self.spec.clone(), weights: w.clone() }),
            (None, Some(a), None) => Ok(OracleConfig::Remote { address: a.clone(), timeout_ms: self.timeout_ms }),
            (None, None, Some(p)) => Ok(OracleConfig::Command { program: p.clone(), args: self.command_args.clone() }),
            _ => Err(Error::Configuration("choose exactly one of --weights, --remote, --command".into())),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; replaces every other run flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    oracle: OracleArgs,
    /// Seeds, e.g. `0,1,2` or `0..5` (end exclusive).
    #[arg(long, default_value = "0..5", value_parser = parse_ids)]
    seeds: IdList,
    /// Output directory (relative paths resolve against $SPOOF_OUTPUT_ROOT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Count a class as fooled only at or above this confidence.
    #[arg(long)]
    asr_threshold: Option<f64>,
    /// Target classes, e.g. `0..10`; all classes by default.
    #[arg(long, value_parser = parse_ids)]
    targets: Option<IdList>,
    #[arg(long)]
    classifier_id: Option<String>,
    #[arg(long)]
    parallel_seeds: bool,
    #[arg(long)]
    batch_capacity: Option<usize>,
    /// Print the resulting config as JSON and exit without running.
    #[arg(long)]
    dry_run: bool,
}

impl RunArgs {
    fn apply(&self, mut cfg: ExperimentConfig) -> ExperimentConfig {
        cfg.asr = self.asr_threshold.map_or_else(AsrPolicy::top1, AsrPolicy::with_threshold);
        cfg.targets = self.targets.as_ref().map(|t| t.0.iter().map(|&c| c as usize).collect());
        cfg.classifier_id = self.classifier_id.clone();
        cfg.parallel_seeds = self.parallel_seeds;
        cfg.batch_capacity = self.batch_capacity;
        cfg
    }

    fn out(&self) -> Result<PathBuf, Error> {
        self.out.clone().ok_or_else(|| Error::Configuration("--out is required without --config".into()))
    }
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Proposal queries per target class.
    #[arg(long, default_value_t = 500)]
    budget: u64,
    #[arg(long, default_value = "black")]
    init: InitMode,
    #[arg(long, default_value_t = spoof_core::spoof::DEFAULT_CHECKPOINT_STRIDE)]
    checkpoint_stride: u64,
    /// Stop a class once its confidence reaches this value.
    #[arg(long)]
    early_stop: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncodingArg {
    Direct,
    Cppn,
}

#[derive(Args)]
struct EvolveArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value = "cppn")]
    encoding: EncodingArg,
    #[arg(long, default_value_t = 400)]
    population: usize,
    /// Generation count, generation 0 included.
    #[arg(long, default_value_t = 5000)]
    generations: u64,
    /// Direct encoding: initial per-pixel resample probability.
    #[arg(long)]
    direct_rate: Option<f64>,
    /// Direct encoding: generations between rate halvings.
    #[arg(long)]
    halving_period: Option<u64>,
}

#[derive(Args)]
struct RetrainArgs {
    /// Network of the victim (`mnist_mlp`, `lenet5` or a JSON file).
    #[arg(long, default_value = "mnist_mlp")]
    spec: String,
    #[arg(long)]
    weights: PathBuf,
    /// Attack run directory whose final images form the new class (repeatable).
    #[arg(long = "fooling-run", required = true)]
    fooling_runs: Vec<PathBuf>,
    #[arg(long, default_value_t = 120)]
    per_class: usize,
    /// Fraction of each class's fooling images used for training.
    #[arg(long, default_value_t = 5.0 / 6.0)]
    split: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    mnist: MnistArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatArg {
    Median,
    Mean,
}

#[derive(Args)]
struct MetricsArgs {
    /// Run directory (repeatable); one CSV row each.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    asr_threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "median")]
    stat: StatArg,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Seed to export; the lowest seed by default.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Address to listen on, e.g. 127.0.0.1:0; the bound address is printed.
    #[arg(long, conflicts_with = "stdio")]
    listen: Option<String>,
    /// Serve a single session on stdin/stdout.
    #[arg(long)]
    stdio: bool,
    /// Uniform classifier: class count.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Uniform classifier: input shape `C,H,W`.
    #[arg(long, default_value = "1,28,28", value_parser = parse_shape)]
    shape: [usize; 3],
    /// Serve this network instead of the uniform stub (needs --weights).
    #[arg(long, requires = "weights")]
    spec: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    max_batch: usize,
}

/// Comma-separated ids and `a..b` ranges.
#[derive(Clone, Debug)]
struct IdList(Vec<u64>);

fn parse_ids(s: &str) -> Result<IdList, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|e| format!("{part}: {e}"))?, b.parse().map_err(|e| format!("{part}: {e}"))?);
                out.extend(a..b);
            }
            None => out.push(part.parse().map_err(|e| format!("{part}: {e}"))?),
        }
    }
    Ok(IdList(out))
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s.split(',').map(|d| d.trim().parse().map_err(|e| format!("{d}: {e}"))).collect::<Result<_, _>>()?;
    dims.try_into().map_err(|_| "shape needs three comma-separated dimensions".to_string())
}

enum Status {
    Done,
    Partial,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Evolve(a) => evolve(a),
        Command::Retrain(a) => retrain(a),
        Command::Metrics(a) => metrics(a),
        Command::Export(a) => export(a),
        Command::ServeStub(a) => serve(a),
    };
    match result {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(3),
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_oracle_failure() { 2 } else { 1 })
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<Status, Error> {
    let spec = resolve_spec(&a.arch)?;
    let (train, test) = a.mnist.load()?;
    let cfg = TrainConfig { learning_rate: a.lr, epochs: a.epochs, batch_size: a.batch_size, seed: a.seed, scope: TrainableScope::AllDense };
    let out = train_dense(&spec, &spec.init_weights(a.seed), &train, Some(&test), &cfg)?;
    for h in &out.history {
        eprintln!("epoch {:>2}  loss {:.4}  train {:.4}  test {:.4}", h.epoch, h.train_loss, h.train_accuracy, h.val_accuracy.unwrap_or(f64::NAN));
    }
    let network = Network::new(spec.clone(), out.weights.clone())?;
    let test_accuracy = accuracy(&network, &test)?;
    fs::create_dir_all(&a.out_dir)?;
    write_json(&a.out_dir.join("spec.json"), &spec)?;
    out.weights.save(a.out_dir.join("weights.spwt"))?;
    write_json(&a.out_dir.join("history.json"), &json!({ "config": cfg, "epochs": out.history, "test_accuracy": test_accuracy }))?;
    println!("test accuracy {test_accuracy:.4}; wrote {}", a.out_dir.display());
    Ok(Status::Done)
}

fn run_config(run: &RunArgs, build: impl FnOnce(OracleConfig, PathBuf) -> ExperimentConfig) -> Result<Status, Error> {
    let cfg = match &run.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let cfg = run.apply(build(run.oracle.config()?, run.out()?));
            cfg.validate()?;
            cfg
        }
    };
    if run.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(Status::Done);
    }
    report(run_experiment(&cfg)?)
}

fn report(outcome: RunOutcome) -> Result<Status, Error> {
    if let Some(agg) = &outcome.aggregate {
        write_aggregate_csv(std::slice::from_ref(agg), Statistic::Median, io::stdout().lock())?;
    }
    eprintln!("wrote {}", outcome.dir.display());
    if outcome.is_partial() {
        eprintln!("seeds cut short by oracle failures: {:?}", outcome.partial_seeds);
        return Ok(Status::Partial);
    }
    Ok(Status::Done)
}

fn attack(a: AttackArgs) -> Result<Status, Error> {
    run_config(&a.run, |oracle, out| ExperimentConfig {
        init: a.init,
        checkpoint_stride: a.checkpoint_stride,
        early_stop_confidence: a.early_stop,
        ..ExperimentConfig::spoof(oracle, a.budget, a.run.seeds.0.clone(), out)
    })
}

fn evolve(a: EvolveArgs) -> Result<Status, Error> {
    let encoding = match a.encoding {
        EncodingArg::Direct => EncodingKind::Direct,
        EncodingArg::Cppn => EncodingKind::Cppn,
    };
    run_config(&a.run, |oracle, out| ExperimentConfig {
        direct_mutation_rate: a.direct_rate,
        direct_halving_period: a.halving_period,
        ..ExperimentConfig::evolution(encoding, oracle, a.population, a.generations, a.run.seeds.0.clone(), out)
    })
}

fn retrain(a: RetrainArgs) -> Result<Status, Error> {
    let spec = resolve_spec(&a.spec)?;
    let weights = Weights::load(&a.weights)?;
    let network = Network::new(spec.clone(), weights.clone())?;
    let n = network.num_classes();
    let (train, test) = a.mnist.load()?;
    let baseline = accuracy(&network, &test)?;
    let fooling = collect_fooling_images(&a.fooling_runs)?;
    let (fool_train, fool_val) = build_fooling_class_dataset(&fooling, n, a.per_class, a.split)?;
    let val = test.concat(fool_val.clone())?;
    let cfg = TrainConfig { learning_rate: a.lr, epochs: a.epochs, batch_size: a.batch_size, seed: a.seed, scope: TrainableScope::FinalLayer };
    let out = fine_tune_final_layer(&spec, &weights, &train.concat(fool_train)?, Some(&val), &cfg)?;
    for h in &out.history {
        eprintln!(
            "epoch {:>2}  loss {:.4}  val {:.4}  original classes {:.4}",
            h.epoch,
            h.train_loss,
            h.val_accuracy.unwrap_or(f64::NAN),
            h.original_class_val_accuracy.unwrap_or(f64::NAN)
        );
    }
    let retrained = Network::new(out.spec.clone(), out.weights.clone())?;
    let fooling_recall = if fool_val.is_empty() { None } else { Some(accuracy(&retrained, &fool_val)?) };
    fs::create_dir_all(&a.out_dir)?;
    write_json(&a.out_dir.join("spec.json"), &out.spec)?;
    out.weights.save(a.out_dir.join("weights.spwt"))?;
    write_json(
        &a.out_dir.join("history.json"),
        &json!({
            "config": cfg,
            "baseline_original_class_accuracy": baseline,
            "fooling_train_images": fooling.len().min(a.per_class * n),
            "epochs": out.history,
            "fooling_class_val_recall": fooling_recall,
        }),
    )?;
    println!(
        "baseline {baseline:.4}; final original-class accuracy {:.4}; wrote {}",
        out.history.last().and_then(|h| h.original_class_val_accuracy).unwrap_or(f64::NAN),
        a.out_dir.display()
    );
    Ok(Status::Done)
}

fn metrics(a: MetricsArgs) -> Result<Status, Error> {
    let policy = a.asr_threshold.map_or_else(AsrPolicy::top1, AsrPolicy::with_threshold);
    let rows = a.runs.iter().map(|r| aggregate_run_dir(r, policy)).collect::<Result<Vec<_>, _>>()?;
    let stat = match a.stat {
        StatArg::Median => Statistic::Median,
        StatArg::Mean => Statistic::Mean,
    };
    match &a.out {
        Some(path) => write_aggregate_csv(&rows, stat, fs::File::create(path)?)?,
        None => write_aggregate_csv(&rows, stat, io::stdout().lock())?,
    }
    Ok(Status::Done)
}

fn export(a: ExportArgs) -> Result<Status, Error> {
    let rows = match &a.out {
        Some(path) => export_heatmap_csv(&a.run, a.seed, fs::File::create(path)?)?,
        None => export_heatmap_csv(&a.run, a.seed, io::stdout().lock())?,
    };
    eprintln!("{rows} rows");
    Ok(Status::Done)
}

fn serve(a: ServeArgs) -> Result<Status, Error> {
    let classifier: Arc<dyn Classifier> = match (&a.spec, &a.weights) {
        (Some(spec), Some(w)) => Arc::new(BuiltinOracle::load(resolve_spec(spec)?, w)?),
        (None, Some(w)) => Arc::new(BuiltinOracle::load(NetworkSpec::mnist_mlp(), w)?),
        _ => Arc::new(UniformClassifier { num_classes: a.classes, input_shape: a.shape }),
    };
    if a.stdio {
        let stdin = io::stdin();
        serve_connection(classifier.as_ref(), BufReader::new(stdin.lock()), io::stdout().lock(), a.max_batch)?;
        return Ok(Status::Done);
    }
    let addr = a.listen.as_deref().unwrap_or("127.0.0.1:0");
    let listener = TcpListener::bind(addr).map_err(|e| Error::Configuration(format!("bind {addr}: {e}")))?;
    println!("listening on {}", listener.local_addr()?);
    io::stdout().flush()?;
    serve_tcp(listener, classifier, a.max_batch)?;
    Ok(Status::Done)
}
