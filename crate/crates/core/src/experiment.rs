//! Experiment runs: one attack, one oracle, several seeds, one directory.
//!
//! ```text
//! <output_dir>/config.json
//! <output_dir>/seed_<k>/records.json      RunRecord
//! <output_dir>/seed_<k>/class_<c>.png     final image per target
//! <output_dir>/seed_<k>/trajectory.csv
//! <output_dir>/seed_<k>/timing.json       wall-clock seconds
//! <output_dir>/seed_<k>/archive.json      evolutionary attacks only
//! <output_dir>/aggregate.csv
//! <output_dir>/aggregate.json
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::encodings::{EncodingKind, MutationParams};
use crate::error::{Error, Result};
use crate::image::{Image, InitMode};
use crate::mapelites::{evolve, replay_elite, write_trajectory_csv, EvolutionConfig};
use crate::metrics::{aggregate, write_aggregate_csv, Aggregate, AsrPolicy, AttackKind, ClassRecord, RunRecord, Statistic};
use crate::oracle::network::NetworkSpec;
use crate::oracle::wire::RemoteOracle;
use crate::oracle::{BuiltinOracle, OracleHandle};
use crate::spoof::{spoof_batch, AttackConfig, DEFAULT_CHECKPOINT_STRIDE};

pub const SCHEMA_VERSION: u32 = 1;
/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "SPOOF_OUTPUT_ROOT";
pub const DEFAULT_REMOTE_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleConfig {
    /// `spec` is `mnist_mlp`, `lenet5` or a path to a network JSON file.
    Builtin { spec: String, weights: PathBuf },
    /// Wire-protocol server over TCP.
    Remote {
        address: String,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
    },
    /// Wire-protocol server spawned as a child process on stdio.
    Command {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

fn default_timeout() -> u64 {
    DEFAULT_REMOTE_TIMEOUT_MS
}

pub fn resolve_spec(spec: &str) -> Result<NetworkSpec> {
    match spec {
        "mnist_mlp" | "mlp" => Ok(NetworkSpec::mnist_mlp()),
        "lenet5" | "lenet" => Ok(NetworkSpec::lenet5()),
        path => {
            let bytes = fs::read(path).map_err(|e| Error::Configuration(format!("network spec {path}: {e}")))?;
            let spec: NetworkSpec = serde_json::from_slice(&bytes)?;
            spec.validate()?;
            Ok(spec)
        }
    }
}

impl OracleConfig {
    pub fn open(&self) -> Result<OracleHandle> {
        Ok(match self {
            OracleConfig::Builtin { spec, weights } => {
                let spec = resolve_spec(spec)?;
                let oracle = BuiltinOracle::load(spec, weights)
                    .map_err(|e| Error::Configuration(format!("weights {}: {e}", weights.display())))?;
                OracleHandle::new(oracle)
            }
            OracleConfig::Remote { address, timeout_ms } => {
                OracleHandle::new(RemoteOracle::connect(address, Duration::from_millis(*timeout_ms))?)
            }
            OracleConfig::Command { program, args } => OracleHandle::new(RemoteOracle::spawn(program, args)?),
        })
    }

    /// Stable identifier written into run records.
    pub fn default_id(&self) -> String {
        match self {
            OracleConfig::Builtin { spec, .. } => match spec.as_str() {
                "mlp" => "mnist_mlp".into(),
                "lenet" => "lenet5".into(),
                s => Path::new(s).file_stem().map_or(s.to_string(), |f| f.to_string_lossy().into_owned()),
            },
            OracleConfig::Remote { address, .. } => format!("remote:{address}"),
            OracleConfig::Command { program, .. } => format!("command:{program}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub attack: AttackKind,
    pub oracle: OracleConfig,
    #[serde(default)]
    pub classifier_id: Option<String>,
    /// Per-target proposal budget `T` (spoof).
    #[serde(default)]
    pub budget: Option<u64>,
    /// Evolutionary attacks: population size and generation count.
    #[serde(default)]
    pub population_size: Option<usize>,
    #[serde(default)]
    pub generations: Option<u64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub init: InitMode,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub asr: AsrPolicy,
    /// Target classes; all oracle classes when absent.
    #[serde(default)]
    pub targets: Option<Vec<usize>>,
    #[serde(default = "default_stride")]
    pub checkpoint_stride: u64,
    #[serde(default)]
    pub early_stop_confidence: Option<f32>,
    #[serde(default)]
    pub mutation: MutationParams,
    #[serde(default)]
    pub direct_mutation_rate: Option<f64>,
    #[serde(default)]
    pub direct_halving_period: Option<u64>,
    #[serde(default)]
    pub parallel_seeds: bool,
    #[serde(default)]
    pub batch_capacity: Option<usize>,
}

fn default_stride() -> u64 {
    DEFAULT_CHECKPOINT_STRIDE
}

impl ExperimentConfig {
    pub fn spoof(oracle: OracleConfig, budget: u64, seeds: Vec<u64>, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            attack: AttackKind::Spoof,
            oracle,
            classifier_id: None,
            budget: Some(budget),
            population_size: None,
            generations: None,
            seeds,
            init: InitMode::Black,
            output_dir: output_dir.into(),
            asr: AsrPolicy::top1(),
            targets: None,
            checkpoint_stride: DEFAULT_CHECKPOINT_STRIDE,
            early_stop_confidence: None,
            mutation: MutationParams::default(),
            direct_mutation_rate: None,
            direct_halving_period: None,
            parallel_seeds: false,
            batch_capacity: None,
        }
    }

    pub fn evolution(
        encoding: EncodingKind,
        oracle: OracleConfig,
        population_size: usize,
        generations: u64,
        seeds: Vec<u64>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        ExperimentConfig {
            attack: match encoding {
                EncodingKind::Direct => AttackKind::Direct,
                EncodingKind::Cppn => AttackKind::Cppn,
            },
            budget: None,
            population_size: Some(population_size),
            generations: Some(generations),
            ..ExperimentConfig::spoof(oracle, 0, seeds, output_dir)
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_slice(bytes).map_err(|e| Error::Configuration(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    pub fn classifier(&self) -> String {
        self.classifier_id.clone().unwrap_or_else(|| self.oracle.default_id())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return bad(format!("seed {dup} listed twice"));
        }
        if self.checkpoint_stride == 0 {
            return bad("checkpoint_stride must be at least 1".into());
        }
        if self.batch_capacity == Some(0) {
            return bad("batch_capacity must be at least 1".into());
        }
        if let Some(t) = &self.targets {
            let mut seen = HashSet::new();
            if t.is_empty() || t.iter().any(|c| !seen.insert(*c)) {
                return bad("targets must be a non-empty list of distinct classes".into());
            }
        }
        match self.attack {
            AttackKind::Spoof => match self.budget {
                Some(b) if b >= 1 => {}
                _ => return bad("spoof needs a budget of at least 1 query per target".into()),
            },
            AttackKind::Direct | AttackKind::Cppn => {
                self.evolution_config(0)?.validate().map_err(|e| Error::Configuration(e.to_string()))?;
            }
        }
        self.mutation.validate().map_err(|e| Error::Configuration(e.to_string()))
    }

    fn evolution_config(&self, seed: u64) -> Result<EvolutionConfig> {
        let (Some(pop), Some(gens)) = (self.population_size, self.generations) else {
            return Err(Error::Configuration("evolutionary attacks need population_size and generations".into()));
        };
        let encoding = match self.attack {
            AttackKind::Direct => EncodingKind::Direct,
            AttackKind::Cppn => EncodingKind::Cppn,
            AttackKind::Spoof => return Err(Error::Configuration("spoof is not an evolutionary attack".into())),
        };
        let mut cfg = EvolutionConfig::new(encoding, pop, gens, seed);
        cfg.mutation = self.mutation.clone();
        if let Some(r) = self.direct_mutation_rate {
            cfg.direct_mutation_rate = r;
        }
        if self.direct_halving_period.is_some() {
            cfg.direct_halving_period = self.direct_halving_period;
        }
        Ok(cfg)
    }

    /// `output_dir`, joined onto `$SPOOF_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTiming {
    pub seed: u64,
    pub seconds: f64,
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
    /// Over complete seeds only; `None` when every seed was cut short.
    pub aggregate: Option<Aggregate>,
    pub partial_seeds: Vec<u64>,
}

impl RunOutcome {
    pub fn is_partial(&self) -> bool {
        !self.partial_seeds.is_empty()
    }
}

/// Validates, connects, prepares the directory, then runs every seed.
/// Configuration and connection problems surface before any query is spent.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut oracle = cfg.oracle.open()?;
    if let Some(cap) = cfg.batch_capacity {
        oracle = oracle.with_batch_capacity(cap);
    }
    run_experiment_with(cfg, &oracle)
}

/// Same as [`run_experiment`] against an already open oracle.
pub fn run_experiment_with(cfg: &ExperimentConfig, oracle: &OracleHandle) -> Result<RunOutcome> {
    cfg.validate()?;
    let n = oracle.num_classes();
    let targets: Vec<usize> = cfg.targets.clone().unwrap_or_else(|| (0..n).collect());
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Configuration(format!("target {t} outside the oracle's {n} classes")));
    }
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::Configuration(format!("output dir {}: {e}", dir.display())))?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)
        .map_err(|e| Error::Configuration(format!("output dir {} not writable: {e}", dir.display())))?;

    let run_seed = |seed: u64| -> Result<(RunRecord, f64)> {
        let started = Instant::now();
        let seed_dir = dir.join(format!("seed_{seed}"));
        fs::create_dir_all(&seed_dir)?;
        let record = match cfg.attack {
            AttackKind::Spoof => run_spoof_seed(cfg, oracle, &targets, seed, &seed_dir)?,
            _ => run_evolution_seed(cfg, oracle, &targets, seed, &seed_dir)?,
        };
        let seconds = started.elapsed().as_secs_f64();
        fs::write(seed_dir.join("records.json"), serde_json::to_vec_pretty(&record)?)?;
        fs::write(seed_dir.join("timing.json"), serde_json::to_vec_pretty(&SeedTiming { seed, seconds })?)?;
        Ok((record, seconds))
    };

    let results: Vec<Result<(RunRecord, f64)>> = if cfg.parallel_seeds {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg.seeds.iter().map(|&seed| s.spawn(move || run_seed(seed))).collect();
            handles.into_iter().map(|h| h.join().expect("seed thread panicked")).collect()
        })
    } else {
        cfg.seeds.iter().map(|&seed| run_seed(seed)).collect()
    };
    let mut records = Vec::new();
    let mut seconds = Vec::new();
    for r in results {
        let (rec, secs) = r?;
        records.push(rec);
        seconds.push(secs);
    }

    let partial_seeds: Vec<u64> = records.iter().filter(|r| r.partial).map(|r| r.seed).collect();
    let complete: Vec<RunRecord> = records.iter().filter(|r| !r.partial).cloned().collect();
    let complete_secs: Vec<f64> =
        records.iter().zip(&seconds).filter(|(r, _)| !r.partial).map(|(_, s)| *s).collect();
    let aggregate = if complete.is_empty() {
        None
    } else {
        let agg = aggregate(&complete, cfg.asr)?.with_runtime(&complete_secs);
        let mut csv = Vec::new();
        write_aggregate_csv(std::slice::from_ref(&agg), Statistic::Median, &mut csv)?;
        fs::write(dir.join("aggregate.csv"), csv)?;
        fs::write(dir.join("aggregate.json"), serde_json::to_vec_pretty(&agg)?)?;
        Some(agg)
    };
    Ok(RunOutcome { dir, records, aggregate, partial_seeds })
}

fn run_spoof_seed(
    cfg: &ExperimentConfig,
    oracle: &OracleHandle,
    targets: &[usize],
    seed: u64,
    seed_dir: &Path,
) -> Result<RunRecord> {
    let budget = cfg.budget.expect("validated");
    let configs: Vec<AttackConfig> = targets
        .iter()
        .map(|&t| {
            let c = AttackConfig::new(t, budget, seed)
                .with_init(cfg.init)
                .with_checkpoint_stride(cfg.checkpoint_stride);
            match cfg.early_stop_confidence {
                Some(e) => c.with_early_stop(e),
                None => c,
            }
        })
        .collect();
    let results = spoof_batch(oracle, &configs)?;

    let mut csv = String::from("class,query_index,confidence\n");
    let mut classes = Vec::with_capacity(results.len());
    for r in &results {
        fs::write(seed_dir.join(format!("class_{}.png", r.target_class)), r.final_image.encode_png()?)?;
        for p in &r.trajectory {
            csv.push_str(&format!("{},{},{}\n", r.target_class, p.query_index, p.confidence));
        }
        let mut rec = ClassRecord {
            target: r.target_class,
            final_confidence: r.final_confidence as f64,
            top1: r.final_prediction,
            success: false,
            pcr: r.pcr,
            queries: r.queries_used as f64,
            pixel_changes: Some(r.pixel_changes_accepted),
        };
        rec.success = cfg.asr.is_success(&rec);
        classes.push(rec);
    }
    fs::write(seed_dir.join("trajectory.csv"), csv)?;
    Ok(RunRecord {
        attack: AttackKind::Spoof,
        classifier: cfg.classifier(),
        seed,
        classes,
        partial: results.iter().any(|r| r.is_partial()),
    })
}

fn run_evolution_seed(
    cfg: &ExperimentConfig,
    oracle: &OracleHandle,
    targets: &[usize],
    seed: u64,
    seed_dir: &Path,
) -> Result<RunRecord> {
    let result = evolve(oracle, &cfg.evolution_config(seed)?)?;
    result.archive.save(seed_dir.join("archive.json"))?;
    let keep: HashSet<usize> = targets.iter().copied().collect();
    let points: Vec<_> = result.trajectory.iter().filter(|p| keep.contains(&p.class)).cloned().collect();
    let mut csv = Vec::new();
    write_trajectory_csv(&points, &mut csv)?;
    fs::write(seed_dir.join("trajectory.csv"), csv)?;

    let [c, h, w] = result.archive.shape;
    let blank = Image::zeros(c, h, w)?;
    let per_target = result.queries_used as f64 / targets.len() as f64;
    let mut classes = Vec::with_capacity(targets.len());
    for &t in targets {
        // an empty bin only happens when the oracle failed during generation 0
        let Ok(elite) = result.archive.elite(t) else { continue };
        let image = replay_elite(&result.archive, t)?;
        fs::write(seed_dir.join(format!("class_{t}.png")), image.encode_png()?)?;
        let mut rec = ClassRecord {
            target: t,
            final_confidence: elite.fitness as f64,
            top1: elite.top1,
            success: false,
            pcr: image.changed_location_ratio(&blank)?,
            queries: per_target,
            pixel_changes: None,
        };
        rec.success = cfg.asr.is_success(&rec);
        classes.push(rec);
    }
    Ok(RunRecord {
        attack: cfg.attack,
        classifier: cfg.classifier(),
        seed,
        classes,
        partial: result.is_partial(),
    })
}

/// `seed_<k>` subdirectories of a run, ordered by seed.
pub fn seed_dirs(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = fs::read_dir(run_dir).map_err(|e| Error::NotFound(format!("{}: {e}", run_dir.display())))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(seed) = name.strip_prefix("seed_").and_then(|s| s.parse::<u64>().ok()) {
            if entry.path().is_dir() {
                dirs.push((seed, entry.path()));
            }
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Every seed's RunRecord in a run directory.
pub fn load_records(run_dir: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (_, dir) in seed_dirs(run_dir)? {
        let path = dir.join("records.json");
        if path.exists() {
            out.push(serde_json::from_slice(&fs::read(path)?)?);
        }
    }
    if out.is_empty() {
        return Err(Error::NotFound(format!("no records.json under {}", run_dir.display())));
    }
    Ok(out)
}

/// Recomputes the aggregate of the complete seeds from the files on disk.
pub fn aggregate_run_dir(run_dir: &Path, policy: AsrPolicy) -> Result<Aggregate> {
    let mut records = load_records(run_dir)?;
    records.retain(|r| !r.partial);
    // success flags on disk follow the run's policy; re-derive under `policy`
    for r in &mut records {
        for c in &mut r.classes {
            c.success = policy.is_success(c);
        }
    }
    let mut seconds = Vec::new();
    for (seed, dir) in seed_dirs(run_dir)? {
        if records.iter().any(|r| r.seed == seed) {
            if let Ok(bytes) = fs::read(dir.join("timing.json")) {
                seconds.push(serde_json::from_slice::<SeedTiming>(&bytes)?.seconds);
            }
        }
    }
    let agg = aggregate(&records, policy)?;
    Ok(if seconds.len() == records.len() { agg.with_runtime(&seconds) } else { agg })
}

/// Long-format `class,checkpoint_query,confidence` rows from one seed's
/// trajectory (the lowest seed when `seed` is `None`), classes ascending.
/// Values are copied verbatim from the source CSV. Returns the row count.
pub fn export_heatmap_csv(run_dir: &Path, seed: Option<u64>, mut out: impl Write) -> Result<usize> {
    let dirs = seed_dirs(run_dir)?;
    let dir = match seed {
        Some(s) => dirs.iter().find(|(k, _)| *k == s).map(|(_, d)| d.clone()),
        None => dirs.iter().map(|(_, d)| d).find(|d| d.join("trajectory.csv").exists()).cloned(),
    };
    let path = dir
        .map(|d| d.join("trajectory.csv"))
        .filter(|p| p.exists())
        .ok_or_else(|| Error::NotFound(format!("no trajectory.csv under {}", run_dir.display())))?;
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |names: &[&str]| {
        header
            .iter()
            .position(|h| names.contains(h))
            .ok_or_else(|| Error::Validation(format!("{}: missing column {names:?}", path.display())))
    };
    let (ci, qi, vi) = (col(&["class"])?, col(&["query_index", "queries_so_far"])?, col(&["confidence", "fitness"])?);
    let mut rows: BTreeMap<usize, Vec<(u64, String)>> = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Validation(format!("{}: bad row `{line}`", path.display()));
        let class: usize = f.get(ci).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let query: u64 = f.get(qi).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        rows.entry(class).or_default().push((query, f.get(vi).ok_or_else(bad)?.to_string()));
    }
    writeln!(out, "class,checkpoint_query,confidence")?;
    let mut count = 0;
    for (class, points) in rows {
        for (query, value) in points {
            writeln!(out, "{class},{query},{value}")?;
            count += 1;
        }
    }
    Ok(count)
}

/// Final images of every seed of the given runs as `(target, image)`,
/// ordered by run, then seed, then class.
pub fn collect_fooling_images(run_dirs: &[PathBuf]) -> Result<Vec<(usize, Image)>> {
    let mut out = Vec::new();
    for run in run_dirs {
        for (_, dir) in seed_dirs(run)? {
            let mut pngs: Vec<(usize, PathBuf)> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().to_string_lossy().into_owned();
                    let class = name.strip_prefix("class_")?.strip_suffix(".png")?.parse().ok()?;
                    Some((class, e.path()))
                })
                .collect();
            pngs.sort();
            for (class, path) in pngs {
                out.push((class, Image::decode_png(&fs::read(path)?)?));
            }
        }
    }
    Ok(out)
}
