//! Evaluation metrics: confidence, Fooling-ASR, pixel change ratio, queries
//! per target and runtime, aggregated over classes and seeds.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Median; for an even count, the mean of the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Spoof,
    Direct,
    Cppn,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Spoof => "spoof",
            AttackKind::Direct => "direct",
            AttackKind::Cppn => "cppn",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spoof" => Ok(AttackKind::Spoof),
            "direct" => Ok(AttackKind::Direct),
            "cppn" => Ok(AttackKind::Cppn),
            other => Err(Error::Validation(format!("unknown attack `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub target: usize,
    pub final_confidence: f64,
    /// Top-1 class of the final image.
    pub top1: usize,
    /// Top-1 match, the default success rule.
    pub success: bool,
    pub pcr: f64,
    pub queries: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_changes: Option<u64>,
}

/// Per-seed outcome of one attack against one classifier. Wall-clock time
/// is kept out of this record so reruns stay byte-identical; see
/// [`Aggregate::with_runtime`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub attack: AttackKind,
    pub classifier: String,
    pub seed: u64,
    pub classes: Vec<ClassRecord>,
    #[serde(default)]
    pub partial: bool,
}

/// When a class counts as fooled: top-1 must equal the target, and the
/// target confidence must reach `min_confidence` if one is set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AsrPolicy {
    #[serde(default)]
    pub min_confidence: Option<f64>,
}

impl AsrPolicy {
    pub fn top1() -> Self {
        AsrPolicy::default()
    }

    pub fn with_threshold(threshold: f64) -> Self {
        AsrPolicy {
            min_confidence: Some(threshold),
        }
    }

    pub fn is_success(&self, rec: &ClassRecord) -> bool {
        rec.top1 == rec.target && self.min_confidence.is_none_or(|t| rec.final_confidence >= t)
    }
}

/// Fraction of `(seed, class)` entries counted as fooled.
pub fn fooling_asr(records: &[RunRecord], policy: AsrPolicy) -> Result<f64> {
    let total: usize = records.iter().map(|r| r.classes.len()).sum();
    if total == 0 {
        return Err(Error::EmptyInput("no class records".into()));
    }
    let fooled = records
        .iter()
        .flat_map(|r| &r.classes)
        .filter(|c| policy.is_success(c))
        .count();
    Ok(fooled as f64 / total as f64)
}

pub fn queries_per_target(oracle_counter_delta: u64, num_classes: usize) -> f64 {
    assert!(num_classes >= 1, "queries_per_target needs at least one class");
    oracle_counter_delta as f64 / num_classes as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Summary {
        Summary {
            median: median(values).expect("non-empty"),
            mean: mean(values).expect("non-empty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub attack: AttackKind,
    pub classifier: String,
    pub seeds: usize,
    pub classes: usize,
    pub confidence: Summary,
    pub pcr: Summary,
    pub queries: Summary,
    pub fooling_asr: f64,
    pub asr_policy: AsrPolicy,
    /// Wall-clock hours per seed run, summarized over seeds.
    pub runtime_hours: Option<Summary>,
}

impl Aggregate {
    pub fn with_runtime(mut self, seconds_per_seed: &[f64]) -> Self {
        if !seconds_per_seed.is_empty() {
            let hours: Vec<f64> = seconds_per_seed.iter().map(|s| s / 3600.0).collect();
            self.runtime_hours = Some(Summary::of(&hours));
        }
        self
    }
}

/// Averages each metric per class over seeds, then takes the median and
/// mean across classes.
pub fn aggregate(records: &[RunRecord], policy: AsrPolicy) -> Result<Aggregate> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptyInput("no run records".into()))?;
    let classes: BTreeSet<usize> = first.classes.iter().map(|c| c.target).collect();
    if classes.is_empty() || classes.len() != first.classes.len() {
        return Err(Error::Validation(format!(
            "seed {} has empty or duplicate class entries",
            first.seed
        )));
    }
    for r in records {
        if r.attack != first.attack || r.classifier != first.classifier {
            return Err(Error::Validation(format!(
                "records mix {}/{} with {}/{}",
                first.attack.name(),
                first.classifier,
                r.attack.name(),
                r.classifier
            )));
        }
        let set: BTreeSet<usize> = r.classes.iter().map(|c| c.target).collect();
        if set != classes || r.classes.len() != classes.len() {
            return Err(Error::Validation(format!(
                "seed {} covers a different class set",
                r.seed
            )));
        }
    }
    let per_class = |metric: fn(&ClassRecord) -> f64| -> Vec<f64> {
        classes
            .iter()
            .map(|&target| {
                let vals: Vec<f64> = records
                    .iter()
                    .flat_map(|r| r.classes.iter().filter(move |c| c.target == target))
                    .map(metric)
                    .collect();
                mean(&vals).expect("every seed covers every class")
            })
            .collect()
    };
    Ok(Aggregate {
        attack: first.attack,
        classifier: first.classifier.clone(),
        seeds: records.len(),
        classes: classes.len(),
        confidence: Summary::of(&per_class(|c| c.final_confidence)),
        pcr: Summary::of(&per_class(|c| c.pcr)),
        queries: Summary::of(&per_class(|c| c.queries)),
        fooling_asr: fooling_asr(records, policy)?,
        asr_policy: policy,
        runtime_hours: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    Median,
    Mean,
}

impl Statistic {
    fn pick(self, s: &Summary) -> f64 {
        match self {
            Statistic::Median => s.median,
            Statistic::Mean => s.mean,
        }
    }
}

pub const AGGREGATE_CSV_HEADER: &str =
    "attack,classifier,runtime_hours,confidence_pct,fooling_asr_pct,pcr_pct,queries_per_target";

/// One row per attack × classifier, in the column order of the results table.
pub fn write_aggregate_csv(rows: &[Aggregate], stat: Statistic, mut out: impl Write) -> Result<()> {
    writeln!(out, "{AGGREGATE_CSV_HEADER}")?;
    for a in rows {
        let runtime = a
            .runtime_hours
            .as_ref()
            .map_or(String::new(), |s| format!("{:.6}", stat.pick(s)));
        writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4},{}",
            a.attack.name(),
            a.classifier,
            runtime,
            100.0 * stat.pick(&a.confidence),
            100.0 * a.fooling_asr,
            100.0 * stat.pick(&a.pcr),
            stat.pick(&a.queries),
        )?;
    }
    Ok(())
}
