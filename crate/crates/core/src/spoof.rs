//! Greedy sparse pixel hill climbing.
//!
//! Each target class owns one canvas. Every step writes a uniformly random
//! value into one uniformly chosen `(channel, row, col)`, queries the oracle
//! and keeps the write only if the target probability strictly increases.
//! The batched runner advances all targets in lock step with a single
//! `predict` call per step; per-target RNG streams make it bit-identical to
//! running each target on its own.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{new_canvas, Image, InitMode, PixelProposal};
use crate::metrics::{mean, median};
use crate::oracle::{OracleHandle, ProbVector};

pub const DEFAULT_CHECKPOINT_STRIDE: u64 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub target_class: usize,
    /// Number of proposal queries `T`, not counting the baseline query.
    pub budget: u64,
    pub seed: u64,
    pub init: InitMode,
    #[serde(default)]
    pub early_stop_confidence: Option<f32>,
    #[serde(default = "default_stride")]
    pub checkpoint_stride: u64,
}

fn default_stride() -> u64 {
    DEFAULT_CHECKPOINT_STRIDE
}

impl AttackConfig {
    pub fn new(target_class: usize, budget: u64, seed: u64) -> Self {
        AttackConfig {
            target_class,
            budget,
            seed,
            init: InitMode::Black,
            early_stop_confidence: None,
            checkpoint_stride: DEFAULT_CHECKPOINT_STRIDE,
        }
    }

    pub fn with_init(mut self, init: InitMode) -> Self {
        self.init = init;
        self
    }

    pub fn with_early_stop(mut self, confidence: f32) -> Self {
        self.early_stop_confidence = Some(confidence);
        self
    }

    pub fn with_checkpoint_stride(mut self, stride: u64) -> Self {
        self.checkpoint_stride = stride;
        self
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Validation("query budget must be at least 1".into()));
        }
        if self.target_class >= num_classes {
            return Err(Error::Validation(format!(
                "target class {} outside [0, {num_classes})",
                self.target_class
            )));
        }
        if self.checkpoint_stride == 0 {
            return Err(Error::Validation("checkpoint stride must be at least 1".into()));
        }
        if let Some(c) = self.early_stop_confidence {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::Validation(format!("early-stop confidence {c} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub query_index: u64,
    pub confidence: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub target_class: usize,
    pub initial_image: Image,
    pub final_image: Image,
    /// Accepted updates, counted per write (a location can count twice).
    pub pixel_changes_accepted: u64,
    /// Proposal queries spent; never above the budget.
    pub queries_used: u64,
    pub baseline_queries: u64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_confidence: f32,
    /// Top-1 class of the final image.
    pub final_prediction: usize,
    /// Changed spatial locations between the initial and final canvas.
    pub pcr: f64,
    pub accepted: Vec<PixelProposal>,
    /// Set when the oracle failed and the run was cut short.
    pub error: Option<String>,
}

impl AttackResult {
    pub fn is_partial(&self) -> bool {
        self.error.is_some()
    }

    /// Re-applies the accepted proposals to the initial canvas.
    pub fn replay(&self) -> Result<Image> {
        let mut img = self.initial_image.clone();
        for p in &self.accepted {
            img = img.apply_proposal(p)?;
        }
        Ok(img)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Proposal stream seed of one target class under a global seed.
pub fn stream_seed(global_seed: u64, target_class: usize) -> u64 {
    splitmix64(splitmix64(global_seed) ^ (target_class as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Seed of the random canvas; separate from the proposal stream so every
/// init mode sees the same proposals.
pub fn canvas_seed(global_seed: u64, target_class: usize) -> u64 {
    splitmix64(stream_seed(global_seed, target_class) ^ 0xA076_1D64_78BD_642F)
}

/// One target's hill-climbing state.
struct Climber {
    cfg: AttackConfig,
    rng: ChaCha8Rng,
    initial: Image,
    current: Image,
    candidate: Image,
    current_probs: Option<ProbVector>,
    pending: Option<(PixelProposal, f32)>,
    queries: u64,
    accepted: Vec<PixelProposal>,
    trajectory: Vec<TrajectoryPoint>,
    done: bool,
    error: Option<String>,
}

impl Climber {
    fn new(cfg: AttackConfig, shape: [usize; 3]) -> Result<Self> {
        let [c, h, w] = shape;
        let canvas = new_canvas(c, h, w, cfg.init, canvas_seed(cfg.seed, cfg.target_class))?;
        Ok(Climber {
            rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, cfg.target_class)),
            initial: canvas.clone(),
            current: canvas.clone(),
            candidate: canvas,
            current_probs: None,
            pending: None,
            queries: 0,
            accepted: Vec::new(),
            trajectory: Vec::new(),
            done: false,
            error: None,
            cfg,
        })
    }

    fn confidence(&self) -> f32 {
        self.current_probs
            .as_ref()
            .map_or(0.0, |p| p.get(self.cfg.target_class))
    }

    fn reached_early_stop(&self) -> bool {
        self.cfg
            .early_stop_confidence
            .is_some_and(|th| self.confidence() >= th)
    }

    fn set_baseline(&mut self, probs: ProbVector) {
        self.current_probs = Some(probs);
        self.trajectory.push(TrajectoryPoint {
            query_index: 0,
            confidence: self.confidence(),
        });
        self.done = self.reached_early_stop();
    }

    /// Draws `(row, col, channel)` then `v ~ U(0,1)` and writes it into the candidate.
    fn propose(&mut self) {
        let [c, h, w] = self.current.shape();
        let p = PixelProposal {
            row: self.rng.random_range(0..h),
            col: self.rng.random_range(0..w),
            channel: self.rng.random_range(0..c),
            value: self.rng.random::<f32>(),
        };
        let previous = self.candidate.write(&p);
        self.pending = Some((p, previous));
    }

    fn observe(&mut self, probs: ProbVector) {
        let (p, previous) = self.pending.take().expect("observe follows propose");
        self.queries += 1;
        if probs.get(self.cfg.target_class) > self.confidence() {
            self.current.write(&p);
            self.accepted.push(p);
            self.current_probs = Some(probs);
        } else {
            self.candidate.write(&PixelProposal { value: previous, ..p });
        }
        let finished = self.queries >= self.cfg.budget || self.reached_early_stop();
        if finished || self.queries.is_multiple_of(self.cfg.checkpoint_stride) {
            self.trajectory.push(TrajectoryPoint {
                query_index: self.queries,
                confidence: self.confidence(),
            });
        }
        self.done = finished;
    }

    fn abort(&mut self, message: String) {
        if let Some((p, previous)) = self.pending.take() {
            self.candidate.write(&PixelProposal { value: previous, ..p });
        }
        self.error = Some(message);
        self.done = true;
    }

    fn finish(self) -> Result<AttackResult> {
        let pcr = self.initial.changed_location_ratio(&self.current)?;
        let (final_confidence, final_prediction) = match &self.current_probs {
            Some(p) => (p.get(self.cfg.target_class), p.argmax()),
            None => (0.0, 0),
        };
        Ok(AttackResult {
            target_class: self.cfg.target_class,
            pixel_changes_accepted: self.accepted.len() as u64,
            queries_used: self.queries,
            baseline_queries: u64::from(self.current_probs.is_some()),
            trajectory: self.trajectory,
            final_confidence,
            final_prediction,
            pcr,
            accepted: self.accepted,
            error: self.error,
            initial_image: self.initial,
            final_image: self.current,
        })
    }
}

/// Runs a single target. Oracle failures end the run early and are reported
/// through [`AttackResult::error`]; configuration problems are returned as errors.
pub fn spoof_attack(oracle: &OracleHandle, cfg: &AttackConfig) -> Result<AttackResult> {
    Ok(spoof_batch(oracle, std::slice::from_ref(cfg))?.remove(0))
}

/// Runs one climber per config, evaluating all live candidates in one
/// `predict` call per step.
pub fn spoof_batch(oracle: &OracleHandle, configs: &[AttackConfig]) -> Result<Vec<AttackResult>> {
    if configs.is_empty() {
        return Err(Error::EmptyInput("no attack configs".into()));
    }
    let n = oracle.num_classes();
    let mut targets = HashSet::new();
    for cfg in configs {
        cfg.validate(n)?;
        if !targets.insert(cfg.target_class) {
            return Err(Error::Configuration(format!(
                "duplicate target class {}",
                cfg.target_class
            )));
        }
        if cfg.budget != configs[0].budget {
            return Err(Error::Configuration(
                "all configs in a batch must share the query budget".into(),
            ));
        }
    }
    let shape = oracle.input_shape();
    let mut climbers = configs
        .iter()
        .map(|cfg| Climber::new(cfg.clone(), shape))
        .collect::<Result<Vec<_>>>()?;

    let baseline: Vec<&Image> = climbers.iter().map(|c| &c.current).collect();
    match oracle.predict_refs(&baseline) {
        Ok(probs) => {
            for (climber, p) in climbers.iter_mut().zip(probs) {
                climber.set_baseline(p);
            }
        }
        Err(e) if e.is_oracle_failure() => {
            for climber in &mut climbers {
                climber.abort(e.to_string());
            }
        }
        Err(e) => return Err(e),
    }

    loop {
        let live: Vec<usize> = (0..climbers.len()).filter(|&i| !climbers[i].done).collect();
        if live.is_empty() {
            break;
        }
        for &i in &live {
            climbers[i].propose();
        }
        let batch: Vec<&Image> = live.iter().map(|&i| &climbers[i].candidate).collect();
        match oracle.predict_refs(&batch) {
            Ok(probs) => {
                for (&i, p) in live.iter().zip(probs) {
                    climbers[i].observe(p);
                }
            }
            Err(e) if e.is_oracle_failure() => {
                for &i in &live {
                    climbers[i].abort(e.to_string());
                }
            }
            Err(e) => return Err(e),
        }
    }

    climbers.into_iter().map(Climber::finish).collect()
}

/// One config per class `0..num_classes`, all sharing `budget`, `seed` and `init`.
pub fn configs_for_all_classes(
    num_classes: usize,
    budget: u64,
    seed: u64,
    init: InitMode,
) -> Vec<AttackConfig> {
    (0..num_classes)
        .map(|c| AttackConfig::new(c, budget, seed).with_init(init))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub query_index: u64,
    pub median_confidence: f64,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub init: InitMode,
    pub points: Vec<AblationPoint>,
    pub median_final_confidence: f64,
    pub median_pcr: f64,
}

/// Runs the batched attack over every class under each canvas
/// initialization and summarizes confidence across classes and seeds at
/// each checkpoint.
pub fn init_ablation(
    oracle: &OracleHandle,
    budget: u64,
    seeds: &[u64],
    checkpoint_stride: u64,
) -> Result<Vec<AblationSummary>> {
    if budget == 0 {
        return Err(Error::Validation("query budget must be at least 1".into()));
    }
    if seeds.is_empty() {
        return Err(Error::EmptyInput("no seeds".into()));
    }
    let n = oracle.num_classes();
    let mut out = Vec::new();
    for init in InitMode::ALL {
        let mut runs = Vec::new();
        for &seed in seeds {
            let configs: Vec<_> = configs_for_all_classes(n, budget, seed, init)
                .into_iter()
                .map(|c| c.with_checkpoint_stride(checkpoint_stride))
                .collect();
            let results = spoof_batch(oracle, &configs)?;
            if let Some(failed) = results.iter().find_map(|r| r.error.clone()) {
                return Err(Error::Transport {
                    request_id: 0,
                    message: failed,
                });
            }
            runs.extend(results);
        }
        let checkpoints: Vec<u64> = runs[0].trajectory.iter().map(|p| p.query_index).collect();
        let points = checkpoints
            .iter()
            .enumerate()
            .map(|(k, &q)| {
                let confs: Vec<f64> = runs
                    .iter()
                    .map(|r| r.trajectory[k].confidence as f64)
                    .collect();
                AblationPoint {
                    query_index: q,
                    median_confidence: median(&confs).expect("non-empty"),
                    mean_confidence: mean(&confs).expect("non-empty"),
                }
            })
            .collect();
        let finals: Vec<f64> = runs.iter().map(|r| r.final_confidence as f64).collect();
        let pcrs: Vec<f64> = runs.iter().map(|r| r.pcr).collect();
        out.push(AblationSummary {
            init,
            points,
            median_final_confidence: median(&finals).expect("non-empty"),
            median_pcr: median(&pcrs).expect("non-empty"),
        });
    }
    Ok(out)
}
