//! MAP-Elites with one bin per class, driving the direct and CPPN attacks.
//!
//! Generation 0 evaluates `population_size` random genomes; every later
//! generation mutates parents drawn uniformly from the filled bins. Since one
//! forward pass yields every class probability, a single offspring may take
//! over several bins. Generation 0 counts toward `generations`, so the run
//! spends exactly `population_size × generations` evaluations.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encodings::{random_genome, DirectGenome, EncodingKind, Genome, MutationParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::oracle::OracleHandle;

/// Checkpoints per run are capped near this many.
pub const MAX_CHECKPOINTS: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub encoding: EncodingKind,
    pub population_size: usize,
    pub generations: u64,
    pub seed: u64,
    #[serde(default)]
    pub mutation: MutationParams,
    #[serde(default = "default_direct_rate")]
    pub direct_mutation_rate: f64,
    #[serde(default = "default_halving")]
    pub direct_halving_period: Option<u64>,
}

fn default_direct_rate() -> f64 {
    crate::encodings::direct::DEFAULT_MUTATION_RATE
}

fn default_halving() -> Option<u64> {
    Some(crate::encodings::direct::DEFAULT_HALVING_PERIOD)
}

impl EvolutionConfig {
    pub fn new(encoding: EncodingKind, population_size: usize, generations: u64, seed: u64) -> Self {
        EvolutionConfig {
            encoding,
            population_size,
            generations,
            seed,
            mutation: MutationParams::default(),
            direct_mutation_rate: default_direct_rate(),
            direct_halving_period: default_halving(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::Validation("population size must be at least 1".into()));
        }
        if self.generations == 0 {
            return Err(Error::Validation("generations must be at least 1".into()));
        }
        self.mutation.validate()?;
        if !(0.0..=1.0).contains(&self.direct_mutation_rate) || self.direct_halving_period == Some(0) {
            return Err(Error::Validation("invalid direct mutation schedule".into()));
        }
        Ok(())
    }

    pub fn total_evaluations(&self) -> u64 {
        self.population_size as u64 * self.generations
    }

    pub fn checkpoint_every(&self) -> u64 {
        (self.generations / MAX_CHECKPOINTS).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Elite {
    pub genome: Genome,
    pub fitness: f32,
    /// Top-1 class of the elite's image when it was evaluated.
    pub top1: usize,
    pub found_at_generation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub shape: [usize; 3],
    pub bins: Vec<Option<Elite>>,
}

impl Archive {
    pub fn empty(num_classes: usize, shape: [usize; 3]) -> Self {
        Archive { shape, bins: vec![None; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.bins.len()
    }

    pub fn filled(&self) -> usize {
        self.bins.iter().flatten().count()
    }

    pub fn fitness(&self, class: usize) -> Option<f32> {
        self.bins.get(class)?.as_ref().map(|e| e.fitness)
    }

    pub fn elite(&self, class: usize) -> Result<&Elite> {
        self.bins
            .get(class)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::NotFound(format!("archive bin {class} is empty")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Renders the elite stored for `class`.
pub fn replay_elite(archive: &Archive, class: usize) -> Result<Image> {
    archive.elite(class)?.genome.render(archive.shape)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionPoint {
    pub class: usize,
    pub generation: u64,
    pub queries_so_far: u64,
    pub fitness: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionResult {
    pub archive: Archive,
    /// Best-so-far fitness of every filled bin at each checkpoint.
    pub trajectory: Vec<EvolutionPoint>,
    pub generations_completed: u64,
    pub queries_used: u64,
    /// Set when an oracle failure ended the run early.
    pub error: Option<String>,
}

impl EvolutionResult {
    pub fn is_partial(&self) -> bool {
        self.error.is_some()
    }
}

fn initial_genome(cfg: &EvolutionConfig, shape: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Genome> {
    Ok(match random_genome(cfg.encoding, shape, rng)? {
        Genome::Direct(g) => Genome::Direct(DirectGenome {
            mutation_rate: cfg.direct_mutation_rate,
            rate_halving_period: cfg.direct_halving_period,
            ..g
        }),
        other => other,
    })
}

pub fn evolve(oracle: &OracleHandle, cfg: &EvolutionConfig) -> Result<EvolutionResult> {
    cfg.validate()?;
    let shape = oracle.input_shape();
    let n = oracle.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut archive = Archive::empty(n, shape);
    let mut trajectory = Vec::new();
    let every = cfg.checkpoint_every();
    let mut queries = 0u64;

    for generation in 0..cfg.generations {
        let offspring: Vec<Genome> = if generation == 0 {
            (0..cfg.population_size)
                .map(|_| initial_genome(cfg, shape, &mut rng))
                .collect::<Result<_>>()?
        } else {
            let parents: Vec<&Genome> = archive.bins.iter().flatten().map(|e| &e.genome).collect();
            (0..cfg.population_size)
                .map(|_| {
                    let parent = parents.choose(&mut rng).expect("generation 0 fills every bin");
                    parent.mutate(generation, &cfg.mutation, &mut rng)
                })
                .collect()
        };
        let images = offspring
            .iter()
            .map(|g| g.render(shape))
            .collect::<Result<Vec<_>>>()?;
        let probs = match oracle.predict(&images) {
            Ok(p) => p,
            Err(e) if e.is_oracle_failure() => {
                return Ok(EvolutionResult {
                    archive,
                    trajectory,
                    generations_completed: generation,
                    queries_used: queries,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        };
        queries += images.len() as u64;

        for (genome, p) in offspring.iter().zip(&probs) {
            let top1 = p.argmax();
            for (class, bin) in archive.bins.iter_mut().enumerate() {
                let fitness = p.get(class);
                if bin.as_ref().is_none_or(|e| fitness > e.fitness) {
                    *bin = Some(Elite {
                        genome: genome.clone(),
                        fitness,
                        top1,
                        found_at_generation: generation,
                    });
                }
            }
        }

        if generation % every == 0 || generation + 1 == cfg.generations {
            for (class, bin) in archive.bins.iter().enumerate() {
                if let Some(e) = bin {
                    trajectory.push(EvolutionPoint {
                        class,
                        generation,
                        queries_so_far: queries,
                        fitness: e.fitness,
                    });
                }
            }
        }
    }

    Ok(EvolutionResult {
        archive,
        trajectory,
        generations_completed: cfg.generations,
        queries_used: queries,
        error: None,
    })
}

/// `class,generation,queries_so_far,fitness` rows.
pub fn write_trajectory_csv(points: &[EvolutionPoint], mut out: impl std::io::Write) -> Result<()> {
    writeln!(out, "class,generation,queries_so_far,fitness")?;
    for p in points {
        writeln!(out, "{},{},{},{}", p.class, p.generation, p.queries_so_far, p.fitness)?;
    }
    Ok(())
}
