//! Direct pixel encoding: the genome is the image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_MUTATION_RATE: f64 = 0.1;
pub const DEFAULT_HALVING_PERIOD: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectGenome {
    pub pixels: Image,
    pub mutation_rate: f64,
    /// `None` never halves the rate.
    pub rate_halving_period: Option<u64>,
}

impl DirectGenome {
    pub fn new(pixels: Image, mutation_rate: f64, rate_halving_period: Option<u64>) -> Result<Self> {
        let g = DirectGenome { pixels, mutation_rate, rate_halving_period };
        g.validate()?;
        Ok(g)
    }

    /// I.i.d. `U(0,1)` pixels with the default schedule.
    pub fn random(shape: [usize; 3], rng: &mut impl Rng) -> Result<Self> {
        let [c, h, w] = shape;
        let data = (0..c * h * w).map(|_| rng.random::<f32>()).collect();
        DirectGenome::new(
            Image::from_vec(c, h, w, data)?,
            DEFAULT_MUTATION_RATE,
            Some(DEFAULT_HALVING_PERIOD),
        )
    }

    pub fn validate(&self) -> Result<()> {
        // rate 0 is allowed as a degenerate "frozen" schedule
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::Genome(format!("mutation rate {} outside [0,1]", self.mutation_rate)));
        }
        if self.rate_halving_period == Some(0) {
            return Err(Error::Genome("rate halving period must be positive".into()));
        }
        Ok(())
    }

    pub fn rate_at(&self, generation: u64) -> f64 {
        match self.rate_halving_period {
            Some(period) => {
                let halvings = (generation / period).min(i32::MAX as u64) as i32;
                self.mutation_rate * 0.5f64.powi(halvings)
            }
            None => self.mutation_rate,
        }
    }

    /// Resamples each element from `U(0,1)` with probability `rate_at(generation)`.
    pub fn mutate(&self, generation: u64, rng: &mut impl Rng) -> DirectGenome {
        let rate = self.rate_at(generation);
        let mut pixels = self.pixels.clone();
        if rate > 0.0 {
            for i in 0..pixels.data().len() {
                if rng.random_bool(rate) {
                    pixels.set_flat(i, rng.random::<f32>());
                }
            }
        }
        DirectGenome { pixels, ..self.clone() }
    }

    pub fn render(&self) -> &Image {
        &self.pixels
    }
}
