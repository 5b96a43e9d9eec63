//! Evolvable image encodings used by the evolutionary attacks.

pub mod cppn;
pub mod direct;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use cppn::{Activation, Connection, CppnGenome, MutationParams, Node, NodeRole};
pub use direct::DirectGenome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    Direct,
    Cppn,
}

impl EncodingKind {
    pub fn name(self) -> &'static str {
        match self {
            EncodingKind::Direct => "direct",
            EncodingKind::Cppn => "cppn",
        }
    }
}

impl fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncodingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(EncodingKind::Direct),
            "cppn" => Ok(EncodingKind::Cppn),
            other => Err(Error::Configuration(format!("unknown encoding '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Genome {
    Direct(DirectGenome),
    Cppn(CppnGenome),
}

impl Genome {
    pub fn kind(&self) -> EncodingKind {
        match self {
            Genome::Direct(_) => EncodingKind::Direct,
            Genome::Cppn(_) => EncodingKind::Cppn,
        }
    }

    pub fn render(&self, shape: [usize; 3]) -> Result<Image> {
        let [c, h, w] = shape;
        match self {
            Genome::Direct(g) => {
                if g.pixels.shape() != shape {
                    return Err(Error::Shape { expected: shape.to_vec(), actual: g.pixels.shape().to_vec() });
                }
                Ok(g.pixels.clone())
            }
            Genome::Cppn(g) => g.render(h, w, c),
        }
    }

    /// Direct genomes use the generation-dependent rate; CPPNs use `params`.
    pub fn mutate(&self, generation: u64, params: &MutationParams, rng: &mut impl Rng) -> Genome {
        match self {
            Genome::Direct(g) => Genome::Direct(g.mutate(generation, rng)),
            Genome::Cppn(g) => Genome::Cppn(g.mutate(params, rng)),
        }
    }
}

pub fn random_genome(kind: EncodingKind, shape: [usize; 3], rng: &mut impl Rng) -> Result<Genome> {
    let [c, h, w] = shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidDimension { channels: c, height: h, width: w });
    }
    Ok(match kind {
        EncodingKind::Direct => Genome::Direct(DirectGenome::random(shape, rng)?),
        EncodingKind::Cppn => Genome::Cppn(CppnGenome::minimal(c, rng)),
    })
}
