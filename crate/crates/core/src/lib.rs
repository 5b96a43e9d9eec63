//! Black-box fooling attacks against image classifiers.
//!
//! The crate synthesizes unrecognizable images that a classifier assigns to a
//! chosen class with high confidence, using only its output probabilities:
//!
//! * [`spoof`]: greedy single-pixel hill climbing from a blank canvas.
//! * [`mapelites`] with [`encodings`]: evolutionary attacks over direct pixel
//!   genomes and CPPN genomes, one archive bin per class.
//! * [`metrics`], [`retrain`], [`experiment`]: evaluation, the extra-class
//!   retraining defense, and run orchestration.

pub mod encodings;
pub mod error;
pub mod experiment;
pub mod image;
pub mod mapelites;
pub mod metrics;
pub mod oracle;
pub mod retrain;
pub mod spoof;

pub use error::{Error, Result};
pub use image::{new_canvas, Image, InitMode, PixelProposal};
pub use oracle::{Classifier, OracleHandle, ProbVector};
