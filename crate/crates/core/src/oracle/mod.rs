//! Query-counted classifier access.
//!
//! Every attack sees the victim only through [`OracleHandle::predict`],
//! which returns probability vectors and counts each evaluated image.

pub mod network;
pub mod weights;
pub mod wire;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use network::{Layer, Network, NetworkSpec};
pub use weights::{Tensor, Weights};
pub use wire::RemoteOracle;

/// Tolerance on `sum(probs) == 1`.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector {
    probs: Vec<f32>,
}

impl ProbVector {
    /// Validates non-negativity and normalization.
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("empty probability vector".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Validation(format!("invalid probability {bad}")));
        }
        let sum: f64 = probs.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::Validation(format!("probabilities sum to {sum}")));
        }
        Ok(ProbVector { probs })
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, class: usize) -> f32 {
        self.probs[class]
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// A black-box image classifier backend.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    /// `[C, H, W]` of accepted images.
    fn input_shape(&self) -> [usize; 3];

    /// One probability vector per image, in order. Shapes are already checked.
    fn classify(&self, batch: &[&Image]) -> Result<Vec<ProbVector>>;

    fn describe(&self) -> String {
        format!("classifier({} classes)", self.num_classes())
    }
}

/// The built-in inference engine as a classifier.
#[derive(Debug, Clone)]
pub struct BuiltinOracle {
    network: Network,
}

impl BuiltinOracle {
    pub fn new(network: Network) -> Self {
        BuiltinOracle { network }
    }

    pub fn from_parts(spec: NetworkSpec, weights: Weights) -> Result<Self> {
        Ok(BuiltinOracle::new(Network::new(spec, weights)?))
    }

    pub fn load(spec: NetworkSpec, weights_path: impl AsRef<Path>) -> Result<Self> {
        Self::from_parts(spec, Weights::load(weights_path)?)
    }

    pub fn network(&self) -> &Network {
        &self.network
    }
}

impl Classifier for BuiltinOracle {
    fn num_classes(&self) -> usize {
        self.network.num_classes()
    }

    fn input_shape(&self) -> [usize; 3] {
        self.network.input_shape()
    }

    fn classify(&self, batch: &[&Image]) -> Result<Vec<ProbVector>> {
        batch
            .iter()
            .map(|img| {
                let (_, probs) = self.network.forward(img)?;
                Ok(ProbVector { probs })
            })
            .collect()
    }

    fn describe(&self) -> String {
        format!("builtin({} layers)", self.network.spec().layers.len())
    }
}

/// Classifier defined by a closure returning a probability vector per image.
/// Handy for analytic toy victims.
pub struct FnOracle<F> {
    num_classes: usize,
    input_shape: [usize; 3],
    f: F,
}

impl<F> FnOracle<F>
where
    F: Fn(&Image) -> Vec<f32> + Send + Sync,
{
    pub fn new(num_classes: usize, input_shape: [usize; 3], f: F) -> Self {
        FnOracle {
            num_classes,
            input_shape,
            f,
        }
    }
}

impl<F> Classifier for FnOracle<F>
where
    F: Fn(&Image) -> Vec<f32> + Send + Sync,
{
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn classify(&self, batch: &[&Image]) -> Result<Vec<ProbVector>> {
        batch
            .iter()
            .map(|img| {
                let probs = (self.f)(img);
                if probs.len() != self.num_classes {
                    return Err(Error::Validation(format!(
                        "closure returned {} probabilities for {} classes",
                        probs.len(),
                        self.num_classes
                    )));
                }
                ProbVector::new(probs)
            })
            .collect()
    }
}

/// Query-counted endpoint shared by all attacks.
pub struct OracleHandle {
    backend: Box<dyn Classifier>,
    queries: AtomicU64,
    batch_capacity: usize,
}

impl OracleHandle {
    pub fn new(backend: impl Classifier + 'static) -> Self {
        Self::from_boxed(Box::new(backend))
    }

    pub fn from_boxed(backend: Box<dyn Classifier>) -> Self {
        OracleHandle {
            backend,
            queries: AtomicU64::new(0),
            batch_capacity: usize::MAX,
        }
    }

    /// Largest number of images sent to the backend in one call; larger
    /// batches are split.
    pub fn with_batch_capacity(mut self, capacity: usize) -> Self {
        self.batch_capacity = capacity.max(1);
        self
    }

    pub fn batch_capacity(&self) -> usize {
        self.batch_capacity
    }

    pub fn num_classes(&self) -> usize {
        self.backend.num_classes()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.backend.input_shape()
    }

    pub fn describe(&self) -> String {
        self.backend.describe()
    }

    /// Total images evaluated so far.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    pub fn predict(&self, batch: &[Image]) -> Result<Vec<ProbVector>> {
        let refs: Vec<&Image> = batch.iter().collect();
        self.predict_refs(&refs)
    }

    pub fn predict_one(&self, image: &Image) -> Result<ProbVector> {
        Ok(self.predict_refs(&[image])?.remove(0))
    }

    pub fn predict_refs(&self, batch: &[&Image]) -> Result<Vec<ProbVector>> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("predict called with an empty batch".into()));
        }
        let expected = self.backend.input_shape();
        if let Some(bad) = batch.iter().find(|img| img.shape() != expected) {
            return Err(Error::Shape {
                expected: expected.to_vec(),
                actual: bad.shape().to_vec(),
            });
        }
        let n = self.backend.num_classes();
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(self.batch_capacity) {
            let probs = self.backend.classify(chunk)?;
            if probs.len() != chunk.len() || probs.iter().any(|p| p.len() != n) {
                return Err(Error::Validation(format!(
                    "backend returned {} vectors for {} images (expected length {n})",
                    probs.len(),
                    chunk.len()
                )));
            }
            self.queries.fetch_add(chunk.len() as u64, Ordering::SeqCst);
            out.extend(probs);
        }
        Ok(out)
    }
}

impl std::fmt::Debug for OracleHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleHandle")
            .field("backend", &self.backend.describe())
            .field("queries", &self.query_count())
            .field("batch_capacity", &self.batch_capacity)
            .finish()
    }
}
