//! Victim training and the extra-class retraining defense.
//!
//! Training only touches a suffix of the network made of dense and ReLU
//! layers. Everything before that suffix is frozen: its output is computed
//! once per image with the regular inference path and cached as features.

pub mod idx;
pub mod stack;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::oracle::network::{bias_name, weight_name, Layer, Network, NetworkSpec};
use crate::oracle::weights::{Tensor, Weights};
pub use stack::DenseStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Validation(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|i| i.shape() != first.shape()) {
                return Err(Error::Shape { expected: first.shape().to_vec(), actual: bad.shape().to_vec() });
            }
        }
        Ok(LabeledDataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Appends `other`, keeping this dataset's split tag.
    pub fn concat(mut self, other: LabeledDataset) -> Result<Self> {
        if let (Some(a), Some(b)) = (self.images.first(), other.images.first()) {
            if a.shape() != b.shape() {
                return Err(Error::Shape { expected: a.shape().to_vec(), actual: b.shape().to_vec() });
            }
        }
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        Ok(self)
    }

    /// Only the samples whose label is below `n`.
    pub fn with_labels_below(&self, n: usize) -> LabeledDataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] < n).collect();
        LabeledDataset {
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= num_classes) {
            Some(l) => Err(Error::Validation(format!("label {l} outside [0, {num_classes})"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    FinalLayer,
    AllDense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub scope: TrainableScope,
}

impl TrainConfig {
    /// Plain SGD used to train the MNIST victim from scratch.
    pub fn victim(seed: u64) -> Self {
        TrainConfig { learning_rate: 0.1, epochs: 10, batch_size: 64, seed, scope: TrainableScope::AllDense }
    }

    /// Final-layer fine-tuning for the retraining defense.
    pub fn fine_tune(seed: u64) -> Self {
        TrainConfig { learning_rate: 0.01, epochs: 10, batch_size: 64, seed, scope: TrainableScope::FinalLayer }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Validation(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Validation accuracy restricted to the classes the network had before
    /// its head was extended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_class_val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub history: Vec<EpochStats>,
}

/// First layer index of the trainable suffix.
fn scope_start(spec: &NetworkSpec, scope: TrainableScope) -> Result<usize> {
    let head = spec
        .final_dense_index()
        .ok_or_else(|| Error::UnsupportedTraining("final parametric layer is not dense".into()))?;
    Ok(match scope {
        TrainableScope::FinalLayer => head,
        TrainableScope::AllDense => spec
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Dense { .. }))
            .expect("head is dense"),
    })
}

/// Frozen-prefix outputs, one row per image.
fn features(network: &Network, start: usize, images: &[Image]) -> Result<Array2<f32>> {
    let rows = images
        .iter()
        .map(|img| network.forward_prefix(img, start))
        .collect::<Result<Vec<_>>>()?;
    let dim = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), dim), rows.concat()).map_err(|e| Error::Validation(e.to_string()))
}

fn stack_accuracy(stack: &DenseStack<f32>, x: ArrayView2<f32>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (chunk, ys) in x.axis_chunks_iter(Axis(0), 1024).zip(labels.chunks(1024)) {
        correct += stack.predict(chunk).iter().zip(ys).filter(|(p, y)| p == y).count();
    }
    correct as f64 / labels.len() as f64
}

/// Minibatch SGD on cross-entropy over the dense suffix selected by
/// `cfg.scope`. Minibatch order is a seeded shuffle per epoch.
pub fn train_dense(
    spec: &NetworkSpec,
    init: &Weights,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_original_classes(spec, init, train, val, cfg, None)
}

fn train_with_original_classes(
    spec: &NetworkSpec,
    init: &Weights,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    original_classes: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let network = Network::new(spec.clone(), init.clone())?;
    let n = network.num_classes();
    if train.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    train.check_labels(n)?;
    if let Some(v) = val {
        v.check_labels(n)?;
    }
    let start = scope_start(spec, cfg.scope)?;
    let mut stack: DenseStack<f32> = DenseStack::from_layers(&spec.layers[start..], init)?;

    let x = features(&network, start, &train.images)?;
    let val_data = match val {
        Some(v) if !v.is_empty() => {
            let vx = features(&network, start, &v.images)?;
            let original = original_classes.map(|k| {
                let keep: Vec<usize> = (0..v.len()).filter(|&i| v.labels[i] < k).collect();
                let labels: Vec<usize> = keep.iter().map(|&i| v.labels[i]).collect();
                (vx.select(Axis(0), &keep), labels)
            });
            Some((vx, v.labels.clone(), original))
        }
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let lr = cfg.learning_rate as f32;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let bx = x.select(Axis(0), batch);
            let by: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = stack.loss_and_gradients(bx.view(), &by);
            loss_sum += loss as f64 * batch.len() as f64;
            stack.sgd_step(&grads, lr);
        }
        let (val_accuracy, original_class_val_accuracy) = match &val_data {
            Some((vx, vy, original)) => (
                Some(stack_accuracy(&stack, vx.view(), vy)),
                original.as_ref().map(|(ox, oy)| stack_accuracy(&stack, ox.view(), oy)),
            ),
            None => (None, None),
        };
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: stack_accuracy(&stack, x.view(), &train.labels),
            val_accuracy,
            original_class_val_accuracy,
        });
    }

    let mut weights = init.clone();
    if cfg.epochs > 0 {
        stack.write_back(&mut weights)?;
    }
    Ok(TrainOutcome { weights, history })
}

/// Top-1 accuracy of the inference path on `data`.
pub fn accuracy(network: &Network, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    let mut correct = 0usize;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let (_, probs) = network.forward(img)?;
        let top = crate::oracle::ProbVector::new(probs)?.argmax();
        correct += usize::from(top == label);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Grows the classification head by one output whose weights and bias are zero.
pub fn extend_head(spec: &NetworkSpec, weights: &Weights) -> Result<(NetworkSpec, Weights)> {
    let head = spec
        .final_dense_index()
        .ok_or_else(|| Error::UnsupportedTraining("final parametric layer is not dense".into()))?;
    let mut spec = spec.clone();
    let Layer::Dense { name, inputs, outputs } = &mut spec.layers[head] else {
        unreachable!("final_dense_index points at a dense layer")
    };
    let (wname, bname) = (weight_name(name), bias_name(name));
    let (inputs, old) = (*inputs, *outputs);
    *outputs += 1;
    let mut weights = weights.clone();
    let mut w = weights.require(&wname)?.data.clone();
    w.extend(std::iter::repeat_n(0.0, inputs));
    let mut b = weights.require(&bname)?.data.clone();
    b.push(0.0);
    weights.insert(wname, Tensor::new(vec![old + 1, inputs], w)?);
    weights.insert(bname, Tensor::new(vec![old + 1], b)?);
    spec.validate()?;
    Ok((spec, weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOutcome {
    pub spec: NetworkSpec,
    pub weights: Weights,
    pub history: Vec<EpochStats>,
}

/// Adds the fooling class to the head and trains only the head. Every other
/// tensor is copied through unchanged.
pub fn fine_tune_final_layer(
    spec: &NetworkSpec,
    weights: &Weights,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<FineTuneOutcome> {
    let original = spec.validate()?;
    let (spec, extended) = extend_head(spec, weights)?;
    let cfg = TrainConfig { scope: TrainableScope::FinalLayer, ..cfg.clone() };
    let out = train_with_original_classes(&spec, &extended, train, val, &cfg, Some(original))?;
    Ok(FineTuneOutcome { spec, weights: out.weights, history: out.history })
}

/// Labels `per_class_count` fooling images of every target class as the new
/// class `num_classes` and splits each class's share into train/val, with
/// `round(per_class_count × split_ratio)` going to train. Images are taken in
/// the order given.
pub fn build_fooling_class_dataset(
    samples: &[(usize, Image)],
    num_classes: usize,
    per_class_count: usize,
    split_ratio: f64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::Validation(format!("split ratio {split_ratio} outside [0,1]")));
    }
    let train_per_class = (per_class_count as f64 * split_ratio).round() as usize;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..num_classes {
        let pool: Vec<&Image> = samples.iter().filter(|(c, _)| *c == class).map(|(_, i)| i).collect();
        if pool.len() < per_class_count {
            return Err(Error::Capacity { class, needed: per_class_count, available: pool.len() });
        }
        train.extend(pool[..train_per_class].iter().map(|&i| i.clone()));
        val.extend(pool[train_per_class..per_class_count].iter().map(|&i| i.clone()));
    }
    let label = num_classes;
    Ok((
        LabeledDataset { labels: vec![label; train.len()], images: train, split: Split::Train },
        LabeledDataset { labels: vec![label; val.len()], images: val, split: Split::Val },
    ))
}
