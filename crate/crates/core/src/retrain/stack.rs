//! Dense/ReLU stack with softmax cross-entropy, trained by minibatch SGD.
//!
//! Generic over the float type so the same backprop runs in `f32` for
//! training and in `f64` for finite-difference checks.

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat};

use crate::error::{Error, Result};
use crate::oracle::network::{bias_name, weight_name, Layer};
use crate::oracle::weights::{Tensor, Weights};

#[derive(Debug, Clone, PartialEq)]
pub enum StackLayer<A> {
    /// `w` is `[out, in]`.
    Dense { name: String, w: Array2<A>, b: Array1<A> },
    Relu,
}

/// Gradients of every dense layer, in stack order.
pub type Gradients<A> = Vec<(Array2<A>, Array1<A>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseStack<A> {
    pub layers: Vec<StackLayer<A>>,
}

impl<A: NdFloat> DenseStack<A> {
    /// Builds the stack from `layers` (a network suffix ending in softmax).
    /// Flatten is a no-op on flat features; the trailing softmax folds into
    /// the loss.
    pub fn from_layers(layers: &[Layer], weights: &Weights) -> Result<Self> {
        let mut out = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Dense { name, inputs, outputs } => {
                    let w = weights.require(&weight_name(name))?;
                    let b = weights.require(&bias_name(name))?;
                    let cast = |v: &[f32]| v.iter().map(|&x| A::from(x).expect("f32 fits")).collect::<Vec<A>>();
                    out.push(StackLayer::Dense {
                        name: name.clone(),
                        w: Array2::from_shape_vec((*outputs, *inputs), cast(&w.data))
                            .map_err(|e| Error::Configuration(e.to_string()))?,
                        b: Array1::from(cast(&b.data)),
                    });
                }
                Layer::Relu => out.push(StackLayer::Relu),
                Layer::Flatten => {}
                Layer::Softmax if i + 1 == layers.len() => {}
                other => {
                    return Err(Error::UnsupportedTraining(format!(
                        "{other:?} inside the trainable scope; only dense, relu, flatten and a final softmax are trainable"
                    )))
                }
            }
        }
        if !matches!(layers.last(), Some(Layer::Softmax)) {
            return Err(Error::UnsupportedTraining("trainable scope must end in a softmax".into()));
        }
        Ok(DenseStack { layers: out })
    }

    /// Writes the dense tensors back as `f32`, leaving every other tensor untouched.
    pub fn write_back(&self, weights: &mut Weights) -> Result<()> {
        for layer in &self.layers {
            if let StackLayer::Dense { name, w, b } = layer {
                let to32 = |it: &mut dyn Iterator<Item = &A>| it.map(|v| v.to_f32().expect("finite")).collect();
                weights.insert(weight_name(name), Tensor::new(w.shape().to_vec(), to32(&mut w.iter()))?);
                weights.insert(bias_name(name), Tensor::new(vec![b.len()], to32(&mut b.iter()))?);
            }
        }
        Ok(())
    }

    pub fn num_dense(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, StackLayer::Dense { .. })).count()
    }

    /// Inputs to every layer plus the final logits.
    fn activations(&self, x: ArrayView2<A>) -> Vec<Array2<A>> {
        let mut acts = vec![x.to_owned()];
        for layer in &self.layers {
            let prev = acts.last().expect("non-empty");
            let next = match layer {
                StackLayer::Dense { w, b, .. } => prev.dot(&w.t()) + b,
                StackLayer::Relu => prev.mapv(|v| v.max(A::zero())),
            };
            acts.push(next);
        }
        acts
    }

    pub fn logits(&self, x: ArrayView2<A>) -> Array2<A> {
        self.activations(x).pop().expect("non-empty")
    }

    pub fn predict(&self, x: ArrayView2<A>) -> Vec<usize> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean cross-entropy of the softmax of the logits.
    pub fn loss(&self, x: ArrayView2<A>, labels: &[usize]) -> A {
        let probs = softmax_rows(&self.logits(x));
        mean_nll(&probs, labels)
    }

    /// Mean loss and exact gradients for every dense layer.
    pub fn loss_and_gradients(&self, x: ArrayView2<A>, labels: &[usize]) -> (A, Gradients<A>) {
        let acts = self.activations(x);
        let batch = A::from(labels.len()).expect("usize fits");
        let mut delta = softmax_rows(acts.last().expect("non-empty"));
        let loss = mean_nll(&delta, labels);
        for (row, &y) in labels.iter().enumerate() {
            delta[[row, y]] -= A::one();
        }
        delta.mapv_inplace(|v| v / batch);

        let mut grads = Vec::with_capacity(self.num_dense());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            match layer {
                StackLayer::Dense { w, .. } => {
                    grads.push((delta.t().dot(input), delta.sum_axis(Axis(0))));
                    delta = delta.dot(w);
                }
                StackLayer::Relu => {
                    ndarray::Zip::from(&mut delta)
                        .and(input)
                        .for_each(|d, &z| if z <= A::zero() { *d = A::zero() });
                }
            }
        }
        grads.reverse();
        (loss, grads)
    }

    pub fn sgd_step(&mut self, grads: &Gradients<A>, learning_rate: A) {
        let dense = self.layers.iter_mut().filter_map(|l| match l {
            StackLayer::Dense { w, b, .. } => Some((w, b)),
            StackLayer::Relu => None,
        });
        for ((w, b), (gw, gb)) in dense.zip(grads) {
            w.scaled_add(-learning_rate, gw);
            b.scaled_add(-learning_rate, gb);
        }
    }

    /// Mutable views over every dense parameter, weights then bias per layer.
    pub fn parameters_mut(&mut self) -> Vec<&mut A> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let StackLayer::Dense { w, b, .. } = layer {
                out.extend(w.iter_mut());
                out.extend(b.iter_mut());
            }
        }
        out
    }
}

/// Flattens gradients in the same order as [`DenseStack::parameters_mut`].
pub fn flatten_gradients<A: Copy>(grads: &Gradients<A>) -> Vec<A> {
    grads.iter().flat_map(|(w, b)| w.iter().chain(b.iter()).copied()).collect()
}

fn softmax_rows<A: NdFloat>(logits: &Array2<A>) -> Array2<A> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(A::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn mean_nll<A: NdFloat>(probs: &Array2<A>, labels: &[usize]) -> A {
    let tiny = A::min_positive_value();
    let total = labels
        .iter()
        .enumerate()
        .fold(A::zero(), |acc, (row, &y)| acc - probs[[row, y]].max(tiny).ln());
    total / A::from(labels.len()).expect("usize fits")
}
