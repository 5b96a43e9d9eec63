//! Small feed-forward inference engine for the built-in victims.
//!
//! Parametric layers own two tensors, `<name>.weight` and `<name>.bias`.
//! Dense weights are `[out, in]`; conv weights are `[out_ch, in_ch, k, k]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::weights::{Tensor, Weights};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Softmax,
}

impl Layer {
    pub fn dense(name: &str, inputs: usize, outputs: usize) -> Self {
        Layer::Dense {
            name: name.into(),
            inputs,
            outputs,
        }
    }

    pub fn conv2d(name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Layer::Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
        }
    }

    /// `(name, weight shape, bias shape)` for parametric layers.
    pub fn parameters(&self) -> Option<(&str, Vec<usize>, Vec<usize>)> {
        match self {
            Layer::Dense {
                name,
                inputs,
                outputs,
            } => Some((name, vec![*outputs, *inputs], vec![*outputs])),
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                name,
                vec![*out_channels, *in_channels, *kernel, *kernel],
                vec![*out_channels],
            )),
            _ => None,
        }
    }
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Spatial([usize; 3]),
    Flat(usize),
}

impl Activation {
    fn len(self) -> usize {
        match self {
            Activation::Spatial([c, h, w]) => c * h * w,
            Activation::Flat(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// 784→256→10 perceptron with a ReLU hidden layer.
    pub fn mnist_mlp() -> Self {
        NetworkSpec {
            input_shape: [1, 28, 28],
            layers: vec![
                Layer::Flatten,
                Layer::dense("fc1", 784, 256),
                Layer::Relu,
                Layer::dense("fc2", 256, 10),
                Layer::Softmax,
            ],
        }
    }

    /// LeNet-5 layout: conv(1→6,5,pad 2)–pool–conv(6→16,5)–pool–400→120→84→10.
    pub fn lenet5() -> Self {
        NetworkSpec {
            input_shape: [1, 28, 28],
            layers: vec![
                Layer::Conv2d {
                    name: "conv1".into(),
                    in_channels: 1,
                    out_channels: 6,
                    kernel: 5,
                    stride: 1,
                    padding: 2,
                },
                Layer::Relu,
                Layer::MaxPool { kernel: 2, stride: 2 },
                Layer::conv2d("conv2", 6, 16, 5),
                Layer::Relu,
                Layer::MaxPool { kernel: 2, stride: 2 },
                Layer::Flatten,
                Layer::dense("fc1", 400, 120),
                Layer::Relu,
                Layer::dense("fc2", 120, 84),
                Layer::Relu,
                Layer::dense("fc3", 84, 10),
                Layer::Softmax,
            ],
        }
    }

    /// Checks that layer shapes compose and the network ends in a softmax.
    /// Returns the number of classes.
    pub fn validate(&self) -> Result<usize> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Configuration(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        let mut act = Activation::Spatial(self.input_shape);
        for (i, layer) in self.layers.iter().enumerate() {
            act = next_activation(act, layer)
                .map_err(|msg| Error::Configuration(format!("layer {i} ({layer:?}): {msg}")))?;
        }
        match (self.layers.last(), act) {
            (Some(Layer::Softmax), Activation::Flat(n)) if n >= 1 => Ok(n),
            _ => Err(Error::Configuration(
                "network must end with a softmax over a flat vector".into(),
            )),
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        self.validate()
    }

    /// Index of the last dense layer, the classification head.
    pub fn final_dense_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| l.parameters().is_some())
            .filter(|&i| matches!(self.layers[i], Layer::Dense { .. }))
    }

    /// Deterministic He-uniform initialization with zero biases.
    pub fn init_weights(&self, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Weights::new();
        for layer in &self.layers {
            if let Some((name, wshape, bshape)) = layer.parameters() {
                let fan_in: usize = wshape[1..].iter().product();
                let bound = (6.0 / fan_in as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let len: usize = wshape.iter().product();
                let data = (0..len).map(|_| dist.sample(&mut rng)).collect();
                weights.insert(weight_name(name), Tensor { shape: wshape, data });
                weights.insert(bias_name(name), Tensor::zeros(bshape));
            }
        }
        weights
    }
}

fn next_activation(act: Activation, layer: &Layer) -> std::result::Result<Activation, String> {
    match (layer, act) {
        (Layer::Dense { inputs, outputs, .. }, Activation::Flat(n)) => {
            if *inputs != n {
                return Err(format!("expects {inputs} inputs, receives {n}"));
            }
            if *outputs == 0 {
                return Err("zero outputs".into());
            }
            Ok(Activation::Flat(*outputs))
        }
        (Layer::Dense { .. }, Activation::Spatial(_)) => {
            Err("dense layer needs a flatten before it".into())
        }
        (
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            },
            Activation::Spatial([c, h, w]),
        ) => {
            if *in_channels != c {
                return Err(format!("expects {in_channels} channels, receives {c}"));
            }
            if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                return Err("kernel, stride and channel counts must be positive".into());
            }
            let (ph, pw) = (h + 2 * padding, w + 2 * padding);
            if *kernel > ph || *kernel > pw {
                return Err(format!("kernel {kernel} larger than padded input {ph}x{pw}"));
            }
            Ok(Activation::Spatial([
                *out_channels,
                (ph - kernel) / stride + 1,
                (pw - kernel) / stride + 1,
            ]))
        }
        (Layer::MaxPool { kernel, stride }, Activation::Spatial([c, h, w])) => {
            if *kernel == 0 || *stride == 0 {
                return Err("kernel and stride must be positive".into());
            }
            if *kernel > h || *kernel > w {
                return Err(format!("pool window {kernel} larger than input {h}x{w}"));
            }
            Ok(Activation::Spatial([
                c,
                (h - kernel) / stride + 1,
                (w - kernel) / stride + 1,
            ]))
        }
        (Layer::Conv2d { .. } | Layer::MaxPool { .. }, Activation::Flat(_)) => {
            Err("spatial layer applied to a flat vector".into())
        }
        (Layer::Relu, a) => Ok(a),
        (Layer::Flatten, a) => Ok(Activation::Flat(a.len())),
        (Layer::Softmax, Activation::Flat(n)) => Ok(Activation::Flat(n)),
        (Layer::Softmax, Activation::Spatial(_)) => Err("softmax needs a flat input".into()),
    }
}

/// A validated spec paired with matching weights.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    weights: Weights,
    num_classes: usize,
}

impl Network {
    pub fn new(spec: NetworkSpec, weights: Weights) -> Result<Self> {
        let num_classes = spec.validate()?;
        for layer in &spec.layers {
            if let Some((name, wshape, bshape)) = layer.parameters() {
                for (tensor, shape) in [(weight_name(name), wshape), (bias_name(name), bshape)] {
                    let t = weights.get(&tensor).ok_or_else(|| {
                        Error::Configuration(format!("missing weight tensor `{tensor}`"))
                    })?;
                    if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                        return Err(Error::Configuration(format!(
                            "tensor `{tensor}` has shape {:?}, layer expects {shape:?}",
                            t.shape
                        )));
                    }
                }
            }
        }
        Ok(Network {
            spec,
            weights,
            num_classes,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn into_parts(self) -> (NetworkSpec, Weights) {
        (self.spec, self.weights)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.shape() != self.spec.input_shape {
            return Err(Error::Shape {
                expected: self.spec.input_shape.to_vec(),
                actual: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Runs layers `[0, end)` on one image and returns the flat activation.
    pub fn forward_prefix(&self, image: &Image, end: usize) -> Result<Vec<f32>> {
        self.check_input(image)?;
        let mut act = Activation::Spatial(self.spec.input_shape);
        let mut values = image.data().to_vec();
        for layer in &self.spec.layers[..end] {
            let (next, out) = self.apply(layer, act, &values);
            act = next;
            values = out;
        }
        Ok(values)
    }

    /// Pre-softmax scores and the softmax probabilities for one image.
    pub fn forward(&self, image: &Image) -> Result<(Vec<f32>, Vec<f32>)> {
        let logits = self.forward_prefix(image, self.spec.layers.len() - 1)?;
        let probs = softmax(&logits);
        Ok((logits, probs))
    }

    pub fn forward_batch(&self, batch: &[&Image]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        batch.iter().map(|img| self.forward(img)).collect()
    }

    fn apply(&self, layer: &Layer, act: Activation, x: &[f32]) -> (Activation, Vec<f32>) {
        let next = next_activation(act, layer).expect("validated at construction");
        let out = match layer {
            Layer::Dense { name, .. } => {
                let w = &self.weights.get(&weight_name(name)).expect("validated").data;
                let b = &self.weights.get(&bias_name(name)).expect("validated").data;
                dense(w, b, x)
            }
            Layer::Conv2d {
                name,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let Activation::Spatial(in_shape) = act else { unreachable!() };
                let Activation::Spatial([_, oh, ow]) = next else { unreachable!() };
                let w = &self.weights.get(&weight_name(name)).expect("validated").data;
                let b = &self.weights.get(&bias_name(name)).expect("validated").data;
                conv2d(x, in_shape, w, b, *out_channels, *kernel, *stride, *padding, [oh, ow])
            }
            Layer::MaxPool { kernel, stride } => {
                let Activation::Spatial(in_shape) = act else { unreachable!() };
                let Activation::Spatial([_, oh, ow]) = next else { unreachable!() };
                maxpool(x, in_shape, *kernel, *stride, [oh, ow])
            }
            Layer::Relu => relu(x),
            Layer::Flatten => x.to_vec(),
            Layer::Softmax => softmax(x),
        };
        (next, out)
    }
}

/// Dot product with a fixed summation order, independent of how many
/// images are evaluated together.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y = W x + b` with `W` stored row-major `[out, in]`.
pub fn dense(w: &[f32], b: &[f32], x: &[f32]) -> Vec<f32> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| bias + dot(&w[o * n_in..(o + 1) * n_in], x))
        .collect()
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Softmax with max subtraction, accumulated in f64.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Cross-correlation (no kernel flip) with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f32],
    [in_c, in_h, in_w]: [usize; 3],
    w: &[f32],
    b: &[f32],
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    [out_h, out_w]: [usize; 2],
) -> Vec<f32> {
    let mut out = vec![0.0f32; out_c * out_h * out_w];
    for oc in 0..out_c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = b[oc];
                for ic in 0..in_c {
                    let wbase = (oc * in_c + ic) * k * k;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            acc += w[wbase + ky * k + kx]
                                * x[(ic * in_h + iy as usize) * in_w + ix as usize];
                        }
                    }
                }
                out[(oc * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    out
}

pub fn maxpool(
    x: &[f32],
    [c, in_h, in_w]: [usize; 3],
    k: usize,
    stride: usize,
    [out_h, out_w]: [usize; 2],
) -> Vec<f32> {
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(x[(ch * in_h + oy * stride + ky) * in_w + ox * stride + kx]);
                    }
                }
                out[(ch * out_h + oy) * out_w + ox] = m;
            }
        }
    }
    out
}
