//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Weights of a layer are stored as one flat row-major `outputs × inputs`
//! vector, which is exactly the per-layer weight vector the quantizers work on.

use rand::Rng;

use crate::error::{argument, Error, Result};
use crate::rng::{self, Purpose};

/// Row-major 64-bit tensor. Everything in this crate uses rank 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Copy of the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor { shape: vec![rows.len(), c], data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// Affine map followed by an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Uniform(±1/√fan_in) weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| bound * (2.0 * rng::unit(rng) - 1.0))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn affine(&self, x: &Tensor) -> Tensor {
        let b = x.rows();
        let mut out = Vec::with_capacity(b * self.outputs);
        for r in 0..b {
            let xr = x.row(r);
            for o in 0..self.outputs {
                let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let dot: f64 = w.iter().zip(xr).map(|(a, b)| a * b).sum();
                out.push(dot + self.bias[o]);
            }
        }
        Tensor { shape: vec![b, self.outputs], data: out }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<Dense>,
}

/// Activations saved by [`Network::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of each layer (index 0 is the batch itself).
    inputs: Vec<Tensor>,
    /// Pre-activation output of each layer.
    pre: Vec<Tensor>,
    pub logits: Tensor,
}

/// Gradient of a loss with respect to one layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

impl Network {
    /// Dense stack with ReLU between layers and identity logits, seeded init.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(argument(format!("invalid layer sizes {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::Relu };
                Dense::init(w[0], w[1], act, &mut rng::stream(seed, Purpose::Init, i as u64))
            })
            .collect();
        Ok(Self { layers })
    }

    /// Check that layer dimensions compose and parameters are finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Shape(format!("layer {i} parameter sizes do not match {}x{}", l.outputs, l.inputs)));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(Error::Shape(format!("layer {i} expects {} inputs, previous emits {}", l.inputs, self.layers[i - 1].outputs)));
            }
            if l.weights.iter().chain(&l.bias).any(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn num_biases(&self) -> usize {
        self.layers.iter().map(|l| l.bias.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch of shape {:?} does not match input width {}",
                x.shape(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = l.affine(&h);
            z.data.iter_mut().for_each(|v| *v = l.activation.apply(*v));
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let z = l.affine(&h);
            let mut a = z.clone();
            a.data.iter_mut().for_each(|v| *v = l.activation.apply(*v));
            inputs.push(std::mem::replace(&mut h, a));
            pre.push(z);
        }
        Ok(ForwardCache { inputs, pre, logits: h })
    }

    /// Reverse-mode gradients given `∂loss/∂logits`.
    pub fn backward(&self, cache: &ForwardCache, loss_grad: &Tensor) -> Result<Gradients> {
        if loss_grad.shape() != cache.logits.shape() {
            return Err(Error::Shape(format!(
                "loss gradient {:?} does not match logits {:?}",
                loss_grad.shape(),
                cache.logits.shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = loss_grad.data.clone();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[li];
            if l.activation == Activation::Relu {
                for (d, &zv) in delta.iter_mut().zip(&z.data) {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &cache.inputs[li];
            let b = x.rows();
            let mut gw = vec![0.0; l.weights.len()];
            let mut gb = vec![0.0; l.outputs];
            for r in 0..b {
                let xr = x.row(r);
                let dr = &delta[r * l.outputs..(r + 1) * l.outputs];
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &xv) in gw[o * l.inputs..(o + 1) * l.inputs].iter_mut().zip(xr) {
                        *g += d * xv;
                    }
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; b * l.inputs];
                for r in 0..b {
                    let dr = &delta[r * l.outputs..(r + 1) * l.outputs];
                    let pr = &mut prev[r * l.inputs..(r + 1) * l.inputs];
                    for (o, &d) in dr.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        for (p, &w) in pr.iter_mut().zip(&l.weights[o * l.inputs..(o + 1) * l.inputs]) {
                            *p += d * w;
                        }
                    }
                }
                delta = prev;
            }
            grads.push(LayerGrad { weights: gw, bias: gb });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Arg-max class per row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?))
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != labels.len() {
            return Err(Error::Shape("label count differs from batch size".into()));
        }
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Plain SGD: `w ← w − lr · g` for every parameter.
pub fn sgd_step(net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(argument(format!("learning rate must be positive, got {lr}")));
    }
    if grads.layers.len() != net.layers.len() {
        return Err(Error::Shape("gradient layer count differs from network".into()));
    }
    for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
        for (w, d) in l.weights.iter_mut().zip(&g.weights) {
            *w -= lr * d;
        }
        for (b, d) in l.bias.iter_mut().zip(&g.bias) {
            *b -= lr * d;
        }
    }
    Ok(())
}

/// Row-wise `softmax(z / T)`, computed with max subtraction.
pub fn softmax_t(logits: &Tensor, temperature: f64) -> Tensor {
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.data.len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &z in row {
            let e = ((z - m) / temperature).exp();
            sum += e;
            out.push(e);
        }
        out[start..start + c].iter_mut().for_each(|e| *e /= sum);
    }
    Tensor { shape: logits.shape.clone(), data: out }
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(argument(format!("label {bad} out of range for {} classes", logits.cols())));
    }
    Ok(())
}

/// Mean cross-entropy against hard labels, with its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    check_labels(logits, labels)?;
    let p = softmax_t(logits, 1.0);
    let b = logits.rows() as f64;
    let c = logits.cols();
    let mut grad = p.clone();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        loss -= p.data[r * c + y].max(f64::MIN_POSITIVE).ln();
        grad.data[r * c + y] -= 1.0;
    }
    grad.data.iter_mut().for_each(|g| *g /= b);
    Ok((loss / b, grad))
}

/// Mean squared error `½‖z − y‖² / B` and its gradient, for regression heads.
pub fn squared_error(output: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if output.shape() != target.shape() {
        return Err(Error::Shape("output and target shapes differ".into()));
    }
    let b = output.rows() as f64;
    let mut grad = output.clone();
    let mut loss = 0.0;
    for (g, t) in grad.data.iter_mut().zip(&target.data) {
        let d = *g - t;
        loss += 0.5 * d * d;
        *g = d / b;
    }
    Ok((loss / b, grad))
}

/// Temperature and soft/hard mixture of the distillation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillationConfig {
    pub temperature: f64,
    /// Weight of the soft-target term; the hard-label term gets `1 − soft_weight`.
    pub soft_weight: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self { temperature: 5.0, soft_weight: 0.5 }
    }
}

impl DistillationConfig {
    pub fn new(temperature: f64, soft_weight: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(argument(format!("temperature must be positive, got {temperature}")));
        }
        if !(0.0..=1.0).contains(&soft_weight) {
            return Err(argument(format!("soft weight {soft_weight} outside [0, 1]")));
        }
        Ok(Self { temperature, soft_weight })
    }
}

/// Distillation loss, averaged over the batch:
///
/// ```text
/// γ · T² · CE(softmax(t/T), softmax(z/T)) + (1 − γ) · CE(onehot(y), softmax(z))
/// ```
///
/// The `T²` factor keeps the soft-term gradient on the same scale for every
/// temperature. Returns the loss and its gradient w.r.t. the student logits `z`.
pub fn distillation_loss(
    student: &Tensor,
    teacher: &Tensor,
    labels: &[usize],
    cfg: &DistillationConfig,
) -> Result<(f64, Tensor)> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    check_labels(student, labels)?;
    let t = cfg.temperature;
    let gamma = cfg.soft_weight;
    let b = student.rows() as f64;

    let (hard_loss, hard_grad) = cross_entropy(student, labels)?;
    let q = softmax_t(teacher, t);
    let ps = softmax_t(student, t);
    let mut soft_loss = 0.0;
    for (qi, pi) in q.data.iter().zip(&ps.data) {
        if *qi > 0.0 {
            soft_loss -= qi * pi.max(f64::MIN_POSITIVE).ln();
        }
    }
    soft_loss /= b;

    let mut grad = hard_grad;
    for ((g, pi), qi) in grad.data.iter_mut().zip(&ps.data).zip(&q.data) {
        *g = (1.0 - gamma) * *g + gamma * t * (pi - qi) / b;
    }
    Ok((gamma * t * t * soft_loss + (1.0 - gamma) * hard_loss, grad))
}
