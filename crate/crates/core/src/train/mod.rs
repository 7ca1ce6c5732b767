//! Training procedures.
//!
//! - [`train_full_precision`]: ordinary supervised or distilled training.
//! - [`quantized_distillation`]: each step runs forward and backward through
//!   the quantized copy of the weights, but applies the update to the
//!   full-precision weights, so small gradients accumulate until a weight
//!   crosses a rounding threshold.
//! - [`differentiable_quantization`]: weights frozen, non-uniform points
//!   trained by gradient descent.
//! - [`pm_quantize`]: quantize once after training.

mod diffquant;
mod model;

pub use diffquant::{
    allocate_points, differentiable_quantization, gradient_norms, redistribute_bits, DqConfig,
    DqLoss, DqOutcome, PointInit, Reference,
};
pub use model::{
    network_from_container, network_to_container, parameter_checksum, quantize_network_nonuniform,
    quantize_network_uniform, QuantizedLayer, QuantizedModel,
};

use rand::seq::SliceRandom;

use crate::data::Subset;
use crate::error::{argument, Error, Result};
use crate::nn::{cross_entropy, distillation_loss, DistillationConfig, Gradients, Network, Tensor};
use crate::quantcore::{Rounding, UniformScheme};
use crate::rng::{self, Purpose};

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Halve the rate after any epoch whose training loss did not drop.
    Plateau,
    /// Decay linearly from `lr` at the first epoch to `lr / epochs` at the last.
    Linear,
}

impl Schedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(Schedule::Constant),
            "plateau" => Some(Schedule::Plateau),
            "linear" => Some(Schedule::Linear),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Plateau => "plateau",
            Schedule::Linear => "linear",
        }
    }
}

/// Optimization schedule shared by every training procedure.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            schedule: Schedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(argument("batch size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(argument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(argument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// What the student is fit to.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    Labels,
    Distill {
        teacher: &'a Network,
        cfg: DistillationConfig,
    },
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

/// Momentum SGD over full-precision parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Optimizer {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: None }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if self.momentum == 0.0 {
            return crate::nn::sgd_step(net, grads, self.lr);
        }
        let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(net));
        for (vl, gl) in v.layers.iter_mut().zip(&grads.layers) {
            for (a, b) in vl.weights.iter_mut().zip(&gl.weights) {
                *a = self.momentum * *a + b;
            }
            for (a, b) in vl.bias.iter_mut().zip(&gl.bias) {
                *a = self.momentum * *a + b;
            }
        }
        crate::nn::sgd_step(net, v, self.lr)
    }
}

/// Loss and logit gradient for a batch under `objective`; `teacher_logits`
/// holds the teacher's outputs for the same rows when distilling.
fn batch_loss(
    logits: &Tensor,
    labels: &[usize],
    objective: &Objective<'_>,
    teacher_logits: Option<&Tensor>,
) -> Result<(f64, Tensor)> {
    match (objective, teacher_logits) {
        (Objective::Labels, _) => cross_entropy(logits, labels),
        (Objective::Distill { cfg, .. }, Some(t)) => distillation_loss(logits, t, labels, cfg),
        (Objective::Distill { .. }, None) => Err(argument("distillation needs teacher logits")),
    }
}

pub fn evaluate(net: &Network, data: &Subset) -> Result<(f64, f64)> {
    let logits = net.forward(&data.x)?;
    let (loss, _) = cross_entropy(&logits, &data.y)?;
    let pred = crate::nn::argmax_rows(&logits);
    let hits = pred.iter().zip(&data.y).filter(|(a, b)| a == b).count();
    Ok((loss, hits as f64 / data.len().max(1) as f64))
}

/// Shared epoch loop. `project` maps the full-precision network to the one
/// used for the forward/backward pass at a given step; the update is always
/// applied to the full-precision network.
fn fit<F>(
    net: &mut Network,
    data: &Subset,
    cfg: &TrainConfig,
    objective: Objective<'_>,
    mut project: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&Network, u64) -> Result<Option<Network>>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(argument("training set is empty"));
    }
    let teacher_logits = match &objective {
        Objective::Distill { teacher, .. } => Some(teacher.forward(&data.x)?),
        Objective::Labels => None,
    };
    let mut opt = Optimizer::new(cfg.lr, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    let mut prev_loss = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        if cfg.schedule == Schedule::Linear {
            opt.lr = cfg.lr * (cfg.epochs - epoch) as f64 / cfg.epochs as f64;
        }
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk);
            let projected = project(net, step)?;
            let working = projected.as_ref().unwrap_or(net);
            let cache = working.forward_cached(&batch.x)?;
            let t = teacher_logits.as_ref().map(|t| t.select_rows(chunk));
            let (loss, dlogits) = batch_loss(&cache.logits, &batch.y, &objective, t.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("loss became {loss} at epoch {epoch}, step {step}")));
            }
            let grads = working.backward(&cache, &dlogits)?;
            opt.step(net, &grads)?;
            if net.layers.iter().any(|l| l.weights.iter().chain(&l.bias).any(|v| !v.is_finite())) {
                return Err(Error::Divergence(format!("non-finite parameters at epoch {epoch}, step {step}")));
            }
            total += loss * chunk.len() as f64;
            step += 1;
        }
        let mean = total / data.len() as f64;
        let eval_net = project(net, step)?;
        let (_, acc) = evaluate(eval_net.as_ref().unwrap_or(net), data)?;
        history.push(EpochRecord { epoch, split: "train", loss: mean, accuracy: acc });
        if cfg.schedule == Schedule::Plateau && mean >= prev_loss {
            opt.lr *= 0.5;
        }
        prev_loss = mean;
    }
    Ok(history)
}

/// Ordinary training of `net` (teacher, plain student or distilled student).
pub fn train_full_precision(
    net: &mut Network,
    data: &Subset,
    cfg: &TrainConfig,
    objective: Objective<'_>,
) -> Result<Vec<EpochRecord>> {
    fit(net, data, cfg, objective, |_, _| Ok(None))
}

/// Settings of quantized distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct QdConfig {
    pub scheme: UniformScheme,
    pub bucket_size: usize,
    pub train: TrainConfig,
    /// Soft/hard mixture; `soft_weight = 0` is quantized training on labels alone.
    pub distill: DistillationConfig,
}

impl QdConfig {
    /// Deterministic `2^bits − 1`-interval grid, buckets of 256.
    pub fn for_bits(bits: u8, train: TrainConfig, distill: DistillationConfig) -> Result<Self> {
        Ok(Self {
            scheme: UniformScheme::for_bits(bits, Rounding::Deterministic)?,
            bucket_size: 256,
            train,
            distill,
        })
    }
}

#[derive(Clone, Debug)]
pub struct QdOutcome {
    pub model: QuantizedModel,
    /// The full-precision weights that accumulated the updates.
    pub full_precision: Network,
    pub history: Vec<EpochRecord>,
}

/// Quantized distillation of `student` against `teacher`.
///
/// Every step quantizes the current full-precision weights, computes the
/// distillation loss and its gradient on the quantized network, and applies
/// that gradient to the full-precision weights. The result is the
/// quantization of the final full-precision weights.
pub fn quantized_distillation(
    mut student: Network,
    teacher: &Network,
    data: &Subset,
    cfg: &QdConfig,
) -> Result<QdOutcome> {
    if teacher.output_dim() != student.output_dim() || teacher.input_dim() != student.input_dim() {
        return Err(Error::Shape("teacher and student disagree on input or output width".into()));
    }
    let seed = cfg.train.seed;
    let project = |w: &Network, step: u64| -> Result<Option<Network>> {
        let before = parameter_checksum(w);
        let q = quantize_network_uniform(w, cfg.scheme, cfg.bucket_size, seed, step)?;
        debug_assert_eq!(before, parameter_checksum(w));
        Ok(Some(q.to_network()?))
    };
    let objective = Objective::Distill { teacher, cfg: cfg.distill };
    let history = fit(&mut student, data, &cfg.train, objective, project)?;
    let final_step = u64::MAX;
    let model = quantize_network_uniform(&student, cfg.scheme, cfg.bucket_size, seed, final_step)?;
    Ok(QdOutcome { model, full_precision: student, history })
}

/// Post-training deterministic quantization at `bits` bits (`2^bits − 1`
/// intervals). Without bucketing each layer is a single bucket.
pub fn pm_quantize(net: &Network, bits: u8, bucketing: bool, bucket_size: usize) -> Result<QuantizedModel> {
    let scheme = UniformScheme::for_bits(bits, Rounding::Deterministic)?;
    if bucketing {
        quantize_network_uniform(net, scheme, bucket_size, 0, 0)
    } else {
        let whole = net.layers.iter().map(|l| l.weights.len()).max().unwrap_or(1).max(1);
        quantize_network_uniform(net, scheme, whole, 0, 0)
    }
}
