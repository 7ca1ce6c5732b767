//! Differentiable quantization and its heuristics: quantile starting points
//! and gradient-norm allocation of quantization points across layers.

use rand::seq::SliceRandom;

use super::model::{quantize_network_nonuniform, QuantizedModel};
use crate::data::Subset;
use crate::error::{argument, Error, Result};
use crate::nn::{cross_entropy, distillation_loss, DistillationConfig, Gradients, Network};
use crate::quantcore::{quant_point_gradient, quantile_init, QuantizationPoints};
use crate::rng::{self, Purpose};

/// Loss optimized by differentiable quantization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DqLoss {
    /// The task's own cross-entropy.
    Task,
    /// Distillation loss with the unquantized model as teacher.
    DistillFromUnquantized(DistillationConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointInit {
    Uniform,
    Quantile,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DqConfig {
    /// Bits per layer before any redistribution; a layer with `b` bits gets `2^b` points.
    pub bits_per_layer: Vec<u8>,
    pub bucket_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Optimization steps on the points.
    pub iterations: usize,
    pub batch_size: usize,
    pub loss: DqLoss,
    pub init: PointInit,
    /// Reallocate the total point budget in proportion to layer gradient norms.
    pub redistribute: bool,
    /// Minibatches averaged when estimating gradient norms.
    pub sample_batches: usize,
    pub seed: u64,
}

impl DqConfig {
    pub fn uniform_bits(layers: usize, bits: u8) -> Self {
        Self {
            bits_per_layer: vec![bits; layers],
            bucket_size: 256,
            lr: 0.01,
            momentum: 0.9,
            iterations: 500,
            batch_size: 64,
            loss: DqLoss::DistillFromUnquantized(DistillationConfig::default()),
            init: PointInit::Quantile,
            redistribute: true,
            sample_batches: 10,
            seed: 0,
        }
    }

    fn validate(&self, layers: usize) -> Result<()> {
        if self.bits_per_layer.len() != layers {
            return Err(argument(format!(
                "{} bit widths for {layers} layers",
                self.bits_per_layer.len()
            )));
        }
        if let Some(b) = self.bits_per_layer.iter().find(|b| !(1..=8).contains(*b)) {
            return Err(argument(format!("bit width {b} outside 1..=8")));
        }
        if self.batch_size == 0 || self.sample_batches == 0 {
            return Err(argument("batch size and sample batches must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(argument("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DqOutcome {
    pub points: Vec<QuantizationPoints>,
    pub model: QuantizedModel,
    /// Points per layer after redistribution.
    pub allocation: Vec<usize>,
    /// Mean training loss of the quantized model per logging interval.
    pub losses: Vec<f64>,
    /// Collapse notices: a point holding more than 95% of a layer's weights.
    pub warnings: Vec<String>,
}

/// Where the reference outputs of a distillation loss come from.
#[derive(Clone, Copy, Debug)]
pub struct Reference<'a> {
    pub teacher: &'a Network,
    pub cfg: DistillationConfig,
}

/// `‖mean over m minibatches of ∂l/∂v‖₂` for every layer's weight vector `v`
/// of `model`. The loss is the label cross-entropy, or the distillation loss
/// against `reference` when given.
pub fn gradient_norms(
    model: &Network,
    data: &Subset,
    reference: Option<Reference<'_>>,
    sample_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if sample_batches == 0 || batch_size == 0 {
        return Err(argument("need at least one sample batch of positive size"));
    }
    if data.is_empty() {
        return Err(argument("empty data"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut mean = Gradients::zeros_like(model);
    let per_epoch = data.len().div_ceil(batch_size);
    for m in 0..sample_batches {
        let epoch = m / per_epoch;
        if m % per_epoch == 0 {
            order.sort_unstable();
            order.shuffle(&mut rng::stream(seed, Purpose::Other(7), epoch as u64));
        }
        let start = (m % per_epoch) * batch_size;
        let rows = &order[start..(start + batch_size).min(data.len())];
        let batch = data.batch(rows);
        let cache = model.forward_cached(&batch.x)?;
        let (_, dl) = match reference {
            None => cross_entropy(&cache.logits, &batch.y)?,
            Some(r) => distillation_loss(&cache.logits, &r.teacher.forward(&batch.x)?, &batch.y, &r.cfg)?,
        };
        mean.add_scaled(&model.backward(&cache, &dl)?, 1.0 / sample_batches as f64);
    }
    Ok(mean
        .layers
        .iter()
        .map(|l| l.weights.iter().map(|g| g * g).sum::<f64>().sqrt())
        .collect())
}

const MIN_POINTS: usize = 2;
const MAX_POINTS: usize = 256;

/// Split `base_points · L` points across `L` layers in proportion to `norms`,
/// each layer clamped to `[2, 256]`, rounding by largest remainder so the
/// total is conserved exactly. All-zero norms fall back to `base_points` each.
pub fn allocate_points(norms: &[f64], base_points: usize) -> Result<Vec<usize>> {
    let l = norms.len();
    if l == 0 {
        return Ok(Vec::new());
    }
    if !(MIN_POINTS..=MAX_POINTS).contains(&base_points) {
        return Err(argument(format!("base point count {base_points} outside [2, 256]")));
    }
    if norms.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
        return Err(argument("gradient norms must be finite and non-negative"));
    }
    let total = base_points * l;
    if norms.iter().sum::<f64>() == 0.0 {
        return Ok(vec![base_points; l]);
    }

    // Proportional shares, fixing clamped layers and re-splitting the rest.
    let mut fixed: Vec<Option<f64>> = vec![None; l];
    let mut share = vec![0.0; l];
    loop {
        let budget = total as f64 - fixed.iter().flatten().sum::<f64>();
        let free: Vec<usize> = (0..l).filter(|&i| fixed[i].is_none()).collect();
        if free.is_empty() {
            break;
        }
        let gsum: f64 = free.iter().map(|&i| norms[i]).sum();
        let mut clamped = false;
        for &i in &free {
            share[i] = if gsum > 0.0 {
                budget * norms[i] / gsum
            } else {
                budget / free.len() as f64
            };
        }
        for &i in &free {
            if share[i] < MIN_POINTS as f64 {
                fixed[i] = Some(MIN_POINTS as f64);
                clamped = true;
            } else if share[i] > MAX_POINTS as f64 {
                fixed[i] = Some(MAX_POINTS as f64);
                clamped = true;
            }
        }
        if !clamped {
            break;
        }
    }
    for i in 0..l {
        if let Some(v) = fixed[i] {
            share[i] = v;
        }
    }

    let mut points: Vec<usize> = share.iter().map(|s| s.floor() as usize).collect();
    let mut remainder: Vec<(usize, f64)> = share.iter().enumerate().map(|(i, s)| (i, s - s.floor())).collect();
    let assigned: usize = points.iter().sum();
    if assigned < total {
        remainder.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut deficit = total - assigned;
        while deficit > 0 {
            let before = deficit;
            for &(i, _) in &remainder {
                if deficit > 0 && points[i] < MAX_POINTS {
                    points[i] += 1;
                    deficit -= 1;
                }
            }
            if before == deficit {
                break;
            }
        }
    } else if assigned > total {
        remainder.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let mut surplus = assigned - total;
        while surplus > 0 {
            let before = surplus;
            for &(i, _) in &remainder {
                if surplus > 0 && points[i] > MIN_POINTS {
                    points[i] -= 1;
                    surplus -= 1;
                }
            }
            if before == surplus {
                break;
            }
        }
    }
    debug_assert_eq!(points.iter().sum::<usize>(), total);
    Ok(points)
}

/// Points per layer for a base width of `base_bits`.
///
/// The gradient norms are taken on `model` quantized with `base_bits`
/// points per layer from `init`, so layers that lose the most to
/// quantization receive more points.
pub fn redistribute_bits(model: &Network, data: &Subset, base_bits: u8, cfg: &DqConfig) -> Result<Vec<usize>> {
    if !(1..=8).contains(&base_bits) {
        return Err(argument(format!("bit width {base_bits} outside 1..=8")));
    }
    let base = 1usize << base_bits;
    let points = initial_points(model, &vec![base; model.layers.len()], cfg)?;
    let quantized = quantize_network_nonuniform(model, &points, cfg.bucket_size)?.to_network()?;
    let reference = match cfg.loss {
        DqLoss::Task => None,
        DqLoss::DistillFromUnquantized(d) => Some(Reference { teacher: model, cfg: d }),
    };
    let norms = gradient_norms(&quantized, data, reference, cfg.sample_batches, cfg.batch_size, cfg.seed)?;
    allocate_points(&norms, base)
}

fn initial_points(model: &Network, counts: &[usize], cfg: &DqConfig) -> Result<Vec<QuantizationPoints>> {
    model
        .layers
        .iter()
        .zip(counts)
        .map(|(l, &s)| match cfg.init {
            PointInit::Uniform => QuantizationPoints::uniform(s),
            PointInit::Quantile => quantile_init(&l.weights, s, cfg.bucket_size),
        })
        .collect()
}

fn collapse_warnings(q: &QuantizedModel, iteration: usize) -> Vec<String> {
    q.layers
        .iter()
        .enumerate()
        .filter_map(|(li, l)| {
            let counts = crate::sizing::index_histogram(&l.weights);
            let max = counts.iter().copied().max().unwrap_or(0);
            let n = l.weights.len().max(1);
            (max as f64 > 0.95 * n as f64).then(|| {
                format!("iteration {iteration}: layer {li} has {max} of {n} weights on one point")
            })
        })
        .collect()
}

/// Train the non-uniform quantization points of a frozen model.
///
/// Each iteration quantizes the weights with the current points, runs the
/// forward and backward pass of the chosen loss on the quantized network,
/// maps the weight gradients to point gradients, and takes a clamped step on
/// the points only.
pub fn differentiable_quantization(model: &Network, data: &Subset, cfg: &DqConfig) -> Result<DqOutcome> {
    let layers = model.layers.len();
    cfg.validate(layers)?;
    if data.is_empty() {
        return Err(argument("empty data"));
    }
    let allocation = if cfg.redistribute {
        let base = *cfg.bits_per_layer.iter().max().expect("validated non-empty");
        redistribute_bits(model, data, base, cfg)?
    } else {
        cfg.bits_per_layer.iter().map(|&b| 1usize << b).collect()
    };
    let mut points = initial_points(model, &allocation, cfg)?;

    let teacher_logits = match cfg.loss {
        DqLoss::DistillFromUnquantized(_) => Some(model.forward(&data.x)?),
        DqLoss::Task => None,
    };
    // Heavy-ball buffers over the point vectors.
    let mut velocity: Vec<Vec<f64>> = points.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut warnings = Vec::new();
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let log_every = per_epoch.max(1);
    let mut running = 0.0;
    let mut running_n = 0usize;
    let frozen = model.clone();

    for it in 0..cfg.iterations {
        if it % per_epoch == 0 {
            order.sort_unstable();
            order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, (it / per_epoch) as u64));
        }
        let start = (it % per_epoch) * cfg.batch_size;
        let rows = &order[start..(start + cfg.batch_size).min(data.len())];
        let batch = data.batch(rows);

        let q = quantize_network_nonuniform(&frozen, &points, cfg.bucket_size)?;
        if it == 0 {
            warnings.extend(collapse_warnings(&q, it));
        }
        let qnet = q.to_network()?;
        let cache = qnet.forward_cached(&batch.x)?;
        let (loss, dl) = match (&cfg.loss, &teacher_logits) {
            (DqLoss::Task, _) => cross_entropy(&cache.logits, &batch.y)?,
            (DqLoss::DistillFromUnquantized(d), Some(t)) => {
                distillation_loss(&cache.logits, &t.select_rows(rows), &batch.y, d)?
            }
            (DqLoss::DistillFromUnquantized(_), None) => unreachable!("teacher logits computed above"),
        };
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss became {loss} at iteration {it}")));
        }
        running += loss;
        running_n += 1;
        if running_n == log_every || it + 1 == cfg.iterations {
            losses.push(running / running_n as f64);
            running = 0.0;
            running_n = 0;
        }
        let grads = qnet.backward(&cache, &dl)?;
        // Linear decay to zero keeps the final assignment from jittering.
        let lr = cfg.lr * (cfg.iterations - it) as f64 / cfg.iterations as f64;
        for ((p, v), (ql, gl)) in points.iter_mut().zip(&mut velocity).zip(q.layers.iter().zip(&grads.layers)) {
            let gp = quant_point_gradient(&ql.weights, &gl.weights)?;
            for (vi, gi) in v.iter_mut().zip(&gp) {
                *vi = cfg.momentum * *vi + gi;
            }
            p.step(v, lr)?;
        }
    }
    debug_assert_eq!(&frozen, model);

    let model_q = quantize_network_nonuniform(model, &points, cfg.bucket_size)?;
    warnings.extend(collapse_warnings(&model_q, cfg.iterations));
    Ok(DqOutcome { points, model: model_q, allocation, losses, warnings })
}
