//! Bucketed linear scaling and the uniform / non-uniform quantizers.
//!
//! A weight vector `v` is split into consecutive buckets of `bucket_size`
//! values. Each bucket is mapped affinely onto `[0, 1]` using its minimum
//! `β` and range `α`, quantized there, and mapped back:
//!
//! ```text
//! Q(v) = α · Q̂((v − β) / α) + β
//! ```
//!
//! The uniform quantizer `Q̂` rounds to the grid `{0, 1/s, …, 1}`, either to
//! the nearest point (ties go down) or stochastically so that it is unbiased.
//! The non-uniform quantizer rounds to the nearest member of a trainable set
//! of points `p`, and [`quant_point_gradient`] pushes a loss gradient through
//! to those points.

use crate::error::{argument, Error, Result};
use crate::rng::ElementRng;

/// Per-bucket affine parameters of a scaled vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketScaling {
    pub bucket_size: usize,
    /// Bucket ranges `max − min`; zero only for constant buckets.
    pub alphas: Vec<f64>,
    /// Bucket minima.
    pub betas: Vec<f64>,
    pub original_len: usize,
}

impl BucketScaling {
    pub fn num_buckets(&self) -> usize {
        self.alphas.len()
    }

    #[inline]
    pub fn bucket_of(&self, index: usize) -> usize {
        index / self.bucket_size
    }

    #[inline]
    pub fn alpha_at(&self, index: usize) -> f64 {
        self.alphas[self.bucket_of(index)]
    }

    #[inline]
    pub fn beta_at(&self, index: usize) -> f64 {
        self.betas[self.bucket_of(index)]
    }

    /// Check the length invariants; used when data comes from outside.
    pub fn validate(&self) -> Result<()> {
        if self.bucket_size == 0 {
            return Err(Error::Corruption("bucket size is zero".into()));
        }
        let expected = self.original_len.div_ceil(self.bucket_size);
        if self.alphas.len() != expected || self.betas.len() != expected {
            return Err(Error::Corruption(format!(
                "expected {expected} scale pairs for {} values in buckets of {}, found {}/{}",
                self.original_len,
                self.bucket_size,
                self.alphas.len(),
                self.betas.len()
            )));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a >= 0.0) || !a.is_finite()) {
            return Err(Error::Corruption(format!("invalid bucket range {a}")));
        }
        Ok(())
    }
}

/// Values mapped into `[0, 1]` together with the scaling that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledVector {
    pub values: Vec<f64>,
    pub scaling: BucketScaling,
}

/// Rounding rule used by the uniform quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rounding {
    /// Round to the nearest grid point, ties toward the lower point.
    Deterministic,
    /// Round up with probability equal to the fractional position in the bin.
    Stochastic,
}

/// Uniform grid with `levels` intervals, i.e. `levels + 1` points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UniformScheme {
    pub levels: u32,
    pub rounding: Rounding,
}

impl UniformScheme {
    pub fn new(levels: u32, rounding: Rounding) -> Result<Self> {
        if levels == 0 {
            return Err(argument("uniform scheme needs at least one interval"));
        }
        Ok(Self { levels, rounding })
    }

    pub fn deterministic(levels: u32) -> Result<Self> {
        Self::new(levels, Rounding::Deterministic)
    }

    pub fn stochastic(levels: u32) -> Result<Self> {
        Self::new(levels, Rounding::Stochastic)
    }

    /// The scheme whose indices fill exactly `bits` bits: `2^bits − 1` intervals.
    pub fn for_bits(bits: u8, rounding: Rounding) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(argument(format!("bit width {bits} outside 1..=8")));
        }
        Self::new((1u32 << bits) - 1, rounding)
    }
}

/// Trainable non-uniform quantization points, each in `[0, 1]`.
///
/// Duplicates are allowed; a collapsed point set is something callers detect,
/// not something this type forbids.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationPoints(Vec<f64>);

impl QuantizationPoints {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(argument("at least one quantization point is required"));
        }
        if let Some(p) = points.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(argument(format!("quantization point {p} outside [0, 1]")));
        }
        Ok(Self(points))
    }

    /// `count` evenly spaced points including both endpoints (a single point sits at 0.5).
    pub fn uniform(count: usize) -> Result<Self> {
        match count {
            0 => Err(argument("at least one quantization point is required")),
            1 => Ok(Self(vec![0.5])),
            n => Ok(Self((0..n).map(|j| j as f64 / (n - 1) as f64).collect())),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Gradient step `p ← clamp(p − lr · grad, 0, 1)`.
    pub fn step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.0.len() {
            return Err(argument(format!(
                "gradient has {} entries for {} points",
                grad.len(),
                self.0.len()
            )));
        }
        for (p, g) in self.0.iter_mut().zip(grad) {
            *p = (*p - lr * g).clamp(0.0, 1.0);
        }
        Ok(())
    }
}

/// The level set a quantized vector indexes into.
#[derive(Clone, Debug, PartialEq)]
pub enum LevelScheme {
    Uniform { levels: u32 },
    NonUniform(QuantizationPoints),
}

impl LevelScheme {
    /// Number of distinct indices the scheme can produce.
    pub fn index_count(&self) -> usize {
        match self {
            LevelScheme::Uniform { levels } => *levels as usize + 1,
            LevelScheme::NonUniform(p) => p.len(),
        }
    }

    /// Smallest fixed width able to hold every index (at least one bit).
    pub fn bits(&self) -> u8 {
        bits_for(self.index_count())
    }

    /// Position of an index on the `[0, 1]` scale.
    pub fn level_value(&self, index: u32) -> Option<f64> {
        match self {
            LevelScheme::Uniform { levels } => {
                (index <= *levels).then(|| index as f64 / *levels as f64)
            }
            LevelScheme::NonUniform(p) => p.as_slice().get(index as usize).copied(),
        }
    }
}

/// Bits needed to address `count` symbols with a fixed-width code.
pub fn bits_for(count: usize) -> u8 {
    let mut bits = 1u8;
    while (1usize << bits) < count {
        bits += 1;
    }
    bits
}

/// Level indices plus everything needed to reconstruct `Q(v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedVector {
    pub indices: Vec<u32>,
    pub scaling: BucketScaling,
    pub scheme: LevelScheme,
    /// Fixed width of one index.
    pub bits: u8,
}

impl QuantizedVector {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Scale each bucket of `v` onto `[0, 1]` by its own min and range.
pub fn linear_scale(v: &[f64], bucket_size: usize) -> Result<ScaledVector> {
    if v.is_empty() {
        return Err(argument("cannot scale an empty vector"));
    }
    if bucket_size == 0 {
        return Err(argument("bucket size must be at least 1"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(argument("cannot scale non-finite weights"));
    }
    let buckets = v.len().div_ceil(bucket_size);
    let mut alphas = Vec::with_capacity(buckets);
    let mut betas = Vec::with_capacity(buckets);
    let mut values = Vec::with_capacity(v.len());
    for chunk in v.chunks(bucket_size) {
        let (lo, hi) = chunk
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            });
        let alpha = hi - lo;
        if alpha > 0.0 {
            // Clamping absorbs the last-ulp overshoot of (x − lo) / alpha.
            values.extend(chunk.iter().map(|&x| ((x - lo) / alpha).clamp(0.0, 1.0)));
        } else {
            values.extend(std::iter::repeat(0.0).take(chunk.len()));
        }
        alphas.push(alpha);
        betas.push(lo);
    }
    Ok(ScaledVector {
        values,
        scaling: BucketScaling {
            bucket_size,
            alphas,
            betas,
            original_len: v.len(),
        },
    })
}

/// Map scaled values back: `α · value + β` per bucket.
pub fn inverse_scale(sv: &ScaledVector) -> Vec<f64> {
    let s = &sv.scaling;
    sv.values
        .iter()
        .enumerate()
        .map(|(i, &x)| s.alpha_at(i) * x + s.beta_at(i))
        .collect()
}

fn check_unit_interval(values: &[f64]) -> Result<()> {
    match values.iter().position(|x| !(0.0..=1.0).contains(x)) {
        Some(i) => Err(Error::Contract(format!(
            "scaled value {} at position {i} outside [0, 1]",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Uniform quantization onto `{0, 1/s, …, 1}`.
///
/// `index_i = ⌊v̂_i s⌋ + ξ_i` where `k_i = v̂_i s − ⌊v̂_i s⌋` and `ξ_i` is
/// `[k_i > 1/2]` (deterministic) or a Bernoulli(`k_i`) draw (stochastic).
/// Stochastic mode rewinds `rng` to element 0 and consumes exactly one draw
/// per element, so element `i` always sees draw `i` of the stream.
pub fn uniform_quantize(
    sv: &ScaledVector,
    scheme: UniformScheme,
    rng: Option<&mut ElementRng>,
) -> Result<QuantizedVector> {
    check_unit_interval(&sv.values)?;
    let s = scheme.levels;
    if s == 0 {
        return Err(argument("uniform scheme needs at least one interval"));
    }
    let sf = s as f64;
    let indices = match scheme.rounding {
        Rounding::Deterministic => sv
            .values
            .iter()
            .map(|&x| {
                let (lower, frac) = split_bin(x, sf, s);
                lower + u32::from(frac > 0.5)
            })
            .collect(),
        Rounding::Stochastic => {
            let rng = rng.ok_or_else(|| argument("stochastic rounding needs a random stream"))?;
            rng.seek(0);
            sv.values
                .iter()
                .map(|&x| {
                    let (lower, frac) = split_bin(x, sf, s);
                    let u = rng.next_unit();
                    lower + u32::from(u < frac)
                })
                .collect()
        }
    };
    let scheme = LevelScheme::Uniform { levels: s };
    Ok(QuantizedVector {
        indices,
        scaling: sv.scaling.clone(),
        bits: scheme.bits(),
        scheme,
    })
}

/// Lower grid index and fractional position `k` of `x` in its bin.
#[inline]
pub(crate) fn split_bin(x: f64, sf: f64, s: u32) -> (u32, f64) {
    let scaled = x * sf;
    let floor = scaled.floor();
    let lower = (floor as u32).min(s);
    if lower == s {
        (s, 0.0)
    } else {
        (lower, scaled - floor)
    }
}

/// Index of the point nearest to `x`; ties go to the lowest index.
#[inline]
pub fn nearest_point(x: f64, points: &[f64]) -> u32 {
    let mut best = 0usize;
    let mut best_dist = (x - points[0]).abs();
    for (j, &p) in points.iter().enumerate().skip(1) {
        let d = (x - p).abs();
        if d < best_dist {
            best = j;
            best_dist = d;
        }
    }
    best as u32
}

/// Deterministic non-uniform quantization: each value goes to its nearest point.
pub fn nonuniform_quantize(sv: &ScaledVector, points: &QuantizationPoints) -> QuantizedVector {
    let p = points.as_slice();
    let indices = sv.values.iter().map(|&x| nearest_point(x, p)).collect();
    let scheme = LevelScheme::NonUniform(points.clone());
    QuantizedVector {
        indices,
        scaling: sv.scaling.clone(),
        bits: scheme.bits(),
        scheme,
    }
}

/// Reconstruct `Q(v)`.
pub fn dequantize(qv: &QuantizedVector) -> Result<Vec<f64>> {
    let s = &qv.scaling;
    if qv.indices.len() != s.original_len {
        return Err(Error::Corruption(format!(
            "{} indices for a vector of length {}",
            qv.indices.len(),
            s.original_len
        )));
    }
    qv.indices
        .iter()
        .enumerate()
        .map(|(i, &idx)| {
            let level = qv.scheme.level_value(idx).ok_or_else(|| {
                Error::Corruption(format!("level index {idx} at position {i} out of range"))
            })?;
            Ok(s.alpha_at(i) * level + s.beta_at(i))
        })
        .collect()
}

/// Gradient of the loss with respect to the non-uniform points.
///
/// `∂Q(v)_i / ∂p_j` is the bucket range `α_i` when weight `i` was assigned to
/// `p_j` and zero otherwise, so the chain rule sums `α_i · ∂l/∂Q(v)_i` over
/// each point's assignees. Points nobody uses get exactly zero.
pub fn quant_point_gradient(qv: &QuantizedVector, grad_wq: &[f64]) -> Result<Vec<f64>> {
    let LevelScheme::NonUniform(points) = &qv.scheme else {
        return Err(argument("point gradient is only defined for non-uniform schemes"));
    };
    if grad_wq.len() != qv.indices.len() {
        return Err(argument(format!(
            "gradient has {} entries for {} quantized weights",
            grad_wq.len(),
            qv.indices.len()
        )));
    }
    let mut grad = vec![0.0; points.len()];
    for (i, (&idx, &g)) in qv.indices.iter().zip(grad_wq).enumerate() {
        let slot = grad
            .get_mut(idx as usize)
            .ok_or_else(|| Error::Corruption(format!("level index {idx} out of range")))?;
        *slot += qv.scaling.alpha_at(i) * g;
    }
    Ok(grad)
}

/// Empirical quantile with linear interpolation between order statistics of `sorted`.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Starting points at the `(j − ½)/s` quantiles of the scaled weights, so
/// each point begins with an equal share of assignees.
pub fn quantile_init(v: &[f64], s: usize, bucket_size: usize) -> Result<QuantizationPoints> {
    if s == 0 {
        return Err(argument("need at least one quantization point"));
    }
    let mut scaled = linear_scale(v, bucket_size)?.values;
    scaled.sort_by(f64::total_cmp);
    let points = (1..=s)
        .map(|j| quantile_sorted(&scaled, (j as f64 - 0.5) / s as f64).clamp(0.0, 1.0))
        .collect();
    QuantizationPoints::new(points)
}

/// Scale-then-quantize convenience for the uniform scheme.
pub fn quantize_uniform(
    v: &[f64],
    bucket_size: usize,
    scheme: UniformScheme,
    rng: Option<&mut ElementRng>,
) -> Result<QuantizedVector> {
    uniform_quantize(&linear_scale(v, bucket_size)?, scheme, rng)
}

/// Scale-then-quantize convenience for the non-uniform scheme.
pub fn quantize_nonuniform(
    v: &[f64],
    bucket_size: usize,
    points: &QuantizationPoints,
) -> Result<QuantizedVector> {
    Ok(nonuniform_quantize(&linear_scale(v, bucket_size)?, points))
}
