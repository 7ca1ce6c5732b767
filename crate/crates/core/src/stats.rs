//! Monte-Carlo study of stochastic quantization noise.
//!
//! For vectors `v`, `x` the noise of a quantized scalar product is
//! `ε = Q(v)ᵀx − vᵀx`. It has mean zero, and divided by its exact standard
//! deviation `s_n` it approaches a standard normal as `n` grows. The same
//! holds when `x` is quantized as well.

use std::io::Write;

use statrs::function::erf::erfc;

use crate::error::{argument, Error, Result};
use crate::quantcore::{linear_scale, split_bin, uniform_quantize, BucketScaling, ScaledVector, UniformScheme};
use crate::rng::{self, ElementRng, Purpose};

/// A bounded distribution for the entries of `v` or `x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Uniform { low: f64, high: f64 },
    /// Normal truncated to `mean ± bound · std` by rejection.
    Gaussian { mean: f64, std: f64, bound: f64 },
}

impl Distribution {
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Distribution::Uniform { low, high } => (low, high),
            Distribution::Gaussian { mean, std, bound } => (mean - bound * std, mean + bound * std),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Distribution::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            Distribution::Gaussian { mean, std, bound } => {
                mean.is_finite() && std.is_finite() && std > 0.0 && bound.is_finite() && bound > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(argument(format!("invalid or unbounded distribution {self:?}")))
        }
    }

    fn sample(&self, rng: &mut impl rand::RngCore) -> f64 {
        match *self {
            Distribution::Uniform { low, high } => low + (high - low) * rng::unit(rng),
            Distribution::Gaussian { mean, std, bound } => loop {
                let z = rng::normal(rng);
                if z.abs() <= bound {
                    return mean + std * z;
                }
            },
        }
    }

    /// `uniform(a,b)` or `gaussian(mu,sigma,bound)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, rest) = s
            .split_once('(')
            .ok_or_else(|| argument(format!("expected name(args) in distribution '{s}'")))?;
        let args = rest
            .strip_suffix(')')
            .ok_or_else(|| argument(format!("missing ')' in distribution '{s}'")))?
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| argument(format!("bad number '{a}' in '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        let d = match (name.trim(), args.as_slice()) {
            ("uniform", [low, high]) => Distribution::Uniform { low: *low, high: *high },
            ("gaussian", [mean, std]) => Distribution::Gaussian { mean: *mean, std: *std, bound: 4.0 },
            ("gaussian", [mean, std, bound]) => Distribution::Gaussian { mean: *mean, std: *std, bound: *bound },
            _ => return Err(argument(format!("unknown distribution '{s}'"))),
        };
        d.validate()?;
        Ok(d)
    }
}

impl std::fmt::Display for Distribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Distribution::Uniform { low, high } => write!(f, "uniform({low},{high})"),
            Distribution::Gaussian { mean, std, bound } => write!(f, "gaussian({mean},{std},{bound})"),
        }
    }
}

/// How values are mapped onto `[0, 1]` before quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseScaling {
    /// Bucketed min/range scaling, as used for weights.
    Buckets(usize),
    /// One affine map from the distribution's support.
    Support,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseStudyConfig {
    pub n: usize,
    /// Quantization intervals; the grid has `s + 1` levels.
    pub s: u32,
    pub scaling: NoiseScaling,
    pub trials: usize,
    /// Quantize `x` as well as `v`.
    pub quantize_inputs: bool,
    pub weights: Distribution,
    pub inputs: Distribution,
    /// Draw fresh `v`, `x` every trial instead of once per study.
    pub redraw: bool,
    pub seed: u64,
    pub threads: usize,
}

impl NoiseStudyConfig {
    pub fn new(n: usize, s: u32, trials: usize, seed: u64) -> Self {
        let unit = Distribution::Uniform { low: -1.0, high: 1.0 };
        Self {
            n,
            s,
            scaling: NoiseScaling::Buckets(256),
            trials,
            quantize_inputs: false,
            weights: unit,
            inputs: unit,
            redraw: false,
            seed,
            threads: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.trials == 0 {
            return Err(argument("dimension and trial count must be positive"));
        }
        if self.s == 0 {
            return Err(argument("need at least one quantization interval"));
        }
        if self.scaling == NoiseScaling::Buckets(0) {
            return Err(argument("bucket size must be positive"));
        }
        self.weights.validate()?;
        self.inputs.validate()
    }
}

/// Noise of one trial and its exact standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseTrial {
    pub epsilon: f64,
    pub s_n: f64,
}

struct Operand {
    scaled: ScaledVector,
    /// `α v̂ + β`, the value the quantizer is unbiased for.
    center: Vec<f64>,
    /// `E[Q(v_i)²]`.
    second: Vec<f64>,
}

fn scale(v: &[f64], dist: &Distribution, scaling: NoiseScaling) -> Result<ScaledVector> {
    match scaling {
        NoiseScaling::Buckets(b) => linear_scale(v, b),
        NoiseScaling::Support => {
            let (lo, hi) = dist.support();
            let alpha = hi - lo;
            Ok(ScaledVector {
                values: v.iter().map(|&x| ((x - lo) / alpha).clamp(0.0, 1.0)).collect(),
                scaling: BucketScaling {
                    bucket_size: v.len(),
                    alphas: vec![alpha],
                    betas: vec![lo],
                    original_len: v.len(),
                },
            })
        }
    }
}

fn operand(v: &[f64], dist: &Distribution, cfg: &NoiseStudyConfig) -> Result<Operand> {
    let scaled = scale(v, dist, cfg.scaling)?;
    let sf = cfg.s as f64;
    let mut center = Vec::with_capacity(v.len());
    let mut second = Vec::with_capacity(v.len());
    for (i, &y) in scaled.values.iter().enumerate() {
        let (a, b) = (scaled.scaling.alpha_at(i), scaled.scaling.beta_at(i));
        let (l, k) = split_bin(y, sf, cfg.s);
        let lo = a * l as f64 / sf + b;
        let hi = a * (l + 1) as f64 / sf + b;
        center.push(a * y + b);
        second.push((1.0 - k) * lo * lo + k * hi * hi);
    }
    Ok(Operand { scaled, center, second })
}

/// Exact `s_n` for the pair; `None` when it is zero up to rounding.
fn analytic_sd(vo: &Operand, xo: &Operand, x: &[f64], cfg: &NoiseStudyConfig) -> Option<f64> {
    let sf = cfg.s as f64;
    let mut var = 0.0;
    let mut magnitude = 0.0;
    for i in 0..x.len() {
        let a = vo.scaled.scaling.alpha_at(i);
        if cfg.quantize_inputs {
            let prod = vo.center[i] * xo.center[i];
            var += vo.second[i] * xo.second[i] - prod * prod;
            magnitude += vo.second[i] * xo.second[i];
        } else {
            let (_, k) = split_bin(vo.scaled.values[i], sf, cfg.s);
            var += x[i] * x[i] * a * a * k * (1.0 - k) / (sf * sf);
            magnitude += x[i] * x[i] * a * a / (sf * sf);
        }
    }
    // Grid points recovered through floating-point scaling leave k ~ 1e-16.
    (var > 1e-20 * magnitude && var > 0.0).then(|| var.sqrt())
}

fn draw(dist: &Distribution, n: usize, seed: u64, id: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, Purpose::Noise, id);
    (0..n).map(|_| dist.sample(&mut r)).collect()
}

fn run_trial(vo: &Operand, xo: &Operand, x: &[f64], cfg: &NoiseStudyConfig, trial: usize) -> Result<f64> {
    let scheme = UniformScheme::stochastic(cfg.s)?;
    let seed = rng::derive_seed(cfg.seed, Purpose::Noise, trial as u64);
    let qv = uniform_quantize(&vo.scaled, scheme, Some(&mut ElementRng::new(seed, 0, 0)))?;
    let sf = cfg.s as f64;
    let level = |sv: &ScaledVector, i: usize, idx: u32| sv.scaling.alpha_at(i) * idx as f64 / sf + sv.scaling.beta_at(i);
    if cfg.quantize_inputs {
        let qx = uniform_quantize(&xo.scaled, scheme, Some(&mut ElementRng::new(seed, 1, 0)))?;
        Ok((0..x.len())
            .map(|i| {
                level(&vo.scaled, i, qv.indices[i]) * level(&xo.scaled, i, qx.indices[i])
                    - vo.center[i] * xo.center[i]
            })
            .sum())
    } else {
        Ok((0..x.len())
            .map(|i| (level(&vo.scaled, i, qv.indices[i]) - vo.center[i]) * x[i])
            .sum())
    }
}

/// Raw noise and exact standard deviation for every trial, in trial order.
///
/// Trials draw from streams keyed by `(seed, trial)`, so the result does not
/// depend on `threads`.
pub fn noise_trials(cfg: &NoiseStudyConfig) -> Result<Vec<NoiseTrial>> {
    cfg.validate()?;
    let prepare = |id: u64| -> Result<(Operand, Operand, Vec<f64>)> {
        let v = draw(&cfg.weights, cfg.n, cfg.seed, 2 * id);
        let x = draw(&cfg.inputs, cfg.n, cfg.seed, 2 * id + 1);
        let vo = operand(&v, &cfg.weights, cfg)?;
        let xo = operand(&x, &cfg.inputs, cfg)?;
        Ok((vo, xo, x))
    };
    let degenerate = || {
        Error::DegenerateVariance(
            "s_n = 0: every weight lies on the quantization grid, so the noise is identically zero".into(),
        )
    };
    let fixed = if cfg.redraw { None } else { Some(prepare(0)?) };
    let fixed_sd = match &fixed {
        Some((vo, xo, x)) => Some(analytic_sd(vo, xo, x, cfg).ok_or_else(degenerate)?),
        None => None,
    };

    let work = |range: std::ops::Range<usize>| -> Result<Vec<NoiseTrial>> {
        range
            .map(|t| {
                let owned;
                let (vo, xo, x, s_n) = match (&fixed, fixed_sd) {
                    (Some((vo, xo, x)), Some(sd)) => (vo, xo, x, sd),
                    _ => {
                        owned = prepare(t as u64 + 1)?;
                        let sd = analytic_sd(&owned.0, &owned.1, &owned.2, cfg).ok_or_else(degenerate)?;
                        (&owned.0, &owned.1, &owned.2, sd)
                    }
                };
                Ok(NoiseTrial { epsilon: run_trial(vo, xo, x, cfg, t)?, s_n })
            })
            .collect()
    };

    let threads = cfg.threads.clamp(1, cfg.trials);
    if threads == 1 {
        return work(0..cfg.trials);
    }
    let chunk = cfg.trials.div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let work = &work;
                let range = (w * chunk).min(cfg.trials)..((w + 1) * chunk).min(cfg.trials);
                scope.spawn(move || work(range))
            })
            .collect();
        let mut out = Vec::with_capacity(cfg.trials);
        for h in handles {
            out.extend(h.join().expect("noise worker panicked")?);
        }
        Ok(out)
    })
}

/// Standardized noise `ε / s_n`, one value per trial.
pub fn noise_samples(cfg: &NoiseStudyConfig) -> Result<Vec<f64>> {
    Ok(noise_trials(cfg)?.into_iter().map(|t| t.epsilon / t.s_n).collect())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnostics {
    pub samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// `sup |F̂ − Φ|` against the standard normal, with no fitted parameters.
    pub ks_statistic: f64,
}

pub const MIN_DIAGNOSTIC_SAMPLES: usize = 1000;

pub fn normality_diagnostics(samples: &[f64]) -> Result<Diagnostics> {
    let n = samples.len();
    if n < MIN_DIAGNOSTIC_SAMPLES {
        return Err(argument(format!("{n} samples; diagnostics need at least {MIN_DIAGNOSTIC_SAMPLES}")));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(argument("samples must be finite"));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in samples {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    if m2 <= 1e-24 * mean.abs().max(1.0).powi(2) {
        return Err(Error::DegenerateVariance("samples have zero variance".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let ks = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max);
    Ok(Diagnostics {
        samples: n,
        mean,
        variance: m2,
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        ks_statistic: ks,
    })
}

/// Exact second and third moments of one stochastically quantized value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMoments {
    pub value: f64,
    pub second: f64,
    pub third: f64,
    pub lower: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub checked: usize,
    pub violations: Vec<PointMoments>,
}

/// Moments of `Q̂(v̂)` from its two-point law, and the check
/// `l²/s² ≤ E[Q̂²] ≤ (l+1)²/s²`, `l³/s³ ≤ E[Q̂³] ≤ (l+1)³/s³` with
/// `l = ⌊v̂ s⌋`.
pub fn point_moments(v: f64, s: u32) -> Result<PointMoments> {
    if !(0.0..=1.0).contains(&v) {
        return Err(argument(format!("scaled value {v} outside [0, 1]")));
    }
    if s == 0 {
        return Err(argument("need at least one quantization interval"));
    }
    let sf = s as f64;
    let (l, k) = split_bin(v, sf, s);
    let lo = l as f64 / sf;
    let hi = (l + 1) as f64 / sf;
    Ok(PointMoments {
        value: v,
        second: (1.0 - k) * lo * lo + k * hi * hi,
        third: (1.0 - k) * lo.powi(3) + k * hi.powi(3),
        lower: l,
    })
}

pub fn moment_bound_check(values: &[f64], s: u32) -> Result<MomentReport> {
    let sf = s as f64;
    // Convex combinations can overshoot an endpoint by an ulp.
    let within = |x: f64, lo: f64, hi: f64| x >= lo * (1.0 - 1e-12) && x <= hi * (1.0 + 1e-12);
    let mut violations = Vec::new();
    for &v in values {
        let m = point_moments(v, s)?;
        let l = m.lower as f64;
        let ok = within(m.second, (l / sf).powi(2), ((l + 1.0) / sf).powi(2))
            && within(m.third, (l / sf).powi(3), ((l + 1.0) / sf).powi(3));
        if !ok {
            violations.push(m);
        }
    }
    Ok(MomentReport { checked: values.len(), violations })
}

/// One line of a study report.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub n: usize,
    pub s: u32,
    pub scaling: String,
    pub weights: String,
    pub inputs: String,
    pub quantize_inputs: bool,
    pub trials: usize,
    pub diagnostics: Diagnostics,
    /// Empirical standard deviation of `ε` over the mean analytic `s_n`.
    pub sd_ratio: f64,
}

pub const STUDY_HEADER: [&str; 14] = [
    "n",
    "s",
    "scaling",
    "weights",
    "inputs",
    "quantize_inputs",
    "trials",
    "mean",
    "variance",
    "skewness",
    "excess_kurtosis",
    "ks",
    "sd_ratio",
    "samples",
];

pub fn study_row(cfg: &NoiseStudyConfig) -> Result<StudyRow> {
    let trials = noise_trials(cfg)?;
    let z: Vec<f64> = trials.iter().map(|t| t.epsilon / t.s_n).collect();
    let diagnostics = normality_diagnostics(&z)?;
    let nf = trials.len() as f64;
    let eps_mean = trials.iter().map(|t| t.epsilon).sum::<f64>() / nf;
    let eps_var = trials.iter().map(|t| (t.epsilon - eps_mean).powi(2)).sum::<f64>() / nf;
    let sn_mean = trials.iter().map(|t| t.s_n).sum::<f64>() / nf;
    Ok(StudyRow {
        n: cfg.n,
        s: cfg.s,
        scaling: match cfg.scaling {
            NoiseScaling::Buckets(b) => format!("buckets({b})"),
            NoiseScaling::Support => "support".into(),
        },
        weights: cfg.weights.to_string(),
        inputs: cfg.inputs.to_string(),
        quantize_inputs: cfg.quantize_inputs,
        trials: cfg.trials,
        diagnostics,
        sd_ratio: eps_var.sqrt() / sn_mean,
    })
}

pub fn write_study_csv<W: Write>(w: W, rows: &[StudyRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(STUDY_HEADER).map_err(io)?;
    for r in rows {
        let d = &r.diagnostics;
        out.write_record([
            r.n.to_string(),
            r.s.to_string(),
            r.scaling.clone(),
            r.weights.clone(),
            r.inputs.clone(),
            r.quantize_inputs.to_string(),
            r.trials.to_string(),
            format!("{:.6e}", d.mean),
            format!("{:.6}", d.variance),
            format!("{:.6}", d.skewness),
            format!("{:.6}", d.excess_kurtosis),
            format!("{:.6}", d.ks_statistic),
            format!("{:.6}", r.sd_ratio),
            d.samples.to_string(),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}
