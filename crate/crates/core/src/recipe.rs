//! The desk-scale experiment: a teacher, a smaller student, and the
//! quantization methods applied to the student on a synthetic task.

use crate::data::{synth_dataset, Dataset, SynthSpec};
use crate::error::Result;
use crate::nn::{DistillationConfig, Network};
use crate::quantcore::{Rounding, UniformScheme};
use crate::train::{
    differentiable_quantization, evaluate, pm_quantize, quantized_distillation, train_full_precision,
    DqConfig, DqLoss, DqOutcome, EpochRecord, Objective, PointInit, QdConfig, QdOutcome, Schedule,
    QuantizedModel, TrainConfig,
};

/// Every setting of the desk experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub data: SynthSpec,
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub distill: DistillationConfig,
    pub bucket_size: usize,
    pub rounding: Rounding,
    pub dq_lr: f64,
    pub dq_momentum: f64,
    pub dq_iterations: usize,
    pub dq_batch_size: usize,
    pub dq_sample_batches: usize,
    pub dq_init: PointInit,
    pub dq_redistribute: bool,
    pub seed: u64,
}

impl Default for Recipe {
    fn default() -> Self {
        let train = TrainConfig { epochs: 60, batch_size: 32, lr: 0.05, momentum: 0.9, schedule: Schedule::Linear, seed: 0 };
        Self {
            data: SynthSpec { turns: 1.5, ..SynthSpec::spirals(2000, 2, 0.2, 0) },
            teacher_hidden: vec![64, 64, 64],
            student_hidden: vec![32],
            teacher_train: train.clone(),
            student_train: train,
            distill: DistillationConfig::default(),
            // Desk-scale layers hold 64 weights; buckets of 256 would make
            // bucketed and unbucketed quantization identical.
            bucket_size: 8,
            rounding: Rounding::Deterministic,
            dq_lr: 0.001,
            dq_momentum: 0.0,
            dq_iterations: 1000,
            dq_batch_size: 64,
            dq_sample_batches: 10,
            dq_init: PointInit::Quantile,
            dq_redistribute: true,
            seed: 0,
        }
    }
}

impl Recipe {
    /// The same recipe with every seed derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.teacher_train.seed = seed;
        self.student_train.seed = seed;
        self
    }

    pub fn dataset(&self) -> Result<Dataset> {
        synth_dataset(&self.data)
    }

    fn sizes(hidden: &[usize], ds: &Dataset) -> Vec<usize> {
        let mut s = vec![ds.features.cols()];
        s.extend_from_slice(hidden);
        s.push(ds.classes);
        s
    }

    pub fn teacher_sizes(&self, ds: &Dataset) -> Vec<usize> {
        Self::sizes(&self.teacher_hidden, ds)
    }

    pub fn student_sizes(&self, ds: &Dataset) -> Vec<usize> {
        Self::sizes(&self.student_hidden, ds)
    }

    fn fresh_student(&self, ds: &Dataset) -> Result<Network> {
        Network::new(&self.student_sizes(ds), self.seed.wrapping_add(1))
    }

    pub fn train_teacher(&self, ds: &Dataset) -> Result<(Network, Vec<EpochRecord>)> {
        let mut net = Network::new(&self.teacher_sizes(ds), self.seed)?;
        let history = train_full_precision(&mut net, &ds.train(), &self.teacher_train, Objective::Labels)?;
        Ok((net, history))
    }

    /// Full-precision student, on labels or distilled from `teacher`.
    pub fn train_student(&self, ds: &Dataset, teacher: Option<&Network>) -> Result<(Network, Vec<EpochRecord>)> {
        let mut net = self.fresh_student(ds)?;
        let objective = match teacher {
            Some(t) => Objective::Distill { teacher: t, cfg: self.distill },
            None => Objective::Labels,
        };
        let history = train_full_precision(&mut net, &ds.train(), &self.student_train, objective)?;
        Ok((net, history))
    }

    pub fn quantize_pm(&self, net: &Network, bits: u8, bucketing: bool) -> Result<QuantizedModel> {
        pm_quantize(net, bits, bucketing, self.bucket_size)
    }

    /// Quantized training of a fresh student. With `distill = false` the loss
    /// is the plain label cross-entropy.
    pub fn quantize_distill(&self, ds: &Dataset, teacher: &Network, bits: u8, distill: bool) -> Result<QdOutcome> {
        let distill_cfg = if distill {
            self.distill
        } else {
            DistillationConfig { soft_weight: 0.0, ..self.distill }
        };
        let cfg = QdConfig {
            scheme: UniformScheme::for_bits(bits, self.rounding)?,
            bucket_size: self.bucket_size,
            train: self.student_train.clone(),
            distill: distill_cfg,
        };
        quantized_distillation(self.fresh_student(ds)?, teacher, &ds.train(), &cfg)
    }

    pub fn dq_config(&self, layers: usize, bits: u8) -> DqConfig {
        DqConfig {
            bits_per_layer: vec![bits; layers],
            bucket_size: self.bucket_size,
            lr: self.dq_lr,
            momentum: self.dq_momentum,
            iterations: self.dq_iterations,
            batch_size: self.dq_batch_size,
            loss: DqLoss::DistillFromUnquantized(self.distill),
            init: self.dq_init,
            redistribute: self.dq_redistribute,
            sample_batches: self.dq_sample_batches,
            seed: self.seed,
        }
    }

    /// Differentiable quantization of a trained model.
    pub fn quantize_diff(&self, ds: &Dataset, model: &Network, bits: u8) -> Result<DqOutcome> {
        differentiable_quantization(model, &ds.train(), &self.dq_config(model.layers.len(), bits))
    }
}

/// Test-split accuracy.
pub fn test_accuracy(net: &Network, ds: &Dataset) -> Result<f64> {
    Ok(evaluate(net, &ds.test())?.1)
}
