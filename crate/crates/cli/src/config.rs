//! Flat `key = value` configuration.
//!
//! Every key has a default. A config file overrides defaults, `--set`
//! overrides the file, and `--seed` overrides everything. Unknown or repeated
//! keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qdz::data::{load_csv, synth_dataset, Dataset, SynthKind, SynthSpec};
use qdz::nn::DistillationConfig;
use qdz::recipe::Recipe;
use qdz::stats::{Distribution, NoiseScaling};
use qdz::train::{PointInit, Schedule, TrainConfig};
use qdz::Rounding;

use crate::CliError;

/// Every accepted key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.kind", "spirals"),
    ("data.n", "2000"),
    ("data.classes", "2"),
    ("data.noise", "0.2"),
    ("data.turns", "1.5"),
    ("data.test_fraction", "0.25"),
    ("data.path", ""),
    ("data.label_column", "label"),
    ("teacher.hidden", "64,64,64"),
    ("teacher.epochs", "60"),
    ("teacher.batch_size", "32"),
    ("teacher.lr", "0.05"),
    ("teacher.momentum", "0.9"),
    ("teacher.schedule", "linear"),
    ("student.hidden", "32"),
    ("student.epochs", "60"),
    ("student.batch_size", "32"),
    ("student.lr", "0.05"),
    ("student.momentum", "0.9"),
    ("student.schedule", "linear"),
    ("student.distill", "both"),
    ("distill.temperature", "5"),
    ("distill.soft_weight", "0.5"),
    ("quant.bits", "2,4,8"),
    ("quant.bucket_size", "8"),
    ("quant.rounding", "deterministic"),
    ("quant.float_bits", "32"),
    ("pm.bucketing", "both"),
    ("pm.source", "plain"),
    ("qd.loss", "both"),
    ("dq.source", "distilled"),
    ("dq.lr", "0.001"),
    ("dq.momentum", "0"),
    ("dq.iterations", "1000"),
    ("dq.batch_size", "64"),
    ("dq.sample_batches", "10"),
    ("dq.init", "quantile"),
    ("dq.redistribute", "true"),
    ("noise.n", "100,10000"),
    ("noise.s", "15"),
    ("noise.trials", "10000"),
    ("noise.scaling", "buckets"),
    ("noise.bucket_size", "256"),
    ("noise.quantize_inputs", "both"),
    ("noise.weights", "uniform(-1,1)"),
    ("noise.inputs", "uniform(-1,1)"),
    ("noise.redraw", "false"),
];

/// Keys that determine the dataset; downstream commands must agree with
/// the run that produced their inputs.
pub const DATA_KEYS: &[&str] = &[
    "seed",
    "data.kind",
    "data.n",
    "data.classes",
    "data.noise",
    "data.turns",
    "data.test_fraction",
    "data.path",
    "data.label_column",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_key(key: &str) -> Result<(), String> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(format!("unknown key '{key}'"))
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    /// Parse file contents on top of the defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_error(format!("{origin}:{}: expected 'key = value'", i + 1)))?;
            let key = key.trim();
            check_key(key).map_err(|e| config_error(format!("{origin}:{}: {e}", i + 1)))?;
            if let Some(prev) = seen.insert(key.to_string(), i + 1) {
                return Err(config_error(format!(
                    "{origin}:{}: '{key}' already set on line {prev}",
                    i + 1
                )));
            }
            cfg.values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects key=value, got '{assignment}'")))?;
        let key = key.trim();
        check_key(key).map_err(config_error)?;
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key '{key}' missing from the key table"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| config_error(format!("invalid value '{raw}' for '{key}'")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| config_error(format!("invalid list item '{p}' for '{key}'")))
            })
            .collect()
    }

    fn choice<'a>(&self, key: &str, options: &[&'a str]) -> Result<&'a str, CliError> {
        let raw = self.raw(key);
        options
            .iter()
            .find(|o| **o == raw)
            .copied()
            .ok_or_else(|| config_error(format!("'{key}' must be one of {}, got '{raw}'", options.join(", "))))
    }

    /// `true`, `false` or `both` as the list of values to run.
    pub fn flags(&self, key: &str) -> Result<Vec<bool>, CliError> {
        Ok(match self.choice(key, &["true", "false", "both"])? {
            "true" => vec![true],
            "false" => vec![false],
            _ => vec![true, false],
        })
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    /// Canonical text form: every key, sorted, one per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        let p = self.raw("data.path");
        (!p.is_empty()).then(|| PathBuf::from(p))
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let seed = self.seed()?;
        let test_fraction = self.get("data.test_fraction")?;
        match self.choice("data.kind", &["spirals", "blobs", "csv"])? {
            "csv" => {
                let path = self
                    .data_path()
                    .ok_or_else(|| config_error("data.kind = csv needs data.path"))?;
                if !path.exists() {
                    return Err(CliError::Dependency(format!("dataset {} not found", path.display())));
                }
                Ok(load_csv(&path, self.raw("data.label_column"), test_fraction, seed)?)
            }
            _ => Ok(synth_dataset(&self.synth_spec()?.expect("synthetic kind"))?),
        }
    }

    /// The generator settings, or `None` for CSV data.
    pub fn synth_spec(&self) -> Result<Option<SynthSpec>, CliError> {
        let kind = self.choice("data.kind", &["spirals", "blobs", "csv"])?;
        let Some(kind) = SynthKind::parse(kind) else {
            return Ok(None);
        };
        Ok(Some(SynthSpec {
            kind,
            n: self.get("data.n")?,
            classes: self.get("data.classes")?,
            noise: self.get("data.noise")?,
            turns: self.get("data.turns")?,
            test_fraction: self.get("data.test_fraction")?,
            seed: self.seed()?,
        }))
    }

    fn train(&self, prefix: &str, seed: u64) -> Result<TrainConfig, CliError> {
        let key = format!("{prefix}.schedule");
        let schedule = Schedule::parse(self.raw(&key))
            .ok_or_else(|| config_error(format!("'{key}' must be constant, plateau or linear")))?;
        Ok(TrainConfig {
            epochs: self.get(&format!("{prefix}.epochs"))?,
            batch_size: self.get(&format!("{prefix}.batch_size"))?,
            lr: self.get(&format!("{prefix}.lr"))?,
            momentum: self.get(&format!("{prefix}.momentum"))?,
            schedule,
            seed,
        })
    }

    pub fn recipe(&self) -> Result<Recipe, CliError> {
        let seed = self.seed()?;
        let mut r = Recipe::default().with_seed(seed);
        if let Some(spec) = self.synth_spec()? {
            r.data = spec;
        }
        r.teacher_hidden = self.list("teacher.hidden")?;
        r.student_hidden = self.list("student.hidden")?;
        r.teacher_train = self.train("teacher", seed)?;
        r.student_train = self.train("student", seed)?;
        r.distill = DistillationConfig::new(self.get("distill.temperature")?, self.get("distill.soft_weight")?)?;
        r.bucket_size = self.get("quant.bucket_size")?;
        if r.bucket_size == 0 {
            return Err(config_error("quant.bucket_size must be positive"));
        }
        r.rounding = match self.choice("quant.rounding", &["deterministic", "stochastic"])? {
            "deterministic" => Rounding::Deterministic,
            _ => Rounding::Stochastic,
        };
        r.dq_lr = self.get("dq.lr")?;
        r.dq_momentum = self.get("dq.momentum")?;
        r.dq_iterations = self.get("dq.iterations")?;
        r.dq_batch_size = self.get("dq.batch_size")?;
        r.dq_sample_batches = self.get("dq.sample_batches")?;
        r.dq_init = match self.choice("dq.init", &["quantile", "uniform"])? {
            "quantile" => PointInit::Quantile,
            _ => PointInit::Uniform,
        };
        r.dq_redistribute = self.flags("dq.redistribute")?[0];
        Ok(r)
    }

    pub fn bits(&self) -> Result<Vec<u8>, CliError> {
        let bits: Vec<u8> = self.list("quant.bits")?;
        if bits.is_empty() || bits.iter().any(|b| !(1..=8).contains(b)) {
            return Err(config_error("quant.bits must list widths in 1..=8"));
        }
        Ok(bits)
    }

    pub fn float_bits(&self) -> Result<u32, CliError> {
        let f: u32 = self.get("quant.float_bits")?;
        if f == 0 {
            return Err(config_error("quant.float_bits must be positive"));
        }
        Ok(f)
    }

    pub fn noise_scaling(&self) -> Result<NoiseScaling, CliError> {
        Ok(match self.choice("noise.scaling", &["buckets", "support"])? {
            "buckets" => NoiseScaling::Buckets(self.get("noise.bucket_size")?),
            _ => NoiseScaling::Support,
        })
    }

    pub fn distribution(&self, key: &str) -> Result<Distribution, CliError> {
        Distribution::parse(self.raw(key)).map_err(|e| config_error(format!("'{key}': {e}")))
    }

    /// Parse every typed key, so bad values surface before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.recipe()?;
        self.bits()?;
        self.float_bits()?;
        for key in ["student.distill", "pm.bucketing", "qd.loss", "dq.redistribute", "noise.quantize_inputs"] {
            self.flags(key)?;
        }
        for key in ["pm.source", "dq.source"] {
            self.choice(key, &["plain", "distilled", "teacher"])?;
        }
        self.noise_scaling()?;
        self.distribution("noise.weights")?;
        self.distribution("noise.inputs")?;
        self.list::<usize>("noise.n")?;
        self.get::<u32>("noise.s")?;
        self.get::<usize>("noise.trials")?;
        self.get::<bool>("noise.redraw")?;
        self.get::<f64>("data.test_fraction")?;
        Ok(())
    }

    pub fn choose(&self, key: &str, options: &[&'static str]) -> Result<&'static str, CliError> {
        self.choice(key, options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults() {
        let cfg = Config::parse("# comment\nseed = 7\n\nquant.bits = 2, 4 # trailing\n", "t").unwrap();
        assert_eq!(cfg.seed().unwrap(), 7);
        assert_eq!(cfg.bits().unwrap(), vec![2, 4]);
        assert_eq!(cfg.raw("data.kind"), "spirals");
    }

    #[test]
    fn unknown_and_repeated_keys_rejected() {
        let e = Config::parse("sed = 1\n", "f").unwrap_err();
        assert!(e.to_string().contains("f:1"), "{e}");
        assert!(Config::parse("seed = 1\nseed = 2\n", "f").is_err());
        assert!(Config::parse("seed 1\n", "f").is_err());
        assert!(Config::default().set("nope=1").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = Config::default();
        cfg.set("noise.weights=gaussian(0,1,3)").unwrap();
        assert_eq!(Config::parse(&cfg.render(), "r").unwrap(), cfg);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = Config::default();
        cfg.set("quant.bits=9").unwrap();
        assert!(matches!(cfg.bits(), Err(CliError::Config(_))));
        cfg.set("teacher.schedule=cosine").unwrap();
        assert!(matches!(cfg.recipe(), Err(CliError::Config(_))));
    }

    #[test]
    fn recipe_defaults_match_library() {
        assert_eq!(Config::default().recipe().unwrap(), Recipe::default());
    }
}
