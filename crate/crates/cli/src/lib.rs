//! The `qdz` command line: experiment pipelines over the `qdz` library.
//!
//! Each command reads a flat config, writes its artifacts into the output
//! directory and records a `<command>.manifest` that can be passed back as
//! `--config` to reproduce them.

pub mod config;
mod pipeline;

use std::path::PathBuf;

pub use config::Config;
pub use pipeline::{run, summary_path, SUMMARY_HEADER};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    /// A required input (upstream artifact, dataset file) is missing or unusable.
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<qdz::Error> for CliError {
    fn from(e: qdz::Error) -> Self {
        match e {
            qdz::Error::Argument(m) => CliError::Config(m),
            qdz::Error::Divergence(m) => CliError::Divergence(m),
            qdz::Error::DegenerateVariance(m) => CliError::Divergence(format!("degenerate variance: {m}")),
            e @ (qdz::Error::Corruption(_) | qdz::Error::Parse { .. }) => CliError::Dependency(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    TrainTeacher,
    TrainStudent,
    QuantizePm,
    QuantizeDistill,
    QuantizeDiff,
    NoiseStudy,
    Report,
    /// Teacher, student, all three quantizers, then the report.
    Recipe,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::TrainStudent => "train-student",
            Command::QuantizePm => "quantize-pm",
            Command::QuantizeDistill => "quantize-distill",
            Command::QuantizeDiff => "quantize-diff",
            Command::NoiseStudy => "noise-study",
            Command::Report => "report",
            Command::Recipe => "recipe",
        }
    }
}

/// A fully resolved command line.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    pub config: Config,
    pub out: PathBuf,
    /// Upper bound on worker threads.
    pub threads: usize,
}

/// Worker cap from `QDZ_THREADS`, defaulting to the available cores.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("QDZ_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("QDZ_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
