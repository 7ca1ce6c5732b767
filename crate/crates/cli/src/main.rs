use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use qdz_cli::{run, threads_from_env, CliError, Command, Config, Invocation};

/// Quantized distillation and differentiable quantization experiments.
#[derive(Parser)]
#[command(name = "qdz", version)]
struct Cli {
    command: Command,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "qdz-out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set quant.bits=LIST`.
    #[arg(long, value_name = "LIST")]
    bits: Option<String>,
}

fn invocation(cli: Cli) -> Result<Invocation, CliError> {
    let mut config = Config::load(&cli.config)?;
    for s in &cli.set {
        config.set(s)?;
    }
    if let Some(b) = cli.bits {
        config.set(&format!("quant.bits={b}"))?;
    }
    if let Some(seed) = cli.seed {
        config.set(&format!("seed={seed}"))?;
    }
    Ok(Invocation { command: cli.command, config, out: cli.out, threads: threads_from_env()? })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match invocation(cli).and_then(|inv| run(&inv)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qdz: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
