//! `phi`: data generation, training, verification, benchmarking and MD.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use phi_core::bench::CountingAllocator;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator::new();

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    GenData,
    Train,
    Eval,
    Verify,
    Bench,
    Md,
    HyperSearch,
}

#[derive(Debug, Parser)]
#[command(name = "phi", about = "Spectral electrostatics plugin for interatomic potentials")]
struct Args {
    command: Command,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to $PHI_OUT_DIR, then `phi-out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// List every configuration key with its default and exit.
    #[arg(long)]
    list_keys: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

fn run(args: Args) -> Result<(), CliError> {
    let mut cfg = config::Config::default();
    if args.list_keys {
        print!("{}", cfg.echo());
        return Ok(());
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    let threads = cfg.threads()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Validation(format!("threads = {threads}: {e}")))?;
    let out = args
        .out
        .or_else(|| std::env::var_os("PHI_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("phi-out"));
    commands::dispatch(args.command, &cfg, &out, &ALLOC)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
