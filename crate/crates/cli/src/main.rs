use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod svg;

use config::{ConfigMap, ExperimentConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "icra",
    version,
    about = "In-context reward adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Params file; repeatable for `eval`, resume point for `train`.
    #[arg(long, global = true)]
    params: Vec<PathBuf>,

    /// Output directory, created if missing. Overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Fail on the first malformed input row.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample synthetic tasks to tasks.csv.
    Generate,
    /// Fit U by projected gradient descent.
    Train,
    /// Accuracy on in-distribution and new human types.
    Eval,
    /// Binary-label predictions for new types against the truth.
    Impossibility,
    /// Convergence-rate sweep with a log-log fit.
    Rates,
}

fn run(cli: Cli, console: &mut dyn Write) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let map = match &cli.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::default(),
    };
    let mut cfg = ExperimentConfig::from_map(&map)?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    let ctx = commands::Context {
        cfg,
        params: cli.params,
        strict: cli.strict,
    };
    match cli.command {
        Command::Generate => commands::generate(&ctx, console),
        Command::Train => commands::train(&ctx, console),
        Command::Eval => commands::eval(&ctx, console),
        Command::Impossibility => commands::impossibility(&ctx, console),
        Command::Rates => commands::rates(&ctx, console),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse(), &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
