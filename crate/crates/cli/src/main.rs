//! `ecobounds`: partial-identification bounds on treatment effects when the
//! target population carries covariates the study never observed.
//!
//! Every subcommand is driven by one JSON configuration file; outputs are
//! fingerprinted CSV/JSON tables. Exit codes: 0 success, 2 configuration
//! error, 3 data error, 4 numerical failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;
use ecobounds_core::Error as CoreError;
use output::{fingerprint, OutputDir};

#[derive(Parser)]
#[command(name = "ecobounds", version, about)]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (falls back to ECOBOUNDS_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overwrite outputs whose fingerprint does not match this run.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a CSV against the configured column-role map.
    Ingest,
    /// Run cross-fit estimation, inference and pointwise bounds.
    Estimate,
    /// Draw one synthetic dataset with ground truth.
    Simulate,
    /// Plug-in vs bias-corrected comparison under injected nuisance error.
    ErrorGrid,
    /// Entropy of the W model against mean bound width.
    Entropy,
    /// Bounds, coverage and baselines across sensitivity levels.
    DeltaSweep,
    /// Calibrate the sensitivity parameter by holding out covariates.
    Benchmark,
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<CoreError>() {
        return match core {
            CoreError::Invalid(_) => 2,
            CoreError::Data(_)
            | CoreError::Io(_)
            | CoreError::Csv(_)
            | CoreError::Positivity(_)
            | CoreError::PopulationOverlap(_)
            | CoreError::DegenerateSplit(_) => 3,
            CoreError::SolverFailed { .. } | CoreError::EmptyCell(_) => 4,
        };
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return 2;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    2
}

fn init_threads(cli_threads: Option<usize>) {
    let env_threads = std::env::var("ECOBOUNDS_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok());
    if let Some(n) = cli_threads.or(env_threads) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config_path = cli
        .config
        .as_ref()
        .context("--config PATH is required")?;
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let mut config: RunConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", config_path.display()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.display().to_string();
    }
    // The output directory is presentation-only; exclude it so the same
    // analysis fingerprints identically wherever it is written.
    let mut for_fp = serde_json::to_value(&config)?;
    if let serde_json::Value::Object(map) = &mut for_fp {
        map.remove("out_dir");
    }
    let fp = fingerprint(&for_fp)?;
    let out = OutputDir::new(&config.out_dir, fp, cli.force)?;
    match cli.command {
        Command::Ingest => commands::cmd_ingest(&config, &out),
        Command::Estimate => commands::cmd_estimate(&config, &out),
        Command::Simulate => commands::cmd_simulate(&config, &out),
        Command::ErrorGrid => commands::cmd_error_grid(&config, &out),
        Command::Entropy => commands::cmd_entropy(&config, &out),
        Command::DeltaSweep => commands::cmd_delta_sweep(&config, &out),
        Command::Benchmark => commands::cmd_benchmark(&config, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code_for(&err);
            let record = serde_json::json!({
                "error": format!("{err:#}"),
                "exit_code": code,
            });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
