//! Library side of the `spconj` command-line tool.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::commands::Run;
use crate::config::Settings;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "spconj", version, about = "Conjugate Bayesian spatial regression with exact posterior sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML settings file, or a previous run's manifest.json.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset on the unit square.
    Simulate(CommonArgs),
    /// Empirical variogram of OLS residuals and its parametric fit.
    Variogram(CommonArgs),
    /// Cross-validated choice of (phi, delta2).
    Cv(CommonArgs),
    /// Posterior summaries for beta, sigma2 and tau2.
    Fit(CommonArgs),
    /// Posterior predictive summaries at new locations.
    Predict(CommonArgs),
    /// Partition, fit subsets, and pool exactly and by geometric median.
    Metakrige(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Variogram(_) => "variogram",
            Command::Cv(_) => "cv",
            Command::Fit(_) => "fit",
            Command::Predict(_) => "predict",
            Command::Metakrige(_) => "metakrige",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a)
            | Command::Variogram(a)
            | Command::Cv(a)
            | Command::Fit(a)
            | Command::Predict(a)
            | Command::Metakrige(a) => a,
        }
    }
}

/// Resolve settings, run the command in a sized thread pool, then write
/// `manifest.json`. The manifest is written last, only on success.
pub fn execute(command: &Command) -> Result<()> {
    let started = Instant::now();
    let args = command.args();
    let base = match &args.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    let settings = base.overlay(&args.settings)?;
    config::validate(&settings, command.name())?;
    let threads = config::resolve_threads(&settings)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let mut run = Run::new(settings)?;
    pool.install(|| match command {
        Command::Simulate(_) => commands::simulate(&mut run),
        Command::Variogram(_) => commands::variogram(&mut run),
        Command::Cv(_) => commands::cv(&mut run),
        Command::Fit(_) => commands::fit(&mut run),
        Command::Predict(_) => commands::predict(&mut run),
        Command::Metakrige(_) => commands::metakrige(&mut run),
    })?;
    let mut config = run.settings.clone();
    config.seed = Some(run.seed);
    let manifest = json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "seed": run.seed,
        "threads": threads,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "outputs": run.outputs,
        "results": run.results,
    });
    std::fs::write(run.out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json") + "\n")?;
    Ok(())
}

