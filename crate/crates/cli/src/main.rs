//! memaud: seeded, config-driven orchestration of the memorization-audit
//! pipeline — phantom data, the three training stages, generation, the
//! copy audit, and the augmented-vs-non-augmented comparison.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::RunConfig;
use stages::Runner;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing dependency: {0}")]
    Missing(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<memaud_core::volumes::VolumeError> for CliError {
    fn from(e: memaud_core::volumes::VolumeError) -> Self {
        match e {
            memaud_core::volumes::VolumeError::Io(io) => CliError::Io(io),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<memaud_core::checkpoint::CheckpointError> for CliError {
    fn from(e: memaud_core::checkpoint::CheckpointError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<memaud_core::audit::AuditError> for CliError {
    fn from(e: memaud_core::audit::AuditError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "memaud",
    version,
    about = "Memorization audit pipeline for a desk-scale 3D latent diffusion model"
)]
struct Cli {
    /// Run configuration JSON; omitted fields take built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. --set diffusion.epochs=10
    /// (repeatable; flags win over the file).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Data root (shorthand for --set data_dir=...).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Master seed (shorthand for --set seed=...).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Re-run stages even when cached outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the phantom corpus (train + validation splits).
    Phantom,
    /// Train the latent autoencoder.
    TrainAe,
    /// Train the latent diffusion denoiser (requires train-ae).
    TrainDiff,
    /// Train the contrastive copy detector.
    TrainCon,
    /// Sample synthetic volumes (requires train-ae and train-diff).
    Generate,
    /// Run the copy audit and write the JSON/CSV report.
    Audit,
    /// Paired augmented-vs-non-augmented comparison over several seeds.
    Experiment {
        /// Number of seed pairs.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Run phantom through audit in order.
    Pipeline,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(d) = &cli.data_dir {
        overrides.push(format!(
            "data_dir={}",
            serde_json::to_string(d).expect("path encodes")
        ));
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let config = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    match cli.cmd {
        Cmd::Phantom => Runner::new(config, cli.force)?.phantom(),
        Cmd::TrainAe => Runner::new(config, cli.force)?.train_ae(),
        Cmd::TrainDiff => Runner::new(config, cli.force)?.train_diff(),
        Cmd::TrainCon => Runner::new(config, cli.force)?.train_con(),
        Cmd::Generate => Runner::new(config, cli.force)?.generate(),
        Cmd::Audit => Runner::new(config, cli.force)?.audit(),
        Cmd::Experiment { seeds } => {
            let report = stages::experiment(&config, seeds, cli.force)?;
            println!(
                "experiment: mean copy rate aug {:.4} vs noaug {:.4} over {} seeds",
                report.copy_rate_aug,
                report.copy_rate_noaug,
                report.per_seed.len()
            );
            Ok(())
        }
        Cmd::Pipeline => {
            let mut runner = Runner::new(config, cli.force)?;
            runner.phantom()?;
            runner.train_ae()?;
            runner.train_diff()?;
            runner.train_con()?;
            runner.generate()?;
            runner.audit()
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("memaud: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
