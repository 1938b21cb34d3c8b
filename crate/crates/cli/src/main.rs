//! `l96uq`: twin-experiment laboratory for forecast uncertainty
//! quantification on the Lorenz'96 family of models.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use l96uq_cli::config::ExperimentConfig;
use l96uq_cli::pipeline;

#[derive(Parser)]
#[command(name = "l96uq", version, about = "Lorenz'96 forecast uncertainty laboratory")]
struct Cli {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Reduced desk-scale profile for smoke runs.
    #[arg(long, global = true)]
    quick: bool,

    /// Artifact directory (created if missing).
    #[arg(long, global = true, env = "L96UQ_OUTPUT", default_value = "out")]
    output: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate and store the nature run (and the surrogate closure fit in
    /// the imperfect-model scenario).
    Nature,
    /// Observe the nature run and cycle the ensemble filter over it.
    Assimilate,
    /// Build the forecast dataset from the stored analyses.
    Forecast,
    /// Train the mean network, then the variance networks.
    Train,
    /// Score all available forecast systems on the test split.
    Evaluate,
    /// Deterministic and network RMSE as a function of lead time.
    LeadtimeStudy,
    /// Print the effective configuration as TOML.
    PrintConfig,
    /// Run fast numerical self-checks.
    VerifyInstall,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();

    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }

    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if cli.quick {
        cfg = cfg.quick();
    }
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;

    let dir = cli.output.as_path();
    match cli.command {
        Command::Nature => pipeline::cmd_nature(&cfg, dir)?,
        Command::Assimilate => pipeline::cmd_assimilate(&cfg, dir)?,
        Command::Forecast => pipeline::cmd_forecast(&cfg, dir)?,
        Command::Train => pipeline::cmd_train(&cfg, dir)?,
        Command::Evaluate => pipeline::cmd_evaluate(&cfg, dir)?,
        Command::LeadtimeStudy => pipeline::cmd_leadtime_study(&cfg, dir)?,
        Command::PrintConfig => print!("{}", cfg.to_toml()),
        Command::VerifyInstall => {
            for line in pipeline::verify_install()? {
                println!("ok: {line}");
            }
        }
    }
    Ok(())
}
