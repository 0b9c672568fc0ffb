mod commands;
mod config;
mod dataset;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::{absolute, ExperimentConfig};
use crate::error::CliError;

/// Test-time adaptation experiments for monocular depth on synthetic scenes.
#[derive(Parser, Debug)]
#[command(name = "westar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides both the config and WESTAR_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Let `gen` replace an existing dataset.
    #[arg(long, global = true)]
    force: bool,
    /// Validate inputs and print the plan without running it.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write clean and corrupted splits with weak labels.
    Gen,
    /// Train the base model on the clean train split.
    Pretrain,
    /// Adapt a checkpoint on each corrupted adaptation split.
    Adapt,
    /// Run the configured ablation axes over several seeds.
    Ablate,
    /// Score a checkpoint on the clean and corrupted test splits.
    Eval,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(seed) = std::env::var("WESTAR_SEED") {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("WESTAR_SEED: cannot parse `{seed}`")))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for (flag, slot) in [
        (&cli.data, &mut cfg.data_dir),
        (&cli.out, &mut cfg.out),
        (&cli.checkpoint, &mut cfg.checkpoint),
    ] {
        if let Some(p) = flag {
            *slot = Some(absolute(p)?);
        }
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let run = Run {
        cfg: resolve(cli)?,
        dry_run: cli.dry_run,
        force: cli.force,
    };
    if cli.dry_run {
        eprint!("{}", run.cfg.to_text());
    }
    match cli.command {
        Command::Gen => run.gen(),
        Command::Pretrain => run.pretrain(),
        Command::Adapt => run.adapt(),
        Command::Ablate => run.ablate(),
        Command::Eval => run.eval(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
