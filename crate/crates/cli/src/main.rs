use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use turtle_core::ErrorKind;

mod commands;
mod config;

use config::RunConfig;

/// Causal video restoration: training, inference, profiling and checks.
#[derive(Parser)]
#[command(name = "turtle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Key = value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Accepted for compatibility; every computation is already deterministic.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint and loss log.
    Train(Common),
    /// Restore frames with a checkpoint, reporting metrics when ground truth is given.
    Restore(Common),
    /// Apply synthetic noise or blur to frames.
    Degrade(Common),
    /// Report operation counts and per-frame time per resolution.
    Profile(Common),
    /// Check every gradient against finite differences.
    Gradcheck(Common),
    /// Run a small end-to-end pipeline and verify its invariants.
    Selftest(Common),
}

fn run(cli: Cli) -> Result<()> {
    let (common, action): (&Common, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Train(c) => (c, commands::train),
        Command::Restore(c) => (c, commands::restore),
        Command::Degrade(c) => (c, commands::degrade_cmd),
        Command::Profile(c) => (c, commands::profile),
        Command::Gradcheck(c) => (c, commands::gradcheck),
        Command::Selftest(c) => (c, commands::selftest),
    };
    let cfg = RunConfig::load(&common.config, common.seed, common.deterministic)?;
    action(&cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err.chain().find_map(|e| e.downcast_ref::<turtle_core::Error>()).map(turtle_core::Error::kind);
    match kind {
        Some(ErrorKind::Validation) => 2,
        Some(ErrorKind::Numerical) => 4,
        Some(ErrorKind::Io) | None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
