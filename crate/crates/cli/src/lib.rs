//! Command-line driver for the segmentation stack.

pub mod commands;
pub mod config;
pub mod exit;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Overrides, RunConfig, Task};
pub use exit::{classify, ExitKind, Failure};

#[derive(Debug, Parser)]
#[command(name = "lapseg", version, about = "Encoder-decoder segmentation of laparoscopic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised reconstruction pre-training (MSE).
    Pretrain(RunArgs),
    /// Segmentation training, optionally from a pre-trained checkpoint.
    Train(RunArgs),
    /// Confusion-matrix metrics of a checkpoint on a labelled manifest.
    Eval(RunArgs),
    /// Writes index and color masks for every manifest image.
    Predict(RunArgs),
    /// Collapses full19 masks to single9.
    Remap(RunArgs),
    /// Per-channel normalization statistics of a manifest.
    Stats(RunArgs),
    /// Finite-difference audit of every backward rule.
    Gradcheck(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

impl Command {
    pub fn task(&self) -> (Task, &RunArgs) {
        match self {
            Command::Pretrain(a) => (Task::Pretrain, a),
            Command::Train(a) => (Task::Train, a),
            Command::Eval(a) => (Task::Eval, a),
            Command::Predict(a) => (Task::Predict, a),
            Command::Remap(a) => (Task::Remap, a),
            Command::Stats(a) => (Task::Stats, a),
            Command::Gradcheck(a) => (Task::Gradcheck, a),
        }
    }
}

/// Worker threads: `LAPSEG_THREADS` if set, one in deterministic mode.
pub fn init_threads(deterministic: bool) -> anyhow::Result<()> {
    let requested = match std::env::var("LAPSEG_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Failure::usage(format!("LAPSEG_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let threads = if deterministic { Some(1) } else { requested };
    if let Some(n) = threads {
        // a second initialization (tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses arguments already split off the binary name and runs the command.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let (task, args) = cli.command.task();
    let cfg = RunConfig::resolve(task, args.config.as_deref(), &args.overrides)?;
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    init_threads(cfg.deterministic)?;
    commands::run(&cfg)
}
