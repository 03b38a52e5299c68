//! Library side of the `gruae` command-line tool.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_k_range, Overrides, RunConfig};
use gruae_core::training::Ablation;

#[derive(Debug, Parser)]
#[command(name = "gruae", version, about = "Outcome-guided sequence subtyping with a GRU autoencoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (features, labels, planted clusters).
    Synth,
    /// Train the model on the cohort in --data-dir.
    Train,
    /// Embed, fit the mixture and score the discovery cohort and baselines.
    Evaluate,
    /// Score an external cohort with the frozen encoder and mixture.
    Validate,
    /// Leave-out resampling of the mixture on the cohort in --data-dir.
    Stability,
    /// Per-feature comparison of the first two subtypes.
    Analyze,
    /// Collect tables and plot data from the run directory.
    Report,
    /// Train and score every cell of the loss-weight grid.
    Sweep,
}

#[derive(Debug, Args)]
pub struct Flags {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// full, no_attention, ae_only or sequential.
    #[arg(long, global = true, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Candidate K values for the BIC table, e.g. `1..9` or `2,3,4`.
    #[arg(long, global = true)]
    pub k_range: Option<String>,
    /// Number of stability trials.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: gruae_core::Error| e.to_string())
}

/// A problem with the invocation or configuration rather than the run.
#[derive(Debug)]
pub struct UsageError(pub anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn resolve_config(flags: &Flags) -> anyhow::Result<RunConfig> {
    let k_range = match &flags.k_range {
        Some(s) => Some(parse_k_range(s).map_err(UsageError)?),
        None => None,
    };
    let o = Overrides {
        seed: flags.seed,
        ablation: flags.ablation,
        data_dir: flags.data_dir.clone(),
        out_dir: flags.out_dir.clone(),
        k_range,
        trials: flags.trials,
    };
    RunConfig::load(flags.config.as_deref())
        .and_then(|c| c.resolve(&o))
        .map_err(|e| UsageError(e).into())
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli.flags)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Validate => commands::validate(&cfg),
        Command::Stability => commands::stability(&cfg),
        Command::Analyze => commands::analyze(&cfg),
        Command::Report => commands::report(&cfg),
        Command::Sweep => commands::sweep(&cfg),
    }
}
