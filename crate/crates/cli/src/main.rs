//! `geofaith`: one subcommand per pipeline stage, composed through files.

// Negated float comparisons are deliberate: they treat NaN as invalid.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod cmd;
mod common;
mod failure;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmd::{data, faith, model, reward};
use failure::{Failure, Result};

#[derive(Debug, Parser)]
#[command(
    name = "geofaith",
    version,
    about = "Geometric and temporal faithfulness analysis of reasoning traces"
)]
struct Cli {
    /// Worker threads for per-trajectory work
    #[arg(long, global = true, env = "GEOFAITH_THREADS")]
    threads: Option<usize>,
    /// Seed for training and synthetic data
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check every trajectory of a dataset against the format invariants
    Validate(data::ValidateArgs),
    /// Explained-variance curve of the pooled hidden states
    Pca(data::PcaArgs),
    /// Two-nearest-neighbor intrinsic dimension per layer
    Twonn(data::TwoNnArgs),
    /// Train VAE ensembles (one per domain unless --pool)
    TrainVae(model::TrainVaeArgs),
    /// Latent geometry, uncertainty and step features
    Geometry(model::GeometryCmdArgs),
    /// Entropy traces and temporal pattern scores
    Entropy(model::EntropyArgs),
    /// Density clustering of trajectories in (ρ, C)
    Cluster(faith::ClusterCmdArgs),
    /// Fused step scores for suspicious trajectories
    Refine(faith::RefineCmdArgs),
    /// One bootstrapping round over the suspicious pool
    Bootstrap(faith::BootstrapArgs),
    /// Train the baseline step detector on labeled steps
    TrainDetector(model::TrainDetectorArgs),
    /// Hierarchical rewards and group advantages
    Reward(reward::RewardCmdArgs),
    /// Group-relative policy loss from rewards and log-probabilities
    GrpoLoss(reward::GrpoArgs),
    /// CSV and SVG series for entropy curves, (ρ, C) scatter and variance curves
    PlotData(faith::PlotArgs),
    /// Write a deterministic synthetic dataset
    Synth(data::SynthArgs),
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::usage)?;
    }
    let seed = cli.seed;
    match &cli.command {
        Command::Validate(a) => data::validate(a, seed),
        Command::Pca(a) => data::pca(a, seed),
        Command::Twonn(a) => data::twonn(a, seed),
        Command::TrainVae(a) => model::train_vae(a, seed),
        Command::Geometry(a) => model::geometry(a, seed),
        Command::Entropy(a) => model::entropy(a, seed),
        Command::Cluster(a) => faith::cluster(a, seed),
        Command::Refine(a) => faith::refine(a, seed),
        Command::Bootstrap(a) => faith::bootstrap(a, seed),
        Command::TrainDetector(a) => model::train_detector(a, seed),
        Command::Reward(a) => reward::reward(a, seed),
        Command::GrpoLoss(a) => reward::grpo(a, seed),
        Command::PlotData(a) => faith::plot_data(a, seed),
        Command::Synth(a) => data::synth(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
