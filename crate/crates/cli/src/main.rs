//! `m2m`: simulate particle systems, train measure-to-measure models, predict and evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Measure-to-measure regression on particle clouds.
///
/// Exit codes: 0 success, 1 other failure, 2 invalid configuration,
/// 3 numerical abort during training, 4 gradient check failure.
#[derive(Debug, Parser)]
#[command(name = "m2m", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Seed and output options shared by config-driven commands.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run config.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Seed for every random draw; beats M2M_SEED, which beats the config's top-level "seed".
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's "out_dir".
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate particle systems and write a dataset of adjacent-time pairs.
    ///
    /// Config: {"out_dir", "seed"?, "data": {"systems": [{"system", "d", ...}], "repeat"?}}.
    Simulate(RunArgs),
    /// Corrupt clean clouds into (corrupted, clean) training pairs.
    ///
    /// Config: {"out_dir", "seed"?, "data": {"targets": [paths]}, "corruption": {...}}.
    Corrupt(RunArgs),
    /// Train a model; writes model.ckpt, history.jsonl and a frozen config.json.
    ///
    /// Config: {"out_dir", "seed"?, "data": {"manifest", "heldout_manifest"?}, "model": {...}, "train": {...}}.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from out_dir/model.ckpt up to train.iterations.
        #[arg(long)]
        resume: bool,
    },
    /// Push a point cloud through a trained model.
    Predict {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source cloud (.m2m).
        #[arg(long)]
        input: PathBuf,
        /// Where to write the predicted cloud (.m2m).
        #[arg(long)]
        output: PathBuf,
        /// Euler steps per hop for flow models [default: 100]; static models ignore it.
        #[arg(long)]
        steps: Option<usize>,
        /// Number of autoregressive hops.
        #[arg(long, default_value_t = 1)]
        hops: usize,
    },
    /// Print distribution metrics as JSON.
    ///
    /// Either compares two clouds (--pred, --target) or scores a checkpoint's
    /// one-hop predictions on a dataset (--checkpoint, --manifest).
    Eval {
        /// Predicted cloud (.m2m).
        #[arg(long, requires = "target", conflicts_with_all = ["checkpoint", "manifest"])]
        pred: Option<PathBuf>,
        /// Reference cloud (.m2m).
        #[arg(long, requires = "pred")]
        target: Option<PathBuf>,
        /// Checkpoint to evaluate.
        #[arg(long, requires = "manifest")]
        checkpoint: Option<PathBuf>,
        /// Dataset manifest whose pairs are scored.
        #[arg(long, requires = "checkpoint")]
        manifest: Option<PathBuf>,
        /// Euler steps per hop for flow models.
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Finite-difference check of the training-loss gradients on a tiny model.
    Gradcheck {
        /// Model config JSON (bare, or under a "model" key); defaults to a
        /// 1-layer, width-8, 2-head transformer on 2-d points.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Particles per cloud.
        #[arg(long, default_value_t = 3)]
        particles: usize,
        /// Seed for data and weight jitter.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negative control: use a deliberately wrong layer-norm backward.
        #[arg(long)]
        corrupt_backward: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(config::exit_code(&err))
        }
    }
}
