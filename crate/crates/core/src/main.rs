use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

/// Object-aware visual-inertial odometry on synthetic or recorded datasets.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        /// Simulation spec (JSON). Omitted keys take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the estimator over a dataset.
    Run {
        #[arg(long)]
        data: PathBuf,
        /// Run configuration (JSON). Omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute trajectory and object metrics of a run.
    Eval {
        /// Dataset directory holding gt.jsonl and scene.json.
        #[arg(long)]
        gt: PathBuf,
        /// Output directory of `run`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Simulate { spec, out } => objvio::io::cmd_simulate(spec.as_deref(), &out),
        Command::Run { data, config, out } => objvio::io::cmd_run(&data, config.as_deref(), &out),
        Command::Eval { gt, run, out } => objvio::io::cmd_eval(&gt, &run, &out),
    }
}
