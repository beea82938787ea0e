use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod manifest;

#[derive(Parser)]
#[command(
    name = "genshift",
    version,
    about = "Adapt a pretrained image generator toward hybrid text/image target domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full adaptation and write checkpoint, log, and manifest
    Adapt {
        /// Experiment config (TOML)
        config: PathBuf,
        /// Overwrite artifacts left by a previous run
        #[arg(long)]
        force: bool,
    },
    /// Write the configured domain shifts to a direction file
    Compose {
        /// Experiment config (TOML)
        config: PathBuf,
        /// Interpolate between exactly two domain shifts instead of
        /// composing them into one direction
        #[arg(long)]
        sweep: bool,
        /// Comma-separated interpolation weights for --sweep
        #[arg(long, value_delimiter = ',', requires = "sweep")]
        grid: Option<Vec<f64>>,
        /// Output path (defaults to directions.uhdv in the run directory)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing direction file
        #[arg(long)]
        force: bool,
    },
    /// Score an adapted checkpoint and write the metrics report
    Eval {
        /// Experiment config (TOML)
        config: PathBuf,
        /// Checkpoint to score (defaults to the run's checkpoint)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overwrite an existing metrics report
        #[arg(long)]
        force: bool,
    },
    /// Render side-by-side source/target samples from shared noise
    Sample {
        /// Experiment config (TOML)
        config: PathBuf,
        /// Checkpoint to render (defaults to the run's checkpoint)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of noise inputs to render
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Noise seed (defaults to the config seed)
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite existing sample images
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Adapt { config, force } => commands::adapt(&config, force),
        Command::Compose { config, sweep, grid, out, force } => {
            commands::compose(&config, sweep, grid, out, force)
        }
        Command::Eval { config, checkpoint, force } => commands::eval(&config, checkpoint, force),
        Command::Sample { config, checkpoint, count, seed, force } => {
            commands::sample(&config, checkpoint, count, seed, force)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
