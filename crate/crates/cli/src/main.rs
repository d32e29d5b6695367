use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Diffusion-bridge speech enhancement toolkit.
#[derive(Debug, Parser)]
#[command(name = "edm2se", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the invariant suite and print a pass/fail table.
    Selftest {
        /// Take the schedule and statistics from this config instead of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the toy denoiser on synthetic mixtures.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the parameters of a post-hoc EMA with the given sigma_rel.
    EmaReconstruct {
        /// Run directory or its snapshots/ directory.
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        sigma_rel: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate reconstructions over a sigma_rel grid and write a CSV.
    EmaSweep {
        #[arg(long)]
        store: PathBuf,
        /// Comma-separated sigma_rel values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long, default_value = "si_sdr")]
        metric: commands::Metric,
        #[arg(long)]
        out: PathBuf,
        /// Run config; defaults to config.json of the run directory.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Enhance a mono WAV file, or every WAV file in a directory, with a trained model.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Run config; defaults to config.json next to the model.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Selftest { config } => commands::selftest(config.as_deref()),
        Command::Train { config, out } => commands::train(config.as_deref(), &out),
        Command::EmaReconstruct { store, sigma_rel, out } => commands::ema_reconstruct(&store, sigma_rel, &out),
        Command::EmaSweep {
            store,
            grid,
            metric,
            out,
            config,
        } => commands::ema_sweep(&store, &grid, metric, &out, config.as_deref()),
        Command::Enhance {
            model,
            input,
            out,
            steps,
            config,
        } => commands::enhance(&model, &input, &out, steps, config.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            commands::exit_code(&e)
        }
    }
}
