//! `shellflow` command line: simulations, audits, convergence studies and
//! raw noise samples, each written to its own run directory.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod run;

#[derive(Parser)]
#[command(name = "shellflow", version, about = "Stochastic shell-model simulations and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the noise, integrate, write trajectory.csv and noise.bin.
    Simulate { config: PathBuf },
    /// Run the configured audits and write audits.json; exit 3 if any fails.
    Verify { config: PathBuf },
    /// Noise-refinement, uniqueness and Galerkin tables; exit 3 unless the
    /// refinement differences decrease.
    Convergence { config: PathBuf },
    /// Write one raw fBm sample as noise.bin and noise.csv.
    FbmSample { config: PathBuf },
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Simulate { config } => commands::simulate(&config),
        Command::Verify { config } => commands::verify(&config),
        Command::Convergence { config } => commands::convergence(&config),
        Command::FbmSample { config } => commands::fbm_sample(&config),
    };
    std::process::exit(code);
}
