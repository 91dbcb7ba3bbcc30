use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Gradient-flow LDPC decoding experiments.
#[derive(Debug, Parser)]
#[command(name = "gfd", version)]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the `seed` key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Overrides the `output.path` key.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Worker threads for batch decoding (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a BER sweep and write the results CSV.
    Ber,
    /// Decode one received word, read from a file or simulated.
    Decode {
        /// Received word: numbers separated by whitespace or commas.
        #[arg(long, value_name = "PATH", required_unless_present = "trial", conflicts_with = "trial")]
        input: Option<PathBuf>,
        /// Binary MIMO channel matrix, required with --input for mimo configs.
        #[arg(long, value_name = "PATH", requires = "input")]
        channel: Option<PathBuf>,
        /// Simulate block N of the first grid point instead of reading one.
        #[arg(long, value_name = "N")]
        trial: Option<u64>,
        /// With --trial, also write PREFIX.y.txt and, for mimo, PREFIX.channel.bin.
        #[arg(long, value_name = "PREFIX", requires = "trial")]
        dump: Option<PathBuf>,
        /// Grid value for the noise level; defaults to the first `snr.grid` entry.
        #[arg(long, value_name = "DB")]
        snr: Option<f64>,
    },
    /// Train a segmented score network by denoising score matching.
    TrainScore,
    /// Train a per-iteration decoder schedule by deep unfolding.
    TrainUnfold,
    /// Print size, rate and degree profile of a parity-check matrix.
    InspectCode {
        /// alist file; defaults to `code.path` of the config.
        path: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gfd: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
