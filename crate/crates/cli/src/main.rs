//! `sdr`: command-line front end for sparsity-adaptive depth refinement.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 input-data
//! error, 3 numeric failure (divergence, non-finite values), 4 a
//! self-check or gradient check exceeded its threshold.

mod commands;
mod config;
mod imageio;

use clap::error::ErrorKind as ClapKind;
use clap::{Parser, Subcommand};

use commands::CmdError;
use sdr_core::error::ErrorKind;

#[derive(Parser)]
#[command(
    name = "sdr",
    version,
    about = "Refine a dense depth estimate with sparse depth measurements",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes (image, depth, corrupted estimate, sparse points)
    Synth(commands::synth::Args),
    /// Train the refinement model on synthetic scenes
    Train(commands::train::Args),
    /// Refine one depth map from files
    Refine(commands::refine::Args),
    /// Evaluate a trained model across sparsity levels
    Sweep(commands::sweep::Args),
    /// Check analytic gradients against finite differences
    Gradcheck(commands::gradcheck::Args),
    /// Run fast internal consistency checks
    Selftest(commands::selftest::Args),
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ClapKind::DisplayHelp | ClapKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Synth(args) => commands::synth::run(args),
        Cmd::Train(args) => commands::train::run(args),
        Cmd::Refine(args) => commands::refine::run(args),
        Cmd::Sweep(args) => commands::sweep::run(args),
        Cmd::Gradcheck(args) => commands::gradcheck::run(args),
        Cmd::Selftest(args) => commands::selftest::run(args),
    };
    match result {
        Ok(()) => 0,
        Err(CmdError::Core(e)) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            }
        }
        Err(CmdError::Threshold(msg)) => {
            eprintln!("check failed: {msg}");
            4
        }
    }
}
