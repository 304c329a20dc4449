//! `newton-lab`: experiments on how accurate the linear solve inside a
//! Newton iteration has to be.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::{cmd_bounds, cmd_md, cmd_sqrt, cmd_verify, RunOptions, VerifyOptions};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "newton-lab",
    about = "Quasi-Newton convergence and stagnation laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (key = value with one [section] per subcommand).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV artifacts and plot scripts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed; falls back to the config, then NEWTON_LAB_SEED, then a
    /// fixed default.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. --set alpha_points=64 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Scratch/output directory for the verification artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed; falls back to NEWTON_LAB_SEED, then a fixed default.
    #[arg(long)]
    seed: Option<u64>,
    /// List the criteria without running them.
    #[arg(long)]
    list: bool,
    /// Override a tolerance, e.g. --set stagnation_roundoff_factor=0.1
    /// (repeatable; for negative-control testing).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Perturbed Newton iteration for square roots over an (alpha, epsilon) grid.
    Sqrt(RunArgs),
    /// SHAKE chain dynamics with the fixed-matrix quasi-Newton constraint solver.
    Md(RunArgs),
    /// Tabulate stagnation thresholds and their Taylor estimates over a parameter grid.
    Bounds(RunArgs),
    /// Run the full verification suite and report one line per criterion.
    Verify(VerifyArgs),
}

/// Die quietly when a downstream pipe closes, like standard unix tools.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sqrt(args) => cmd_sqrt(&run_options(args)),
        Command::Md(args) => cmd_md(&run_options(args)),
        Command::Bounds(args) => cmd_bounds(&run_options(args)),
        Command::Verify(args) => cmd_verify(&VerifyOptions {
            out_dir: args.out,
            seed: args.seed,
            list: args.list,
            overrides: args.set,
        }),
    };
    if let Err(error) = result {
        eprintln!("newton-lab: {}", error.message());
        std::process::exit(error.exit_code());
    }
}

fn run_options(args: RunArgs) -> RunOptions {
    RunOptions {
        config_path: args.config,
        out_dir: args.out,
        seed: args.seed,
        overrides: args.set,
    }
}
