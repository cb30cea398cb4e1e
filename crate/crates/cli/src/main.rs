//! `nlmem`: simulate, fit, run regularization paths, check the exact toy
//! solution and run replicated studies. Every command writes CSV files to
//! `--out` and prints a short summary.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "nlmem", version, about = "High-dimensional covariate selection in nonlinear mixed-effects models")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one dataset from a scenario.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Penalized (or, at lambda = 0, unpenalized) fit at a single penalty.
    Fit {
        #[command(flatten)]
        input: DataArgs,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Keep every n-th iterate in trajectory.csv (0 keeps none).
        #[arg(long, default_value_t = 10)]
        trajectory_every: usize,
    },
    /// Regularization path with eBIC selection.
    Path {
        #[command(flatten)]
        input: DataArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Use this single penalty as the whole grid.
        #[arg(long, conflicts_with_all = ["grid_max", "grid_ratio", "grid_n"])]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare AWPSG with the closed-form toy solution.
    OracleCheck {
        /// Toy scenario overriding the default dimensions and variances.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Penalty levels to check.
        #[arg(long, value_delimiter = ',', default_values_t = [0.6, 1.0, 2.0])]
        lambda: Vec<f64>,
        /// Random initializations per level.
        #[arg(long, default_value_t = 5)]
        inits: usize,
        /// Largest tolerated relative error on nonzero coordinates.
        #[arg(long, default_value_t = 0.02)]
        tol: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replicated simulation study.
    Study {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Override the scenario's replicate count.
        #[arg(long)]
        replicates: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Long-format observations: id,time,y[,observed][,constants...].
    #[arg(long)]
    data: PathBuf,
    /// Headed covariate matrix, one row per individual (or observation).
    #[arg(long)]
    covariates: PathBuf,
    /// Scenario supplying the model, constants, start and algorithm settings.
    #[arg(long, required_unless_present = "model")]
    scenario: Option<PathBuf>,
    /// Model preset used when no scenario is given.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    grid_max: Option<f64>,
    #[arg(long)]
    grid_ratio: Option<f64>,
    #[arg(long)]
    grid_n: Option<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<nlmem_core::Error>() {
        Some(e) if e.is_usage() => 2,
        Some(_) => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
