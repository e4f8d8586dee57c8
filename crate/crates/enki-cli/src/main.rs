//! `enki` command line driver.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use enki::SolverStatus;

#[derive(Parser)]
#[command(
    name = "enki",
    version,
    about = "Iterative ensemble Kalman inversion experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one configuration and write trace.csv, summary.json and manifest.json.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "enki-out")]
        out: PathBuf,
    },
    /// Run every resampling distribution over a range of seeds.
    CompareDistributions {
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "enki-out")]
        out: PathBuf,
    },
    /// Run without resampling over a list of observation noise levels.
    SweepGamma {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "enki-out")]
        out: PathBuf,
    },
}

fn load(path: &std::path::Path) -> Result<config::Config, String> {
    let mut cfg = config::load_config(path)?;
    if let Some(seed) = commands::seed_override()? {
        cfg.solver.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<SolverStatus, String> {
    match cli.command {
        Command::Run { config, out } => commands::run_single(&load(&config)?, &out),
        Command::CompareDistributions {
            config,
            seeds,
            jobs,
            out,
        } => commands::compare_distributions(&load(&config)?, seeds, jobs, &out)
            .map(|()| SolverStatus::ConvergedInnovation),
        Command::SweepGamma {
            config,
            gammas,
            seeds,
            jobs,
            out,
        } => commands::sweep_gamma(&load(&config)?, &gammas, seeds, jobs, &out)
            .map(|()| SolverStatus::ConvergedInnovation),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which would read as an early stop.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(SolverStatus::ConvergedInnovation) => ExitCode::SUCCESS,
        Ok(SolverStatus::EarlyStopped) => ExitCode::from(2),
        Ok(SolverStatus::MaxIterations) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
