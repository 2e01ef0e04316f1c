//! `liftkd`: train teachers, distill students and run the experiments from a
//! TOML config.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors (nothing is
//! written), 1 for failures during a run.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "liftkd", version, about = "Coarse-to-fine distillation of toy diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a teacher on the denoising loss and save `teacher.json`.
    TrainTeacher(RunArgs),
    /// Distill a student from the teacher; writes `run.csv`, `report.json`
    /// and `student.json`.
    Distill(RunArgs),
    /// Sample with per-step least-squares correction of the student; writes
    /// `steps.csv` and `samples.json`.
    CorrectSample(RunArgs),
    /// Export the teacher/student error map at the middle timestep to
    /// `error_map.json`.
    ErrorMap(RunArgs),
    /// Teachers x students x methods x seeds grid; writes `summary.csv` and
    /// one log per run under `runs/`.
    CapacityGap(RunArgs),
    /// One run per weight scheduler; writes `run_<scheduler>.csv` and
    /// `comparison.csv`.
    AblateScheduler(RunArgs),
    /// Print the default configuration as TOML.
    Defaults,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Parallel runs for grid commands.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn main() -> ExitCode {
    let defaults = commands::defaults_toml();
    let matches = Cli::command()
        .after_long_help(format!("Default configuration:\n\n{defaults}"))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Defaults => {
            print!("{defaults}");
            Ok(())
        }
        Command::TrainTeacher(a) => commands::prepare(&a.config, &a.out).and_then(|cfg| commands::train_teacher(&cfg, &a.out)),
        Command::Distill(a) => commands::prepare(&a.config, &a.out).and_then(|cfg| commands::distill(&cfg, &a.out)),
        Command::CorrectSample(a) => {
            commands::prepare(&a.config, &a.out).and_then(|cfg| commands::correct_sample(&cfg, &a.out))
        }
        Command::ErrorMap(a) => commands::prepare(&a.config, &a.out).and_then(|cfg| commands::error_map(&cfg, &a.out)),
        Command::CapacityGap(a) => {
            commands::prepare(&a.config, &a.out).and_then(|cfg| commands::capacity_gap(&cfg, &a.out, a.workers))
        }
        Command::AblateScheduler(a) => {
            commands::prepare(&a.config, &a.out).and_then(|cfg| commands::ablate_scheduler(&cfg, &a.out, a.workers))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: invalid configuration: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: run failed: {e:#}");
            ExitCode::from(1)
        }
    }
}
