//! Command-line front end: `run` executes a seeded training experiment from
//! a TOML config; `diagnose` runs one of the randomized verification suites
//! and exits nonzero if any check fails.

use clap::{Parser, Subcommand};
use gawlab::experiment::{
    run_diagnostics, run_experiment, DiagnoseOptions, ExperimentConfig, Suite,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gawlab",
    version,
    about = "Activation-weighted value estimation laboratory",
    long_about = "Train DDPG/TD3/GD2/GD3 agents on desk-scale control environments and run \
                  randomized verification suites for the activated weighting operator, its \
                  bounds, and the bias orderings."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment config and emit CSV/SVG artifacts.
    Run {
        /// Path to the experiment TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list with seeds 0..N-1.
        #[arg(long)]
        seeds: Option<usize>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a verification suite: operator, value-iteration, bias-ordering, or gradcheck.
    Diagnose {
        suite: String,
        /// Trial count (suite-specific default when omitted).
        #[arg(long)]
        trials: Option<usize>,
        /// Master seed for the randomized sweep.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the suite's CSV report.
        #[arg(long, default_value = "diagnostics")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seeds, out } => {
            let mut experiment = match ExperimentConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(n) = seeds {
                experiment.seeds = (0..n as u64).collect();
            }
            if let Some(dir) = out {
                experiment.out_dir = dir.display().to_string();
            }
            match run_experiment(&experiment) {
                Ok(dir) => {
                    println!("artifacts written to {}", dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Diagnose { suite, trials, seed, out } => {
            let suite: Suite = match suite.parse() {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let opts = DiagnoseOptions { trials, seed, out_dir: out };
            match run_diagnostics(suite, &opts) {
                Ok(report) => {
                    println!(
                        "{}: {}/{} pass ({})",
                        report.suite,
                        report.total - report.failed,
                        report.total,
                        report.csv_path.display()
                    );
                    if report.passed() {
                        ExitCode::SUCCESS
                    } else {
                        println!("{}", report.summary_json());
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
