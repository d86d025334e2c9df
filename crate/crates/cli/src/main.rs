//! `ctsel`: simulate cohorts, train surrogates, select treatments and
//! report sweeps from the command line.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! run fails after its configuration was accepted.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(ctsel::Error),
}

impl From<ctsel::Error> for CliError {
    fn from(e: ctsel::Error) -> Self {
        match e {
            ctsel::Error::Config(m) => CliError::Usage(m),
            other => CliError::Run(other),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ctsel", version, about = "Uncertainty-aware counterfactual treatment selection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand accepts.
#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration layered over the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set selection.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (takes precedence over CTSEL_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Upper bound on concurrent jobs.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a cohort and write it to a dataset directory.
    Simulate {
        #[arg(long, value_parser = ["cvs", "covid"])]
        dataset: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train a surrogate (or an ensemble of them) on a dataset.
    Train {
        #[arg(long, value_parser = ["crn-lite", "gnet-lite"])]
        model: Option<String>,
        /// Train N independent members as a deep ensemble (1 = mc-dropout).
        #[arg(long, value_name = "N")]
        ensemble: Option<usize>,
        #[arg(long, value_parser = ["mc-dropout", "ensemble", "geometric"])]
        method: Option<String>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Select a horizon treatment for one test patient.
    Select {
        #[arg(long, value_name = "DIR")]
        model_dir: PathBuf,
        /// Dataset directory; defaults to the one the model was trained on.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        lambda: Option<f64>,
        #[arg(long, value_parser = ["range", "soft", "soft-paper", "tanh"])]
        constraint: Option<String>,
        /// Test-split patient index.
        #[arg(long, default_value_t = 0)]
        patient: usize,
    },
    /// Run the λ sweep and write records, summary and curves.
    Sweep {
        /// Dataset directory; generated from the configuration when absent.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Reuse trained handles stored here, training missing ones.
        #[arg(long, value_name = "DIR")]
        model_cache: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Compare least-uncertain deferral against random deferral.
    Deferral {
        #[arg(long, value_name = "FILE")]
        records: PathBuf,
        /// Output CSV; defaults to deferral.csv beside the records.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Retrain with each balancing weight on a confounded cohort.
    Confounding {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Aggregate records into summary.csv and curves.svg.
    Report {
        #[arg(long, value_name = "FILE")]
        records: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
