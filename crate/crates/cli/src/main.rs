use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use era_core::{EnvKind, Suite};

mod config;
mod run;

use config::{parse_seeds, FileConfig, SeedList, Overrides, RunConfig, TrainKind, UsageError};

#[derive(Parser)]
#[command(name = "era-kit", version, about = "Entropy regularizing activations: checks and small training runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Run a property suite and report pass/fail per property.
    Verify {
        #[arg(long, default_value = "all", value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, default_value_t = era_core::verify::DEFAULT_SEED)]
        seed: u64,
        /// Also write the report as `verify-<suite>.jsonl` here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Train one run per seed and write records, checkpoints and a summary.
    Train {
        #[arg(value_parser = parse_kind)]
        kind: TrainKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_env)]
        env: Option<EnvKind>,
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated, e.g. `0,1,2`.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Option<SeedList>,
        #[arg(long)]
        omega_low: Option<f64>,
        /// `inf` disables the upper branch.
        #[arg(long)]
        omega_high: Option<f64>,
        #[arg(long)]
        k: Option<f64>,
        /// Target entropy (sac-era, classifier).
        #[arg(long)]
        h0: Option<f64>,
        #[arg(long)]
        sigma_min: Option<f64>,
        #[arg(long)]
        sigma_max: Option<f64>,
        /// Polyak rate for sac kinds, ERA temperature for the classifier.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Align run records on their step grid and emit per-metric deltas
    /// against the first record.
    Compare {
        #[arg(required = true, num_args = 2..)]
        records: Vec<PathBuf>,
        /// Write `compare.csv` here instead of printing.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|_| format!("unknown suite {s:?}; expected one of {}", Suite::NAMES.join(", ")))
}

fn parse_kind(s: &str) -> Result<TrainKind, String> {
    TrainKind::parse(s).ok_or_else(|| format!("unknown run kind {s:?}; expected one of {}", TrainKind::NAMES.join(", ")))
}

fn parse_env(s: &str) -> Result<EnvKind, String> {
    s.parse().map_err(|_| format!("unknown env {s:?}; expected pointmass or pendulum"))
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Verify {
            suite,
            seed,
            out_dir,
            format,
        } => run::verify(suite, seed, out_dir.as_deref(), matches!(format, Format::Jsonl)),
        Command::Train {
            kind,
            config,
            env,
            steps,
            seeds,
            omega_low,
            omega_high,
            k,
            h0,
            sigma_min,
            sigma_max,
            tau,
            out_dir,
        } => {
            let file = config.as_deref().map(FileConfig::read).transpose()?;
            let overrides = Overrides {
                env,
                steps,
                seeds: seeds.map(|s| s.0),
                omega_low,
                omega_high,
                k,
                h0,
                sigma_min,
                sigma_max,
                tau,
                out_dir,
            };
            let cfg = RunConfig::build(kind, file, overrides)?;
            run::train(&cfg)?;
            Ok(true)
        }
        Command::Compare { records, out_dir } => {
            run::compare(&records, out_dir.as_deref())?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
