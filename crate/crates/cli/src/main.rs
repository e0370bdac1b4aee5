//! `sdcm`: simulate, train, predict, update, tune and evaluate statistical
//! dynamic calibration maps.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdcm::online::UpdateConfig;
use sdcm::Error;

use commands::{Experiment, UpdateArgs};
use config::{ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "sdcm", version, about = "Statistical dynamic sensor calibration")]
struct Cli {
    /// TOML experiment config; its values take precedence over flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate BGL profiles, run the sensor model and write one CSV per series
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split, fit hyperparameters and write a model artifact
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the sensed value along a series
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feed a reference-annotated series through the online update rule
    Update {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        events: Option<PathBuf>,
        /// Output of `sdcm tune`
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, requires_all = ["c", "eps_gamma"])]
        eps_u: Option<f64>,
        #[arg(long, requires_all = ["eps_u", "eps_gamma"])]
        c: Option<f64>,
        #[arg(long, requires_all = ["eps_u", "c"])]
        eps_gamma: Option<f64>,
        /// Re-optimize the hyperparameters after the updates
        #[arg(long)]
        refit: bool,
    },
    /// Choose update thresholds by Latin hypercube search on a tuning series
    Tune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment and write metrics files
    Evaluate {
        #[arg(long, value_enum, default_value = "all")]
        experiment: Experiment,
        /// Trained artifact; trained from the configuration when omitted
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::InvalidState(_) | Error::Serde(_) => 2,
        Error::Numerical(_) => 3,
        Error::Io(_) => 4,
        Error::Csv(c) if c.is_io_error() => 4,
        Error::Csv(_) => 2,
    }
}

fn run(cli: Cli) -> sdcm::Result<()> {
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    log::info!("config hash {}", cfg.hash());
    match cli.command {
        Command::Simulate { out } => commands::simulate(&cfg, out),
        Command::Train { out } => commands::train(&cfg, out),
        Command::Predict { model, series, out } => commands::predict(&cfg, &model, &series, out),
        Command::Tune { model, series, out } => commands::tune(&cfg, &model, &series, out),
        Command::Update { model, series, out, events, params, eps_u, c, eps_gamma, refit } => {
            let explicit = match (eps_u, c, eps_gamma) {
                (Some(e), Some(c), Some(g)) => Some(UpdateConfig::new(e, c, g)?),
                _ => None,
            };
            commands::update(&cfg, UpdateArgs { model, series, out, events, params, explicit, refit })
        }
        Command::Evaluate { experiment, model, out } => {
            commands::evaluate(&cfg, experiment, model.as_deref(), out).map(|_| ())
        }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
