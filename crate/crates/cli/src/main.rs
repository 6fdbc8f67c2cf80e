use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridhealth::canon::Fuel;
use gridhealth::forecaster::Architecture;
use gridhealth::scheduler::Strategy;

mod commands;
mod config;
mod manifest;

use config::{overlay, RunConfig};

/// Health-aware fuel-mix forecasting and EV charging.
#[derive(Parser, Debug)]
#[command(name = "gridhealth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Canonicalize a raw fuel-mix CSV: map labels, impute, normalize.
    Ingest(IngestArgs),
    /// Write a synthetic region bundle with oracle health labels.
    Synth(SynthArgs),
    /// Train one model and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Train once per β and write the fuel/health accuracy trade-off.
    Sweep(SweepArgs),
    /// Write health signals forecast by a checkpoint.
    Predict(PredictArgs),
    /// Simulate charging strategies for a fleet against a signal.
    Schedule(ScheduleArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file whose keys mirror the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    /// Raw fuel-mix CSV.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `raw_label,canonical` CSV; canonical codes map to themselves without it.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Imputation cycle length in hours.
    #[arg(long)]
    period: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    hours: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Give this fuel every hour's whole share.
    #[arg(long)]
    force_fuel: Option<Fuel>,
    /// Directory with emission_factors.csv, receptors.csv, cr.csv and
    /// valuations.csv to use instead of the reference config.
    #[arg(long)]
    health_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelFlags {
    /// Canonical fuel-mix CSV.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Health-signal CSV aligned with the dataset.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_parser = parse_window)]
    window: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// `attention` or `linear`.
    #[arg(long)]
    architecture: Option<Architecture>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Must match the checkpoint's window when given.
    #[arg(long, value_parser = parse_window)]
    window: Option<usize>,
    /// Forecast the window after the end of the dataset instead of the
    /// held-out test windows.
    #[arg(long)]
    future: bool,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[command(flatten)]
    common: Common,
    /// Health-signal CSV the strategies schedule against.
    #[arg(long)]
    signal: Option<PathBuf>,
    /// Re-cost the chosen schedules against this signal instead.
    #[arg(long)]
    cost_signal: Option<PathBuf>,
    /// Sessions CSV; a fleet is sampled when absent.
    #[arg(long)]
    sessions: Option<PathBuf>,
    #[arg(long)]
    num_sessions: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<Strategy>>,
}

fn parse_window(raw: &str) -> Result<usize, String> {
    match raw.trim().parse::<usize>() {
        Ok(w @ (24 | 72)) => Ok(w),
        _ => Err(format!("window must be 24 or 72, got '{raw}'")),
    }
}

fn base(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    overlay(&mut cfg.out, common.out.clone());
    overlay(&mut cfg.seed, common.seed);
    Ok(cfg)
}

fn apply_model_flags(cfg: &mut RunConfig, m: ModelFlags) {
    overlay(&mut cfg.dataset, m.dataset);
    overlay(&mut cfg.labels, m.labels);
    overlay(&mut cfg.window, m.window);
    overlay(&mut cfg.epochs, m.epochs);
    overlay(&mut cfg.lr, m.lr);
    overlay(&mut cfg.batch, m.batch);
    overlay(&mut cfg.architecture, m.architecture);
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(a) => {
            let mut cfg = base(&a.common)?;
            overlay(&mut cfg.dataset, a.dataset);
            overlay(&mut cfg.map, a.map);
            overlay(&mut cfg.period, a.period);
            commands::ingest(&cfg)
        }
        Command::Synth(a) => {
            let mut cfg = base(&a.common)?;
            overlay(&mut cfg.hours, a.hours);
            overlay(&mut cfg.noise, a.noise);
            overlay(&mut cfg.force_fuel, a.force_fuel);
            overlay(&mut cfg.health_dir, a.health_dir);
            commands::synth(&cfg)
        }
        Command::Train(a) => {
            let mut cfg = base(&a.common)?;
            apply_model_flags(&mut cfg, a.model);
            overlay(&mut cfg.beta, a.beta);
            commands::train(&cfg)
        }
        Command::Sweep(a) => {
            let mut cfg = base(&a.common)?;
            apply_model_flags(&mut cfg, a.model);
            overlay(&mut cfg.betas, a.betas);
            commands::sweep(&cfg)
        }
        Command::Predict(a) => {
            let mut cfg = base(&a.common)?;
            overlay(&mut cfg.checkpoint, a.checkpoint);
            overlay(&mut cfg.dataset, a.dataset);
            overlay(&mut cfg.labels, a.labels);
            overlay(&mut cfg.window, a.window);
            if a.future {
                cfg.future = Some(true);
            }
            commands::predict(&cfg)
        }
        Command::Schedule(a) => {
            let mut cfg = base(&a.common)?;
            overlay(&mut cfg.signal, a.signal);
            overlay(&mut cfg.cost_signal, a.cost_signal);
            overlay(&mut cfg.sessions, a.sessions);
            overlay(&mut cfg.num_sessions, a.num_sessions);
            overlay(&mut cfg.strategy, a.strategy);
            commands::schedule(&cfg)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
