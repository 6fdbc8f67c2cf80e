//! One function per subcommand. Each resolves its settings, validates
//! inputs, writes outputs through [`Outputs`] and finishes with a manifest.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use gridhealth::dispersion::PlumeParams;
use gridhealth::forecaster::{
    beta_sweep, evaluate, fit, forecast_signals, write_history, write_tradeoff, Checkpoint, Dataset, TrainConfig,
    MAX_BETA,
};
use gridhealth::health::{load_signals, write_signals, HealthBundle, HealthSignal};
use gridhealth::ingest::{impute_missing, load_fuel_mix, normalize_mix, write_fuel_mix, Flag, FuelCategoryMap, FuelMixSeries};
use gridhealth::scheduler::{
    evaluate_fleet, read_sessions, sample_sessions, write_sessions, SessionDistributions, Strategy,
};
use gridhealth::synth::{default_plume, default_session_distributions, synthesize, SynthConfig};

use crate::config::{check_inputs, RunConfig};
use crate::manifest::Outputs;

pub const DATASET_FILE: &str = "dataset.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const TRADEOFF_FILE: &str = "tradeoff.csv";
pub const SIGNAL_FILE: &str = "signal.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const SESSIONS_FILE: &str = "sessions.csv";

const DEFAULT_BETAS: [f64; 2] = [0.5, MAX_BETA];
const DEFAULT_FLEET_SIZE: usize = 100;

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    Ok(RunConfig::require(&cfg.out, "out")?.as_path())
}

fn csv_bytes<F>(write: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let raw = RunConfig::require(&cfg.dataset, "dataset")?;
    let mut inputs: Vec<&Path> = vec![raw];
    if let Some(m) = &cfg.map {
        inputs.push(m);
    }
    check_inputs(&inputs)?;
    let out = out_dir(cfg)?;
    let period = cfg.period.unwrap_or(24);

    let map = match &cfg.map {
        Some(m) => FuelCategoryMap::load(m)?,
        None => FuelCategoryMap::identity(),
    };
    let series = load_fuel_mix(raw, &map)?;
    let missing = series.count_flag(Flag::Missing);
    let clean = normalize_mix(&impute_missing(&series, period)?)?;
    let imputed = clean.count_flag(Flag::Imputed);

    let mut outputs = Outputs::begin(out)?;
    outputs.write(DATASET_FILE, &csv_bytes(|b| Ok(write_fuel_mix(b, &clean)?))?)?;
    outputs.finish("ingest", None, cfg, &inputs)?;
    println!("records: {}", clean.len());
    println!("missing: {missing}");
    println!("imputed: {imputed}");
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    if let Some(d) = &cfg.health_dir {
        ensure!(d.is_dir(), "health config directory {} does not exist", d.display());
    }
    let out = out_dir(cfg)?;
    let seed = cfg.seed.unwrap_or(0);
    let defaults = SynthConfig::default();
    let synth_cfg = SynthConfig {
        hours: cfg.hours.unwrap_or(defaults.hours),
        start_hour: defaults.start_hour,
        noise: cfg.noise.unwrap_or(defaults.noise),
        force_fuel: cfg.force_fuel,
    };
    let plume: PlumeParams = cfg.plume.clone().unwrap_or_else(default_plume);
    let health = cfg.health_dir.as_deref().map(load_health_dir).transpose()?;
    let bundle = synthesize(&synth_cfg, &plume, health, seed)?;

    let mut outputs = Outputs::begin(out)?;
    for (name, bytes) in bundle.render()? {
        outputs.write(name, &bytes)?;
    }
    let mut resolved = cfg.clone();
    resolved.plume = Some(plume);
    resolved.hours = Some(synth_cfg.hours);
    resolved.noise = Some(synth_cfg.noise);
    outputs.finish("synth", Some(seed), &resolved, &[])?;
    println!("hours: {}", bundle.series.len());
    println!("receptors: {}", bundle.health.matrix.num_receptors());
    Ok(())
}

/// The health config files without a matrix; a placeholder matrix is
/// replaced from the plume during synthesis.
fn load_health_dir(dir: &Path) -> Result<HealthBundle> {
    use gridhealth::emissions::EmissionFactorTable;
    use gridhealth::health::{read_profiles, read_responses, read_valuations, CR_FILE, FACTORS_FILE, RECEPTORS_FILE, VALUATIONS_FILE};
    let open = |name: &str| {
        let p = dir.join(name);
        File::open(&p).with_context(|| format!("opening {}", p.display()))
    };
    let factors = EmissionFactorTable::from_reader(open(FACTORS_FILE)?)?;
    let profiles = read_profiles(open(RECEPTORS_FILE)?)?;
    let responses = read_responses(open(CR_FILE)?, &factors.pollutant_names)?;
    let valuations = read_valuations(open(VALUATIONS_FILE)?)?;
    let matrix = gridhealth::dispersion::SourceReceptorMatrix::new(
        factors.pollutant_names.clone(),
        profiles.iter().map(|p| p.receptor_id.clone()).collect(),
        vec![vec![0.0; profiles.len()]; factors.pollutant_names.len()],
    )?;
    Ok(HealthBundle {
        factors,
        matrix,
        profiles,
        responses,
        valuations,
    })
}

fn load_mix(path: &Path) -> Result<FuelMixSeries> {
    let series = load_fuel_mix(path, &FuelCategoryMap::identity())?;
    ensure!(
        series.count_flag(Flag::Missing) == 0,
        "{} has missing cells; run `gridhealth ingest` first",
        path.display()
    );
    Ok(series)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, Vec<PathBuf>)> {
    let mix_path = RunConfig::require(&cfg.dataset, "dataset")?;
    let label_path = RunConfig::require(&cfg.labels, "labels")?;
    check_inputs(&[mix_path, label_path])?;
    let series = load_mix(mix_path)?;
    let labels = load_signals(label_path)?;
    Ok((Dataset::new(&series, &labels)?, vec![mix_path.clone(), label_path.clone()]))
}

fn train_config(cfg: &RunConfig, beta: f64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let tc = TrainConfig {
        architecture: cfg.architecture.unwrap_or(d.architecture),
        beta,
        window: cfg.window.unwrap_or(d.window),
        epochs: cfg.epochs.unwrap_or(d.epochs),
        step_size: cfg.lr.unwrap_or(d.step_size),
        batch_size: cfg.batch.unwrap_or(d.batch_size),
        seed: cfg.seed.unwrap_or(d.seed),
    };
    ensure!(matches!(tc.window, 24 | 72), "window must be 24 or 72, got {}", tc.window);
    tc.validate()?;
    Ok(tc)
}

/// Records every resolved training setting in the manifest config.
fn resolve_training(cfg: &RunConfig, tc: &TrainConfig) -> RunConfig {
    let mut r = cfg.clone();
    r.architecture = Some(tc.architecture);
    r.window = Some(tc.window);
    r.epochs = Some(tc.epochs);
    r.lr = Some(tc.step_size);
    r.batch = Some(tc.batch_size);
    r.seed = Some(tc.seed);
    r
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (data, inputs) = load_dataset(cfg)?;
    let out = out_dir(cfg)?;
    let tc = train_config(cfg, cfg.beta.unwrap_or(TrainConfig::default().beta))?;
    let trained = fit(&data, &tc)?;
    let ckpt = Checkpoint::new(&trained.model, &trained.converter, &tc, &data.fuel_names);

    let mut outputs = Outputs::begin(out)?;
    outputs.write(CHECKPOINT_FILE, ckpt.to_json()?.as_bytes())?;
    outputs.write(HISTORY_FILE, &csv_bytes(|b| Ok(write_history(b, &trained.history)?))?)?;
    let mut resolved = resolve_training(cfg, &tc);
    resolved.beta = Some(tc.beta);
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    outputs.finish("train", Some(tc.seed), &resolved, &inputs)?;
    if let Some(last) = trained.history.last() {
        println!("epochs: {}", tc.epochs);
        println!("train_loss: {}", last.train_loss);
        println!("val_loss: {}", last.val_loss);
    }
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let (data, inputs) = load_dataset(cfg)?;
    let out = out_dir(cfg)?;
    let betas = cfg.betas.clone().unwrap_or_else(|| DEFAULT_BETAS.to_vec());
    ensure!(!betas.is_empty(), "no β values given");
    let template = train_config(cfg, betas[0])?;
    let points = beta_sweep(&data, &betas, &template)?;

    let mut outputs = Outputs::begin(out)?;
    outputs.write(TRADEOFF_FILE, &csv_bytes(|b| Ok(write_tradeoff(b, &points)?))?)?;
    let mut resolved = resolve_training(cfg, &template);
    resolved.betas = Some(betas);
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    outputs.finish("sweep", Some(template.seed), &resolved, &inputs)?;
    for p in &points {
        println!("beta {}: fuel_nmae {} health_nmae {}", p.beta, p.fuel_nmae, p.health_nmae);
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<()> {
    let ckpt_path = RunConfig::require(&cfg.checkpoint, "checkpoint")?;
    let future = cfg.future.unwrap_or(false);
    let out = out_dir(cfg)?;
    let raw = std::fs::read_to_string(ckpt_path).with_context(|| format!("reading {}", ckpt_path.display()))?;
    let ckpt = Checkpoint::from_json(&raw)?;
    let window = ckpt.train_config.window;
    if let Some(w) = cfg.window {
        ensure!(w == window, "checkpoint was trained with window {window}, not {w}");
    }
    let fuels = ckpt.fuels.clone();
    let seed = ckpt.seed;
    let (model, converter) = ckpt.into_parts()?;

    let (signals, inputs): (Vec<HealthSignal>, Vec<PathBuf>) = if future {
        let mix_path = RunConfig::require(&cfg.dataset, "dataset")?;
        check_inputs(&[ckpt_path, mix_path])?;
        let series = load_mix(mix_path)?;
        ensure!(series.fuel_names == fuels, "dataset fuels {:?} differ from checkpoint fuels {:?}", series.fuel_names, fuels);
        let history: Vec<Vec<f64>> = series.records.iter().map(|r| r.shares.clone()).collect();
        let last = series.records.last().map(|r| r.timestamp).context("empty dataset")?;
        let signals = forecast_signals(&model, &converter, &history, last + 1)?;
        println!("forecast_hours: {}", signals.len());
        (signals, vec![ckpt_path.clone(), mix_path.clone()])
    } else {
        check_inputs(&[ckpt_path])?;
        let (data, mut inputs) = load_dataset(cfg)?;
        ensure!(data.fuel_names == fuels, "dataset fuels {:?} differ from checkpoint fuels {:?}", data.fuel_names, fuels);
        let splits = data.splits(window)?;
        let report = evaluate(&model, &converter, &data, &splits.test)?;
        println!("test_windows: {}", splits.test.len());
        println!("fuel_nmae: {}", report.fuel_nmae);
        println!("health_nmae: {}", report.health_nmae);
        inputs.insert(0, ckpt_path.clone());
        (report.signals, inputs)
    };

    let mut outputs = Outputs::begin(out)?;
    outputs.write(SIGNAL_FILE, &csv_bytes(|b| Ok(write_signals(b, &signals)?))?)?;
    let mut resolved = cfg.clone();
    resolved.window = Some(window);
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    outputs.finish("predict", Some(seed), &resolved, &inputs)?;
    Ok(())
}

/// Sampling settings aligned to the signal: start days begin at the first
/// midnight and every session ends inside the signal.
fn fleet_for(signal: &[HealthSignal]) -> Result<SessionDistributions> {
    let first = signal.first().context("empty signal")?.timestamp;
    let first_slot = ((24 - first.rem_euclid(24)) % 24) as usize;
    let usable = signal.len().saturating_sub(first_slot);
    ensure!(usable >= 48, "signal needs at least 48 hours after its first midnight to sample sessions");
    let mut d = default_session_distributions((usable - 48) / 24 + 1);
    d.first_slot = first_slot;
    Ok(d)
}

pub fn schedule(cfg: &RunConfig) -> Result<()> {
    let signal_path = RunConfig::require(&cfg.signal, "signal")?;
    let mut inputs: Vec<&Path> = vec![signal_path];
    inputs.extend(cfg.cost_signal.as_deref());
    inputs.extend(cfg.sessions.as_deref());
    check_inputs(&inputs)?;
    let out = out_dir(cfg)?;
    let seed = cfg.seed.unwrap_or(0);

    let signal = load_signals(signal_path)?;
    let cost_signal = cfg.cost_signal.as_deref().map(load_signals).transpose()?;
    if let Some(c) = &cost_signal {
        ensure!(
            c.iter().map(|s| s.timestamp).eq(signal.iter().map(|s| s.timestamp)),
            "cost signal timestamps differ from the signal"
        );
    }
    let mut resolved = cfg.clone();
    let (sessions, sampled) = match &cfg.sessions {
        Some(p) => (read_sessions(File::open(p).with_context(|| format!("opening {}", p.display()))?)?, false),
        None => {
            let dists = match &cfg.fleet {
                Some(d) => d.clone(),
                None => fleet_for(&signal)?,
            };
            let n = cfg.num_sessions.unwrap_or(DEFAULT_FLEET_SIZE);
            let fleet = sample_sessions(n, &dists, seed)?;
            resolved.fleet = Some(dists);
            resolved.num_sessions = Some(n);
            (fleet, true)
        }
    };
    let strategies = cfg.strategy.clone().unwrap_or_else(|| Strategy::ALL.to_vec());
    ensure!(!strategies.is_empty(), "no strategies given");
    let result = evaluate_fleet(&sessions, &signal, &strategies, cost_signal.as_deref())?;
    if cost_signal.is_none() {
        if let Some(opt) = result.totals.get(&Strategy::Optimal) {
            for (st, total) in &result.totals {
                if opt > total {
                    bail!("optimal total {opt} exceeds {st} total {total}");
                }
            }
        }
    }

    let mut outputs = Outputs::begin(out)?;
    if sampled {
        outputs.write(SESSIONS_FILE, write_sessions(&sessions).as_bytes())?;
    }
    outputs.write(RESULTS_FILE, result.to_csv().as_bytes())?;
    resolved.strategy = Some(strategies);
    outputs.finish("schedule", Some(seed), &resolved, &inputs)?;
    println!("sessions: {}", sessions.len());
    print!("{}", result.to_csv());
    Ok(())
}
