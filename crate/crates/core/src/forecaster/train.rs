//! Windowed datasets, the training loop, evaluation and the β sweep.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_beta, composite_loss_graph, nmae, Architecture, ConverterConfig, ForecastError, ForecastModel,
    HealthConverterNet, ModelConfig,
};
use crate::autograd::{Graph, Tensor};
use crate::canon::Fuel;
use crate::health::HealthSignal;
use crate::ingest::FuelMixSeries;

/// Hourly mixes aligned with their health labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub fuel_names: Vec<Fuel>,
    pub timestamps: Vec<i64>,
    pub mix: Vec<Vec<f64>>,
    /// (internal, external) $/MWh.
    pub labels: Vec<[f64; 2]>,
}

impl Dataset {
    /// Pairs every record with the label carrying the same timestamp.
    pub fn new(series: &FuelMixSeries, labels: &[HealthSignal]) -> Result<Self, ForecastError> {
        if series.records.len() != labels.len() {
            return Err(ForecastError::ShapeMismatch(format!(
                "{} mix records but {} labels",
                series.records.len(),
                labels.len()
            )));
        }
        for (r, l) in series.records.iter().zip(labels) {
            if r.timestamp != l.timestamp {
                return Err(ForecastError::ShapeMismatch(format!(
                    "label timestamp {} does not match record {}",
                    l.timestamp, r.timestamp
                )));
            }
            if r.has_missing() {
                return Err(ForecastError::InsufficientData(format!("record {} has missing cells", r.timestamp)));
            }
        }
        Ok(Self {
            fuel_names: series.fuel_names.clone(),
            timestamps: series.records.iter().map(|r| r.timestamp).collect(),
            mix: series.records.iter().map(|r| r.shares.clone()).collect(),
            labels: labels.iter().map(|l| [l.internal_cost, l.external_cost]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.mix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mix.is_empty()
    }

    pub fn num_fuels(&self) -> usize {
        self.fuel_names.len()
    }

    /// Time-ordered 80/20 split with the last tenth of the training part held
    /// out for validation. Windows start on a fixed stride of `window` hours
    /// and belong to the segment that contains their whole target span.
    pub fn splits(&self, window: usize) -> Result<Splits, ForecastError> {
        if window == 0 {
            return Err(ForecastError::InvalidConfig("window must be at least 1".into()));
        }
        let n = self.len();
        if n < 2 * window {
            return Err(ForecastError::InsufficientData(format!(
                "{n} hours, need at least {}",
                2 * window
            )));
        }
        let train_end = n * 8 / 10;
        let fit_end = train_end * 9 / 10;
        let segment = |a: usize, b: usize| -> Vec<usize> {
            (0..)
                .map(|k| k * window)
                .take_while(|s| s + 2 * window <= b)
                .filter(|s| s + window >= a)
                .collect()
        };
        Ok(Splits {
            window,
            train: segment(0, fit_end),
            validation: segment(fit_end, train_end),
            test: segment(train_end, n),
            fit_end,
            train_end,
        })
    }

    fn input(&self, start: usize, window: usize) -> &[Vec<f64>] {
        &self.mix[start..start + window]
    }

    /// Mean label magnitude over the given hours, or 1 when it is zero.
    pub fn label_scale(&self, hours: std::ops::Range<usize>) -> f64 {
        let n = hours.len().max(1) as f64;
        let s: f64 = self.labels[hours].iter().map(|l| (l[0].abs() + l[1].abs()) / 2.0).sum::<f64>() / n;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Train,
    Validation,
    Test,
}

/// Window start indices for each segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub window: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// First validation hour.
    pub fit_end: usize,
    /// First test hour.
    pub train_end: usize,
}

impl Splits {
    pub fn get(&self, segment: Segment) -> &[usize] {
        match segment {
            Segment::Train => &self.train,
            Segment::Validation => &self.validation,
            Segment::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub beta: f64,
    pub window: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::AttentionEncoderDecoder,
            beta: 0.5,
            window: 24,
            epochs: 100,
            step_size: 0.004,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        check_beta(self.beta)?;
        if self.window == 0 || self.batch_size == 0 {
            return Err(ForecastError::InvalidConfig("window and batch size must be positive".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(ForecastError::InvalidConfig("step size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: ForecastModel,
    pub converter: HealthConverterNet,
    pub history: Vec<LossRow>,
    pub splits: Splits,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub beta: f64,
    pub fuel_nmae: f64,
    pub health_nmae: f64,
}

/// Per-hour test predictions together with their error summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fuel_nmae: f64,
    pub internal_nmae: f64,
    pub external_nmae: f64,
    /// Mean of the internal and external NMAE.
    pub health_nmae: f64,
    pub timestamps: Vec<i64>,
    pub mix: Vec<Vec<f64>>,
    pub signals: Vec<HealthSignal>,
}

const DROPOUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

struct Batch {
    inputs: Tensor,
    mix: Tensor,
    impact: Tensor,
}

fn make_batch(data: &Dataset, starts: &[usize], window: usize, label_scale: f64) -> Batch {
    let f = data.num_fuels();
    let rows = starts.len() * window;
    let (mut inputs, mut mix, mut impact) =
        (Vec::with_capacity(rows * f), Vec::with_capacity(rows * f), Vec::with_capacity(rows * 2));
    for &s in starts {
        for t in s..s + window {
            inputs.extend_from_slice(&data.mix[t]);
        }
        for t in s + window..s + 2 * window {
            mix.extend_from_slice(&data.mix[t]);
            impact.push(data.labels[t][0] / label_scale);
            impact.push(data.labels[t][1] / label_scale);
        }
    }
    Batch {
        inputs: Tensor::matrix(rows, f, inputs),
        mix: Tensor::matrix(rows, f, mix),
        impact: Tensor::matrix(rows, 2, impact),
    }
}

/// Eval-mode composite loss averaged over the given windows; NaN when empty.
fn mean_loss(
    model: &ForecastModel,
    converter: &HealthConverterNet,
    data: &Dataset,
    starts: &[usize],
    cfg: &TrainConfig,
) -> f64 {
    if starts.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for chunk in starts.chunks(cfg.batch_size) {
        let b = make_batch(data, chunk, cfg.window, converter.config.output_scale);
        let g = Graph::new();
        let pm = model.params.bind_constants(&g);
        let pc = converter.params.bind_constants(&g);
        let pred = model.forward_graph(&g, &pm, &b.inputs, chunk.len(), None);
        let imp = converter.forward_graph(&g, &pc, pred);
        let (tm, ti) = (g.constant(b.mix), g.constant(b.impact));
        let loss = composite_loss_graph(&g, pred, tm, imp, ti, cfg.beta, chunk.len());
        total += g.scalar(loss) * chunk.len() as f64;
    }
    total / starts.len() as f64
}

/// Joint stochastic gradient descent on the forecaster and the converter.
///
/// The converter's output scale must already be set. History row 0 holds
/// the losses before any update; every later row is an eval-mode pass after
/// that epoch.
pub fn train(
    model: ForecastModel,
    converter: HealthConverterNet,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Trained, ForecastError> {
    cfg.validate()?;
    let (mut model, mut converter) = (model, converter);
    let mc = &model.config;
    if mc.context != cfg.window || mc.horizon != cfg.window {
        return Err(ForecastError::ShapeMismatch(format!(
            "model context/horizon {}/{} but window {}",
            mc.context, mc.horizon, cfg.window
        )));
    }
    if mc.num_fuels != data.num_fuels() || converter.config.num_fuels != data.num_fuels() {
        return Err(ForecastError::ShapeMismatch(format!(
            "model expects {} fuels, dataset has {}",
            mc.num_fuels,
            data.num_fuels()
        )));
    }
    let splits = data.splits(cfg.window)?;
    if splits.train.is_empty() {
        return Err(ForecastError::InsufficientData("no training windows".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let mut history = vec![LossRow {
        epoch: 0,
        train_loss: mean_loss(&model, &converter, data, &splits.train, cfg),
        val_loss: mean_loss(&model, &converter, data, &splits.validation, cfg),
    }];
    let mut order = splits.train.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let b = make_batch(data, chunk, cfg.window, converter.config.output_scale);
            let g = Graph::new();
            let pm = model.params.bind(&g);
            let pc = converter.params.bind(&g);
            let pred = model.forward_graph(&g, &pm, &b.inputs, chunk.len(), Some(&mut rng));
            let imp = converter.forward_graph(&g, &pc, pred);
            let (tm, ti) = (g.constant(b.mix), g.constant(b.impact));
            let loss = composite_loss_graph(&g, pred, tm, imp, ti, cfg.beta, chunk.len());
            if !g.scalar(loss).is_finite() {
                return Err(ForecastError::DivergedLoss { epoch });
            }
            g.backward(loss);
            model.params.sgd_step(&g, &pm, cfg.step_size);
            converter.params.sgd_step(&g, &pc, cfg.step_size);
        }
        if !model.params.is_finite() || !converter.params.is_finite() {
            return Err(ForecastError::DivergedLoss { epoch });
        }
        let row = LossRow {
            epoch,
            train_loss: mean_loss(&model, &converter, data, &splits.train, cfg),
            val_loss: mean_loss(&model, &converter, data, &splits.validation, cfg),
        };
        if !row.train_loss.is_finite() {
            return Err(ForecastError::DivergedLoss { epoch });
        }
        history.push(row);
    }
    Ok(Trained {
        model,
        converter,
        history,
        splits,
    })
}

pub const CONVERTER_HIDDEN: usize = 32;

/// Seeded initialization of both networks for `data` and `cfg`.
pub fn initialize(data: &Dataset, cfg: &TrainConfig) -> Result<(ForecastModel, HealthConverterNet), ForecastError> {
    cfg.validate()?;
    let splits = data.splits(cfg.window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = ForecastModel::new(ModelConfig::new(cfg.architecture, data.num_fuels(), cfg.window), &mut rng)?;
    let converter = HealthConverterNet::new(
        ConverterConfig {
            num_fuels: data.num_fuels(),
            hidden: CONVERTER_HIDDEN,
            output_scale: data.label_scale(0..splits.fit_end),
        },
        &mut rng,
    )?;
    Ok((model, converter))
}

/// [`initialize`] followed by [`train`].
pub fn fit(data: &Dataset, cfg: &TrainConfig) -> Result<Trained, ForecastError> {
    let (model, converter) = initialize(data, cfg)?;
    train(model, converter, data, cfg)
}

/// Forecasts every window in `starts` and scores mixes and converted
/// impacts against the dataset.
pub fn evaluate(
    model: &ForecastModel,
    converter: &HealthConverterNet,
    data: &Dataset,
    starts: &[usize],
) -> Result<EvalReport, ForecastError> {
    if starts.is_empty() {
        return Err(ForecastError::InsufficientData("no evaluation windows".into()));
    }
    let w = model.config.horizon;
    let mut timestamps = Vec::new();
    let mut mix = Vec::new();
    for chunk in starts.chunks(128) {
        let histories: Vec<&[Vec<f64>]> = chunk.iter().map(|&s| data.input(s, model.config.context)).collect();
        for (forecast, &s) in model.predict_batch(&histories)?.into_iter().zip(chunk) {
            let first = s + model.config.context;
            timestamps.extend_from_slice(&data.timestamps[first..first + w]);
            mix.extend(forecast);
        }
    }
    let impacts = converter.predict(&mix)?;
    let truth_rows: Vec<usize> = starts
        .iter()
        .flat_map(|&s| (s + model.config.context)..(s + model.config.context + w))
        .collect();
    let pred_mix: Vec<f64> = mix.iter().flatten().copied().collect();
    let true_mix: Vec<f64> = truth_rows.iter().flat_map(|&t| data.mix[t].iter().copied()).collect();
    let channel = |c: usize| -> Result<f64, ForecastError> {
        let p: Vec<f64> = impacts.iter().map(|i| i[c]).collect();
        let t: Vec<f64> = truth_rows.iter().map(|&r| data.labels[r][c]).collect();
        nmae(&p, &t)
    };
    let fuel_nmae = nmae(&pred_mix, &true_mix)?;
    let (internal_nmae, external_nmae) = (channel(0)?, channel(1)?);
    let signals = timestamps
        .iter()
        .zip(&impacts)
        .map(|(&timestamp, i)| HealthSignal {
            timestamp,
            internal_cost: i[0],
            external_cost: i[1],
        })
        .collect();
    Ok(EvalReport {
        fuel_nmae,
        internal_nmae,
        external_nmae,
        health_nmae: (internal_nmae + external_nmae) / 2.0,
        timestamps,
        mix,
        signals,
    })
}

/// Forecasts the hours after `history` and converts them into signals
/// stamped from `first_timestamp` onward.
pub fn forecast_signals(
    model: &ForecastModel,
    converter: &HealthConverterNet,
    history: &[Vec<f64>],
    first_timestamp: i64,
) -> Result<Vec<HealthSignal>, ForecastError> {
    let mix = model.predict(history)?;
    let impacts = converter.predict(&mix)?;
    Ok(impacts
        .iter()
        .zip(first_timestamp..)
        .map(|(i, timestamp)| HealthSignal {
            timestamp,
            internal_cost: i[0],
            external_cost: i[1],
        })
        .collect())
}

/// One independent seeded run per β, in ascending β order, all on the
/// splits implied by `template.window`.
pub fn beta_sweep(data: &Dataset, betas: &[f64], template: &TrainConfig) -> Result<Vec<TradeoffPoint>, ForecastError> {
    let mut sorted = betas.to_vec();
    for &b in &sorted {
        check_beta(b)?;
    }
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    sorted
        .into_iter()
        .map(|beta| {
            let cfg = TrainConfig { beta, ..template.clone() };
            let t = fit(data, &cfg)?;
            let report = evaluate(&t.model, &t.converter, data, &t.splits.test)?;
            Ok(TradeoffPoint {
                beta,
                fuel_nmae: report.fuel_nmae,
                health_nmae: report.health_nmae,
            })
        })
        .collect()
}

fn io_err(source: std::io::Error) -> ForecastError {
    ForecastError::Io {
        path: "<writer>".into(),
        source,
    }
}

/// `epoch,train_loss,val_loss`
pub fn write_history<W: Write>(mut w: W, rows: &[LossRow]) -> Result<(), ForecastError> {
    writeln!(w, "epoch,train_loss,val_loss").map_err(io_err)?;
    for r in rows {
        writeln!(w, "{},{},{}", r.epoch, r.train_loss, r.val_loss).map_err(io_err)?;
    }
    Ok(())
}

/// `beta,fuel_nmae,health_nmae`
pub fn write_tradeoff<W: Write>(mut w: W, points: &[TradeoffPoint]) -> Result<(), ForecastError> {
    writeln!(w, "beta,fuel_nmae,health_nmae").map_err(io_err)?;
    for p in points {
        writeln!(w, "{},{},{}", p.beta, p.fuel_nmae, p.health_nmae).map_err(io_err)?;
    }
    Ok(())
}
