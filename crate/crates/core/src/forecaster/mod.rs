//! Fuel-mix forecasting trained with the health-weighted composite loss.

mod checkpoint;
mod converter;
mod model;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use converter::{ConverterConfig, HealthConverterNet};
pub use model::{Architecture, ForecastModel, ModelConfig};
pub use train::{
    beta_sweep, evaluate, fit, forecast_signals, initialize, train, write_history, write_tradeoff, Dataset, EvalReport, LossRow, Segment,
    Splits, TradeoffPoint, TrainConfig, Trained,
};

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Tensor, Var};

pub const MAX_BETA: f64 = 0.998;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("beta must lie in (0, {MAX_BETA}], got {0}")]
    BetaOutOfRange(f64),
    #[error("history has {got} rows, model needs {needed}")]
    ShortHistory { needed: usize, got: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("training loss became non-finite in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("mean absolute truth is zero")]
    ZeroNormalizer,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn check_beta(beta: f64) -> Result<(), ForecastError> {
    if beta > 0.0 && beta <= MAX_BETA {
        Ok(())
    } else {
        Err(ForecastError::BetaOutOfRange(beta))
    }
}

/// Named parameter tensors, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    pub tensors: IndexMap<String, Tensor>,
}

pub type Bound = IndexMap<String, Var>;

impl ParamStore {
    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &Graph) -> Bound {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.param(t.clone())))
            .collect()
    }

    /// Registers every tensor as a constant leaf of `g`.
    pub fn bind_constants(&self, g: &Graph) -> Bound {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect()
    }

    /// Plain gradient step on every bound tensor that received a gradient.
    pub fn sgd_step(&mut self, g: &Graph, bound: &Bound, lr: f64) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(grad) = g.grad(bound[name]) {
                for (v, d) in t.values.iter_mut().zip(&grad.values) {
                    *v -= lr * d;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

pub(crate) fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

pub(crate) fn normal_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let n = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect())
}

/// Composite loss on a graph.
///
/// `pred`/`truth` are `(batch·T) × F` mixes, `pred_impact`/`truth_impact`
/// are `(batch·T) × 2` (internal, external). Squared errors are summed over
/// each window and averaged over the batch.
pub fn composite_loss_graph(
    g: &Graph,
    pred: Var,
    truth: Var,
    pred_impact: Var,
    truth_impact: Var,
    beta: f64,
    batch: usize,
) -> Var {
    let fuel = g.sum_squares(g.sub(pred, truth));
    let impact = g.sum_squares(g.sub(pred_impact, truth_impact));
    let b = batch as f64;
    g.add(g.scale(fuel, beta / b), g.scale(impact, (1.0 - beta) / (2.0 * b)))
}

/// Value of [`composite_loss_graph`] after shape and β validation.
pub fn composite_loss(
    pred: &Tensor,
    truth: &Tensor,
    pred_impact: &Tensor,
    truth_impact: &Tensor,
    beta: f64,
    batch: usize,
) -> Result<f64, ForecastError> {
    check_beta(beta)?;
    if pred.shape != truth.shape {
        return Err(ForecastError::ShapeMismatch(format!("mix {:?} vs {:?}", pred.shape, truth.shape)));
    }
    if pred_impact.shape != truth_impact.shape || pred_impact.cols() != 2 {
        return Err(ForecastError::ShapeMismatch(format!(
            "impact {:?} vs {:?}",
            pred_impact.shape, truth_impact.shape
        )));
    }
    if pred_impact.rows() != pred.rows() || batch == 0 || pred.rows() % batch != 0 {
        return Err(ForecastError::ShapeMismatch(format!(
            "{} mix rows, {} impact rows, batch {batch}",
            pred.rows(),
            pred_impact.rows()
        )));
    }
    let g = Graph::new();
    let vars = [pred, truth, pred_impact, truth_impact].map(|t| g.constant(t.clone()));
    let loss = composite_loss_graph(&g, vars[0], vars[1], vars[2], vars[3], beta, batch);
    Ok(g.scalar(loss))
}

/// `mean|pred − truth| / mean|truth|`.
pub fn nmae(pred: &[f64], truth: &[f64]) -> Result<f64, ForecastError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(ForecastError::ShapeMismatch(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let err: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    let norm: f64 = truth.iter().map(|t| t.abs()).sum();
    if norm == 0.0 {
        return Err(ForecastError::ZeroNormalizer);
    }
    Ok(err / norm)
}
