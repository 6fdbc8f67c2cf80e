//! Fuel-mix to health-impact pipeline: ingestion, emissions, dispersion,
//! health valuation, health-weighted forecasting and health-aware EV
//! charging schedules.

pub mod autograd;
pub mod canon;
pub mod dispersion;
pub mod emissions;
pub mod forecaster;
pub mod health;
pub mod ingest;
pub mod scheduler;
pub mod synth;
