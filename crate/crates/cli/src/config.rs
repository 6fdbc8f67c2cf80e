//! Run configuration: a TOML file whose keys mirror the long flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gridhealth::canon::Fuel;
use gridhealth::dispersion::PlumeParams;
use gridhealth::forecaster::Architecture;
use gridhealth::scheduler::{SessionDistributions, Strategy};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub hours: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_fuel: Option<Fuel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub health_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plume: Option<PlumeParams>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub future: Option<bool>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub signal: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_signal: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sessions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_sessions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Vec<Strategy>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fleet: Option<SessionDistributions>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T> {
        match value {
            Some(v) => Ok(v),
            None => bail!("missing required setting `{key}` (flag --{} or config key)", key.replace('_', "-")),
        }
    }
}

/// Overwrites `slot` when the flag was given.
pub fn overlay<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

/// Fails unless every given input path names an existing file.
pub fn check_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            bail!("input file {} does not exist", p.display());
        }
    }
    Ok(())
}
