//! Synthetic region bundles: an hourly 8-fuel mix with daily and seasonal
//! structure, a plume-derived source-receptor matrix, a reference health
//! config and per-hour labels computed through the full health chain.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::{Fuel, Pollutant};
use crate::dispersion::{build_plume_matrix, DispersionError, PlumeParams, ReceptorOffset};
use crate::emissions::{EmissionFactorTable, EmissionsError};
use crate::health::{
    read_profiles, read_responses, read_valuations, write_profiles, write_responses, write_signals,
    write_valuations, HealthBundle, HealthError, HealthSignal, CR_FILE, FACTORS_FILE, MATRIX_FILE,
    RECEPTORS_FILE, VALUATIONS_FILE,
};
use crate::ingest::{write_fuel_mix, FuelMixRecord, FuelMixSeries, IngestError};
use crate::scheduler::{DemandDistribution, SessionDistributions};

pub const MIX_FILE: &str = "fuel_mix.csv";
pub const LABELS_FILE: &str = "labels.csv";

const DEFAULT_FACTORS: &str = include_str!("../data/emission_factors.csv");
const DEFAULT_RECEPTORS: &str = include_str!("../data/receptors.csv");
const DEFAULT_CR: &str = include_str!("../data/cr.csv");
const DEFAULT_VALUATIONS: &str = include_str!("../data/valuations.csv");

/// 2023-01-01T00:00Z in hours since the epoch.
pub const DEFAULT_START_HOUR: i64 = 464_592;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Dispersion(#[from] DispersionError),
    #[error(transparent)]
    Health(#[from] HealthError),
    #[error(transparent)]
    Emissions(#[from] EmissionsError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub hours: usize,
    pub start_hour: i64,
    /// Scale of the multiplicative weather and demand noise; 0 gives a
    /// purely periodic series.
    pub noise: f64,
    /// Replaces every record with a unit share on this fuel.
    pub force_fuel: Option<Fuel>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            hours: 8760,
            start_hour: DEFAULT_START_HOUR,
            noise: 1.0,
            force_fuel: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.hours == 0 {
            return Err(SynthError::InvalidParams("hours must be positive".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(SynthError::InvalidParams(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Downwind receptors around one source region.
pub fn default_plume() -> PlumeParams {
    let r = |id: &str, x: f64, y: f64| ReceptorOffset {
        id: id.into(),
        downwind_x: x,
        crosswind_y: y,
    };
    PlumeParams {
        wind_speed: 4.5,
        effective_height: 60.0,
        sigma_y_coeff: 0.22,
        sigma_z_coeff: 0.2,
        receptors: vec![
            r("r01", 12_000.0, 1_500.0),
            r("r02", 20_000.0, -3_000.0),
            r("r03", 32_000.0, 5_000.0),
            r("r04", 50_000.0, -6_000.0),
            r("r05", 80_000.0, 9_000.0),
            r("r06", 120_000.0, -18_000.0),
        ],
    }
}

/// The reference health config with a matrix from `plume`.
pub fn reference_bundle(plume: &PlumeParams) -> Result<HealthBundle, SynthError> {
    let factors = EmissionFactorTable::from_reader(DEFAULT_FACTORS.as_bytes())?.select(&Fuel::ALL)?;
    let matrix = build_plume_matrix(plume, &factors.pollutant_names)?;
    Ok(HealthBundle::new(
        factors,
        matrix,
        read_profiles(DEFAULT_RECEPTORS.as_bytes())?,
        read_responses(DEFAULT_CR.as_bytes(), &Pollutant::ALL)?,
        read_valuations(DEFAULT_VALUATIONS.as_bytes())?,
    )?)
}

/// Home and workplace charging: arrivals cluster around 08:00 and 18:00,
/// departures around 17:00 the same day and 07:30 the next.
pub fn default_session_distributions(day_span: usize) -> SessionDistributions {
    let bump = |x: f64, mu: f64, sd: f64| (-(x - mu).powi(2) / (2.0 * sd * sd)).exp();
    let arrival_hist = (0..24)
        .map(|h| {
            let h = h as f64;
            0.02 + 0.6 * bump(h, 8.0, 1.2) + bump(h, 18.0, 1.5)
        })
        .collect();
    let departure_hist = (0..48)
        .map(|h| {
            let h = h as f64;
            0.01 + 0.5 * bump(h, 17.0, 1.5) + bump(h, 31.5, 1.2)
        })
        .collect();
    SessionDistributions {
        arrival_hist,
        departure_hist,
        demand: DemandDistribution::Normal {
            mean: 18.0,
            std: 8.0,
            min: 2.0,
            max: 60.0,
        },
        rate_kw: 7.2,
        day_span,
        first_slot: 0,
    }
}

/// Smooth multiplicative noise around one.
struct Ar1 {
    state: f64,
    rho: f64,
    innovation: Normal<f64>,
    scale: f64,
}

impl Ar1 {
    fn new(rho: f64, sd: f64, scale: f64) -> Self {
        Self {
            state: 0.0,
            rho,
            innovation: Normal::new(0.0, sd * (1.0 - rho * rho).sqrt()).expect("finite sd"),
            scale,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        self.state = self.rho * self.state + self.innovation.sample(rng);
        (self.state * self.scale).exp()
    }
}

/// Generation by fuel in `Fuel::ALL` order, then normalized.
///
/// Demand peaks in the late afternoon and in summer. Solar follows the sun,
/// wind is strongest at night, nuclear is flat, and dispatchable plants fill
/// the residual in merit order: coal up to an hourly availability that
/// fluctuates with unit cycling, gas, then oil above the gas limit.
pub fn synth_fuel_mix(cfg: &SynthConfig, seed: u64) -> Result<FuelMixSeries, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wind_noise = Ar1::new(0.85, 1.0, 0.5 * cfg.noise);
    let mut cloud_noise = Ar1::new(0.7, 1.0, 0.4 * cfg.noise);
    let mut demand_noise = Ar1::new(0.8, 1.0, 0.04 * cfg.noise);
    let mut coal_noise = Ar1::new(0.5, 1.0, 0.3 * cfg.noise);
    let mut records = Vec::with_capacity(cfg.hours);
    for i in 0..cfg.hours {
        let t = cfg.start_hour + i as i64;
        let hour = t.rem_euclid(24) as f64;
        let day = (t.div_euclid(24)).rem_euclid(365) as f64;
        let season = (2.0 * PI * (day - 196.0) / 365.0).cos();

        let demand = (1.0 + 0.22 * (2.0 * PI * (hour - 11.0) / 24.0).sin() + 0.12 * season)
            * demand_noise.step(&mut rng);
        let daylight = ((hour - 6.5) / 13.0 * PI).sin().max(0.0);
        let solar = 0.42 * daylight * (1.0 + 0.35 * season) * cloud_noise.step(&mut rng).min(1.6);
        let wind = 0.16 * (1.0 + 0.4 * (2.0 * PI * (hour + 2.0) / 24.0).cos()) * (1.0 - 0.3 * season)
            * wind_noise.step(&mut rng);
        let hydro = 0.07 + 0.03 * (2.0 * PI * (day - 120.0) / 365.0).cos();
        let nuclear = 0.22;
        let other = 0.025;

        let mut residual = (demand - solar - wind - hydro - nuclear - other).max(0.05);
        let coal = residual.min((0.28 + 0.04 * season) * coal_noise.step(&mut rng));
        residual -= coal;
        let gas = residual.min(0.38);
        let oil = residual - gas;

        let gen = [coal, gas, oil, nuclear, hydro, wind, solar, other];
        let total: f64 = gen.iter().sum();
        let shares = match cfg.force_fuel {
            Some(f) => Fuel::ALL.iter().map(|x| if *x == f { 1.0 } else { 0.0 }).collect(),
            None => gen.iter().map(|g| g / total).collect(),
        };
        records.push(FuelMixRecord::observed(t, shares));
    }
    Ok(FuelMixSeries::new(Fuel::ALL.to_vec(), records)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthBundle {
    pub series: FuelMixSeries,
    pub plume: PlumeParams,
    pub health: HealthBundle,
    pub labels: Vec<HealthSignal>,
}

/// Mix, matrix and labels for one seed. `health` defaults to
/// [`reference_bundle`]; its matrix is rebuilt from `plume` either way.
pub fn synthesize(
    cfg: &SynthConfig,
    plume: &PlumeParams,
    health: Option<HealthBundle>,
    seed: u64,
) -> Result<SynthBundle, SynthError> {
    let health = match health {
        Some(mut h) => {
            h.factors = h.factors.select(&Fuel::ALL)?;
            h.matrix = build_plume_matrix(plume, &h.factors.pollutant_names)?;
            h.validate()?;
            h
        }
        None => reference_bundle(plume)?,
    };
    let series = synth_fuel_mix(cfg, seed)?;
    let labels = health.impact_series(&series.records)?;
    Ok(SynthBundle {
        series,
        plume: plume.clone(),
        health,
        labels,
    })
}

impl SynthBundle {
    /// File name and contents of every bundle file: the mix, the labels and
    /// the five health config files.
    pub fn render(&self) -> Result<Vec<(&'static str, Vec<u8>)>, SynthError> {
        let mut mix = Vec::new();
        write_fuel_mix(&mut mix, &self.series)?;
        let mut labels = Vec::new();
        write_signals(&mut labels, &self.labels)?;
        let pollutants = &self.health.matrix.pollutant_names;
        Ok(vec![
            (MIX_FILE, mix),
            (LABELS_FILE, labels),
            (FACTORS_FILE, self.health.factors.to_csv().into_bytes()),
            (MATRIX_FILE, self.health.matrix.to_csv().into_bytes()),
            (RECEPTORS_FILE, write_profiles(&self.health.profiles).into_bytes()),
            (CR_FILE, write_responses(&self.health.responses, pollutants).into_bytes()),
            (VALUATIONS_FILE, write_valuations(&self.health.valuations).into_bytes()),
        ])
    }

    /// Writes [`Self::render`] into `dir` and returns the paths written.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| SynthError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::new();
        for (name, bytes) in self.render()? {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}
