//! Concentration-response, monetization and the per-MWh health signal.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::Pollutant;
use crate::dispersion::{apply_source_receptor, DispersionError, SourceReceptorMatrix};
use crate::emissions::{emissions_from_mix, EmissionFactorTable, EmissionsError};
use crate::ingest::FuelMixRecord;

#[derive(Debug, Error)]
pub enum HealthError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no valuation for endpoint '{0}'")]
    MissingValuation(String),
    #[error("no receptor profile for '{0}'")]
    UnknownReceptor(String),
    #[error("receptor '{receptor}' has no baseline rate for endpoint '{endpoint}'")]
    UnknownEndpoint { receptor: String, endpoint: String },
    #[error("concentration change must be non-negative, got {0}")]
    NegativeConcentration(f64),
    #[error("invalid health config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Emissions(#[from] EmissionsError),
    #[error(transparent)]
    Dispersion(#[from] DispersionError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReceptorProfile {
    pub receptor_id: String,
    pub population: f64,
    /// Incidence per person per year, keyed by endpoint id.
    pub baseline_rates: IndexMap<String, f64>,
    pub internal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseForm {
    LogLinear,
    Linear,
}

impl std::str::FromStr for ResponseForm {
    type Err = HealthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "log_linear" | "loglinear" => Ok(ResponseForm::LogLinear),
            "linear" => Ok(ResponseForm::Linear),
            other => Err(HealthError::InvalidConfig(format!("unknown response form '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationResponse {
    pub endpoint_id: String,
    /// Per-pollutant coefficients, (µg/m³)⁻¹.
    pub alpha: Vec<f64>,
    pub form: ResponseForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthValuation {
    pub endpoint_id: String,
    pub dollars_per_case: f64,
}

/// Monetized impact of one MWh at a given hour.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthSignal {
    pub timestamp: i64,
    /// $/MWh borne inside the source territory.
    pub internal_cost: f64,
    /// $/MWh borne outside it.
    pub external_cost: f64,
}

impl HealthSignal {
    pub fn total(&self) -> f64 {
        self.internal_cost + self.external_cost
    }
}

/// Cases attributable to a concentration change at one receptor.
pub fn delta_health(
    profile: &ReceptorProfile,
    cr: &ConcentrationResponse,
    delta_conc: &[f64],
) -> Result<f64, HealthError> {
    if cr.alpha.len() != delta_conc.len() {
        return Err(HealthError::DimensionMismatch(format!(
            "{} coefficients for {} concentrations",
            cr.alpha.len(),
            delta_conc.len()
        )));
    }
    if let Some(&d) = delta_conc.iter().find(|d| !(**d >= 0.0)) {
        return Err(HealthError::NegativeConcentration(d));
    }
    let y0 = *profile
        .baseline_rates
        .get(&cr.endpoint_id)
        .ok_or_else(|| HealthError::UnknownEndpoint {
            receptor: profile.receptor_id.clone(),
            endpoint: cr.endpoint_id.clone(),
        })?;
    let exposure: f64 = cr.alpha.iter().zip(delta_conc).map(|(a, d)| a * d).sum();
    let at_risk = y0 * profile.population;
    Ok(match cr.form {
        ResponseForm::LogLinear => at_risk * -(-exposure).exp_m1(),
        ResponseForm::Linear => at_risk * exposure,
    })
}

/// `Σ_h cases[h] · dollars_per_case[h]`.
pub fn monetize(cases_by_endpoint: &IndexMap<String, f64>, valuations: &[HealthValuation]) -> Result<f64, HealthError> {
    let mut total = 0.0;
    for (endpoint, cases) in cases_by_endpoint {
        let v = valuations
            .iter()
            .find(|v| &v.endpoint_id == endpoint)
            .ok_or_else(|| HealthError::MissingValuation(endpoint.clone()))?;
        total += cases * v.dollars_per_case;
    }
    Ok(total)
}

/// Sums per-receptor costs into (internal, external).
pub fn split_internal_external(
    costs: &IndexMap<String, f64>,
    profiles: &[ReceptorProfile],
) -> Result<(f64, f64), HealthError> {
    let (mut internal, mut external) = (0.0, 0.0);
    for (id, cost) in costs {
        let p = profiles
            .iter()
            .find(|p| &p.receptor_id == id)
            .ok_or_else(|| HealthError::UnknownReceptor(id.clone()))?;
        if p.internal {
            internal += cost;
        } else {
            external += cost;
        }
    }
    Ok((internal, external))
}

/// Everything needed to turn a fuel mix into a [`HealthSignal`].
#[derive(Clone, Debug, PartialEq)]
pub struct HealthBundle {
    pub factors: EmissionFactorTable,
    pub matrix: SourceReceptorMatrix,
    pub profiles: Vec<ReceptorProfile>,
    pub responses: Vec<ConcentrationResponse>,
    pub valuations: Vec<HealthValuation>,
}

pub const FACTORS_FILE: &str = "emission_factors.csv";
pub const MATRIX_FILE: &str = "sr_matrix.csv";
pub const RECEPTORS_FILE: &str = "receptors.csv";
pub const CR_FILE: &str = "cr.csv";
pub const VALUATIONS_FILE: &str = "valuations.csv";

impl HealthBundle {
    pub fn new(
        factors: EmissionFactorTable,
        matrix: SourceReceptorMatrix,
        profiles: Vec<ReceptorProfile>,
        responses: Vec<ConcentrationResponse>,
        valuations: Vec<HealthValuation>,
    ) -> Result<Self, HealthError> {
        let bundle = Self {
            factors,
            matrix,
            profiles,
            responses,
            valuations,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<(), HealthError> {
        if self.factors.pollutant_names != self.matrix.pollutant_names {
            return Err(HealthError::DimensionMismatch(
                "emission factor and source-receptor pollutants differ".into(),
            ));
        }
        let k = self.matrix.num_pollutants();
        for id in &self.matrix.receptor_ids {
            if !self.profiles.iter().any(|p| &p.receptor_id == id) {
                return Err(HealthError::UnknownReceptor(id.clone()));
            }
        }
        for p in &self.profiles {
            if !(p.population >= 0.0) || p.baseline_rates.values().any(|r| !(*r >= 0.0)) {
                return Err(HealthError::InvalidConfig(format!(
                    "receptor '{}' has negative population or rates",
                    p.receptor_id
                )));
            }
        }
        for cr in &self.responses {
            if cr.alpha.len() != k {
                return Err(HealthError::DimensionMismatch(format!(
                    "endpoint '{}' has {} coefficients for {k} pollutants",
                    cr.endpoint_id,
                    cr.alpha.len()
                )));
            }
            if cr.alpha.iter().any(|a| !(*a >= 0.0)) {
                return Err(HealthError::InvalidConfig(format!(
                    "endpoint '{}' has a negative coefficient",
                    cr.endpoint_id
                )));
            }
            if !self.valuations.iter().any(|v| v.endpoint_id == cr.endpoint_id) {
                return Err(HealthError::MissingValuation(cr.endpoint_id.clone()));
            }
            for p in &self.profiles {
                if !p.baseline_rates.contains_key(&cr.endpoint_id) {
                    return Err(HealthError::UnknownEndpoint {
                        receptor: p.receptor_id.clone(),
                        endpoint: cr.endpoint_id.clone(),
                    });
                }
            }
        }
        if self.valuations.iter().any(|v| !(v.dollars_per_case >= 0.0)) {
            return Err(HealthError::InvalidConfig("negative valuation".into()));
        }
        Ok(())
    }

    /// Loads the five config files from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, HealthError> {
        let open = |name: &str| {
            let path = dir.join(name);
            File::open(&path).map_err(|source| HealthError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let factors = EmissionFactorTable::from_reader(open(FACTORS_FILE)?)?;
        let matrix = SourceReceptorMatrix::from_reader(open(MATRIX_FILE)?)?;
        let factors = reorder_pollutants(factors, &matrix.pollutant_names)?;
        let profiles = read_profiles(open(RECEPTORS_FILE)?)?;
        let responses = read_responses(open(CR_FILE)?, &matrix.pollutant_names)?;
        let valuations = read_valuations(open(VALUATIONS_FILE)?)?;
        Self::new(factors, matrix, profiles, responses, valuations)
    }

    /// Health signal for one MWh generated with the given mix.
    pub fn impact_per_mwh(&self, mix: &FuelMixRecord) -> Result<HealthSignal, HealthError> {
        let emissions = emissions_from_mix(mix, &self.factors, 1.0)?;
        let conc = apply_source_receptor(&emissions, &self.matrix)?;
        let mut costs = IndexMap::with_capacity(conc.receptor_ids.len());
        for (id, delta) in conc.receptor_ids.iter().zip(&conc.delta) {
            let profile = self
                .profiles
                .iter()
                .find(|p| &p.receptor_id == id)
                .ok_or_else(|| HealthError::UnknownReceptor(id.clone()))?;
            let mut cases = IndexMap::with_capacity(self.responses.len());
            for cr in &self.responses {
                *cases.entry(cr.endpoint_id.clone()).or_insert(0.0) += delta_health(profile, cr, delta)?;
            }
            costs.insert(id.clone(), monetize(&cases, &self.valuations)?);
        }
        let (internal_cost, external_cost) = split_internal_external(&costs, &self.profiles)?;
        Ok(HealthSignal {
            timestamp: mix.timestamp,
            internal_cost,
            external_cost,
        })
    }

    pub fn impact_series(&self, records: &[FuelMixRecord]) -> Result<Vec<HealthSignal>, HealthError> {
        records.iter().map(|r| self.impact_per_mwh(r)).collect()
    }
}

fn reorder_pollutants(
    table: EmissionFactorTable,
    order: &[Pollutant],
) -> Result<EmissionFactorTable, HealthError> {
    if table.pollutant_names == order {
        return Ok(table);
    }
    let idx: Vec<usize> = order
        .iter()
        .map(|p| {
            table.pollutant_names.iter().position(|q| q == p).ok_or_else(|| {
                HealthError::DimensionMismatch(format!("emission factors lack pollutant {p}"))
            })
        })
        .collect::<Result<_, _>>()?;
    let factors = table
        .factors
        .iter()
        .map(|row| idx.iter().map(|&i| row[i]).collect())
        .collect();
    Ok(EmissionFactorTable::new(table.fuels, order.to_vec(), factors)?)
}

fn parse_f64(raw: &str, what: &str) -> Result<f64, HealthError> {
    raw.trim()
        .parse()
        .map_err(|_| HealthError::InvalidConfig(format!("bad {what} '{raw}'")))
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader)
}

/// `receptor_id,population,internal,<endpoint rates...>`
pub fn read_profiles<R: Read>(reader: R) -> Result<Vec<ReceptorProfile>, HealthError> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 {
        return Err(HealthError::InvalidConfig("receptor file needs at least 3 columns".into()));
    }
    let endpoints: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let internal = match rec[2].to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            other => return Err(HealthError::InvalidConfig(format!("bad internal flag '{other}'"))),
        };
        let mut baseline_rates = IndexMap::new();
        for (e, raw) in endpoints.iter().zip(rec.iter().skip(3)) {
            baseline_rates.insert(e.clone(), parse_f64(raw, "baseline rate")?);
        }
        out.push(ReceptorProfile {
            receptor_id: rec[0].to_string(),
            population: parse_f64(&rec[1], "population")?,
            baseline_rates,
            internal,
        });
    }
    Ok(out)
}

pub fn write_profiles(profiles: &[ReceptorProfile]) -> String {
    let endpoints: Vec<&String> = profiles
        .first()
        .map(|p| p.baseline_rates.keys().collect())
        .unwrap_or_default();
    let mut out = String::from("receptor_id,population,internal");
    for e in &endpoints {
        out.push(',');
        out.push_str(e);
    }
    out.push('\n');
    for p in profiles {
        out.push_str(&format!("{},{},{}", p.receptor_id, p.population, p.internal));
        for e in &endpoints {
            out.push_str(&format!(",{:e}", p.baseline_rates[*e]));
        }
        out.push('\n');
    }
    out
}

/// `endpoint_id,form,<one coefficient column per pollutant code>`; columns
/// are matched to `pollutants` by name.
pub fn read_responses<R: Read>(reader: R, pollutants: &[Pollutant]) -> Result<Vec<ConcentrationResponse>, HealthError> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<Pollutant> = headers
        .iter()
        .skip(2)
        .map(|h| h.parse().map_err(|e: crate::canon::UnknownCode| HealthError::InvalidConfig(e.to_string())))
        .collect::<Result<_, _>>()?;
    let idx: Vec<usize> = pollutants
        .iter()
        .map(|p| {
            cols.iter()
                .position(|c| c == p)
                .ok_or_else(|| HealthError::DimensionMismatch(format!("no coefficient column for {p}")))
        })
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let raw: Vec<f64> = rec
            .iter()
            .skip(2)
            .map(|v| parse_f64(v, "coefficient"))
            .collect::<Result<_, _>>()?;
        if raw.len() != cols.len() {
            return Err(HealthError::DimensionMismatch("short coefficient row".into()));
        }
        out.push(ConcentrationResponse {
            endpoint_id: rec[0].to_string(),
            form: rec[1].parse()?,
            alpha: idx.iter().map(|&i| raw[i]).collect(),
        });
    }
    Ok(out)
}

pub fn write_responses(responses: &[ConcentrationResponse], pollutants: &[Pollutant]) -> String {
    let mut out = String::from("endpoint_id,form");
    for p in pollutants {
        out.push(',');
        out.push_str(p.code());
    }
    out.push('\n');
    for cr in responses {
        let form = match cr.form {
            ResponseForm::LogLinear => "log_linear",
            ResponseForm::Linear => "linear",
        };
        out.push_str(&format!("{},{}", cr.endpoint_id, form));
        for a in &cr.alpha {
            out.push_str(&format!(",{a:e}"));
        }
        out.push('\n');
    }
    out
}

/// `endpoint_id,dollars_per_case`
pub fn read_valuations<R: Read>(reader: R) -> Result<Vec<HealthValuation>, HealthError> {
    let mut rdr = csv_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(HealthError::InvalidConfig("valuation rows need 2 fields".into()));
        }
        out.push(HealthValuation {
            endpoint_id: rec[0].to_string(),
            dollars_per_case: parse_f64(&rec[1], "valuation")?,
        });
    }
    Ok(out)
}

pub fn write_valuations(valuations: &[HealthValuation]) -> String {
    let mut out = String::from("endpoint_id,dollars_per_case\n");
    for v in valuations {
        out.push_str(&format!("{},{}\n", v.endpoint_id, v.dollars_per_case));
    }
    out
}

/// `timestamp,internal_usd_per_mwh,external_usd_per_mwh`
pub fn write_signals<W: Write>(writer: W, signals: &[HealthSignal]) -> Result<(), HealthError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(["timestamp", "internal_usd_per_mwh", "external_usd_per_mwh"])?;
    for s in signals {
        w.write_record([
            s.timestamp.to_string(),
            s.internal_cost.to_string(),
            s.external_cost.to_string(),
        ])?;
    }
    w.flush().map_err(|source| HealthError::Io {
        path: "<signal writer>".into(),
        source,
    })?;
    Ok(())
}

pub fn read_signals<R: Read>(reader: R) -> Result<Vec<HealthSignal>, HealthError> {
    let mut rdr = csv_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(HealthError::InvalidConfig("signal rows need 3 fields".into()));
        }
        let timestamp = crate::ingest::parse_timestamp(&rec[0])
            .ok_or_else(|| HealthError::InvalidConfig(format!("bad timestamp '{}'", &rec[0])))?;
        let internal_cost = parse_f64(&rec[1], "internal cost")?;
        let external_cost = parse_f64(&rec[2], "external cost")?;
        if !(internal_cost >= 0.0) || !(external_cost >= 0.0) {
            return Err(HealthError::InvalidConfig(format!("negative cost at {timestamp}")));
        }
        out.push(HealthSignal {
            timestamp,
            internal_cost,
            external_cost,
        });
    }
    Ok(out)
}

pub fn load_signals(path: &Path) -> Result<Vec<HealthSignal>, HealthError> {
    let f = File::open(path).map_err(|source| HealthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_signals(f)
}
