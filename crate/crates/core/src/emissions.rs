//! Fuel-mix shares to emitted pollutant mass at the source region.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::canon::{Fuel, Pollutant};
use crate::ingest::{FuelMixRecord, PlantRecord, PlantRegistry};

#[derive(Debug, Error)]
pub enum EmissionsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown plant '{0}'")]
    UnknownPlant(String),
    #[error("invalid emission factor table: {0}")]
    InvalidTable(String),
    #[error("no factor row for fuel {0}")]
    MissingFuel(Fuel),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// kg of each pollutant emitted per MWh generated by each fuel.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionFactorTable {
    pub fuels: Vec<Fuel>,
    pub pollutant_names: Vec<Pollutant>,
    /// `fuels.len() × pollutant_names.len()`, row-major.
    pub factors: Vec<Vec<f64>>,
}

impl EmissionFactorTable {
    pub fn new(
        fuels: Vec<Fuel>,
        pollutant_names: Vec<Pollutant>,
        factors: Vec<Vec<f64>>,
    ) -> Result<Self, EmissionsError> {
        if factors.len() != fuels.len() {
            return Err(EmissionsError::DimensionMismatch {
                expected: fuels.len(),
                got: factors.len(),
            });
        }
        for (fuel, row) in fuels.iter().zip(&factors) {
            if row.len() != pollutant_names.len() {
                return Err(EmissionsError::DimensionMismatch {
                    expected: pollutant_names.len(),
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(EmissionsError::InvalidTable(format!(
                    "negative or non-finite factor for {fuel}"
                )));
            }
            if fuel.is_zero_emission() && row.iter().any(|&v| v != 0.0) {
                return Err(EmissionsError::InvalidTable(format!(
                    "zero-emission fuel {fuel} has a non-zero factor"
                )));
            }
        }
        Ok(Self {
            fuels,
            pollutant_names,
            factors,
        })
    }

    /// Reads `fuel,<pollutant_1>,...,<pollutant_K>`.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, EmissionsError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let pollutants = headers
            .iter()
            .skip(1)
            .map(|h| h.parse::<Pollutant>().map_err(|e| EmissionsError::InvalidTable(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut fuels = Vec::new();
        let mut factors = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            fuels.push(
                rec[0]
                    .parse::<Fuel>()
                    .map_err(|e| EmissionsError::InvalidTable(e.to_string()))?,
            );
            factors.push(
                rec.iter()
                    .skip(1)
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| EmissionsError::InvalidTable(format!("bad number '{s}'")))
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
        Self::new(fuels, pollutants, factors)
    }

    pub fn load(path: &Path) -> Result<Self, EmissionsError> {
        let f = File::open(path).map_err(|source| EmissionsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_reader(f)
    }

    /// Reorders rows to follow `fuels`, e.g. the fuel order of a series.
    pub fn select(&self, fuels: &[Fuel]) -> Result<Self, EmissionsError> {
        let factors = fuels
            .iter()
            .map(|f| {
                self.fuels
                    .iter()
                    .position(|x| x == f)
                    .map(|i| self.factors[i].clone())
                    .ok_or(EmissionsError::MissingFuel(*f))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(fuels.to_vec(), self.pollutant_names.clone(), factors)
    }

    pub fn num_pollutants(&self) -> usize {
        self.pollutant_names.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fuel");
        for p in &self.pollutant_names {
            out.push(',');
            out.push_str(p.code());
        }
        out.push('\n');
        for (f, row) in self.fuels.iter().zip(&self.factors) {
            out.push_str(f.code());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmissionVector {
    pub pollutant_names: Vec<Pollutant>,
    /// kg per pollutant.
    pub quantities: Vec<f64>,
}

impl EmissionVector {
    pub fn zeros(pollutant_names: Vec<Pollutant>) -> Self {
        let quantities = vec![0.0; pollutant_names.len()];
        Self {
            pollutant_names,
            quantities,
        }
    }
}

/// `quantities[k] = demand · Σ_f shares[f] · factors[f][k]`.
pub fn emissions_from_mix(
    mix: &FuelMixRecord,
    table: &EmissionFactorTable,
    demand_mwh: f64,
) -> Result<EmissionVector, EmissionsError> {
    if mix.shares.len() != table.fuels.len() {
        return Err(EmissionsError::DimensionMismatch {
            expected: table.fuels.len(),
            got: mix.shares.len(),
        });
    }
    let mut quantities = vec![0.0; table.num_pollutants()];
    for (share, row) in mix.shares.iter().zip(&table.factors) {
        for (q, factor) in quantities.iter_mut().zip(row) {
            *q += share * factor;
        }
    }
    for q in &mut quantities {
        *q *= demand_mwh;
    }
    Ok(EmissionVector {
        pollutant_names: table.pollutant_names.clone(),
        quantities,
    })
}

/// `quantities[k] = Σ_p allocation[p] · rate[p][k]` over allocated plants.
pub fn aggregate_plant_emissions(
    allocation: &IndexMap<String, f64>,
    registry: &PlantRegistry,
) -> Result<EmissionVector, EmissionsError> {
    aggregate_with(allocation, &registry.plants, &registry.pollutants)
}

fn aggregate_with(
    allocation: &IndexMap<String, f64>,
    plants: &[PlantRecord],
    pollutants: &[Pollutant],
) -> Result<EmissionVector, EmissionsError> {
    let mut out = EmissionVector::zeros(pollutants.to_vec());
    for (id, &mwh) in allocation {
        let plant = plants
            .iter()
            .find(|p| &p.plant_id == id)
            .ok_or_else(|| EmissionsError::UnknownPlant(id.clone()))?;
        if plant.emission_rates.len() != pollutants.len() {
            return Err(EmissionsError::DimensionMismatch {
                expected: pollutants.len(),
                got: plant.emission_rates.len(),
            });
        }
        for (q, rate) in out.quantities.iter_mut().zip(&plant.emission_rates) {
            *q += mwh * rate;
        }
    }
    Ok(out)
}
