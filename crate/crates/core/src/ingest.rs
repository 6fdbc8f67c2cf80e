//! Loading, imputation and canonicalization of hourly fuel-mix and plant data.
//!
//! Raw fuel-mix files carry one column per source label. Labels are resolved
//! through a [`FuelCategoryMap`] onto the canonical [`Fuel`] vocabulary;
//! several raw columns may feed the same canonical fuel and are summed.
//! Shares stay in raw magnitudes until [`normalize_mix`], which must run after
//! [`impute_missing`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::{Fuel, Pollutant};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("unmapped source label '{0}'")]
    UnmappedLabel(String),
    #[error("timestamp {current} at row {row} does not follow {previous}")]
    NonMonotonicTimestamp {
        row: usize,
        previous: i64,
        current: i64,
    },
    #[error("no observed value for fuel {fuel} at hour-of-period {position}")]
    UnimputableSeries { fuel: Fuel, position: usize },
    #[error("series has {records} records; imputation with period {period} needs at least {needed}")]
    TooShortForImputation {
        records: usize,
        period: usize,
        needed: usize,
    },
    #[error("record at hour {timestamp} has a non-positive share sum")]
    ZeroRowSum { timestamp: i64 },
    #[error("record at hour {timestamp} has negative share {value} for {fuel}")]
    NegativeShare {
        timestamp: i64,
        fuel: Fuel,
        value: f64,
    },
    #[error("record at hour {timestamp} still has a missing entry for {fuel}")]
    MissingValue { timestamp: i64, fuel: Fuel },
    #[error("positive share for {0} but no plant of that fuel has positive capacity")]
    NoPlantForFuel(Fuel),
    #[error("demand must be non-negative and finite, got {0}")]
    InvalidDemand(f64),
    #[error("record has {got} shares, series has {expected} fuels")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid plant record '{plant}': {reason}")]
    InvalidPlant { plant: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Provenance of a single share entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flag {
    Observed,
    Imputed,
    Missing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuelMixRecord {
    /// Hour index; ISO timestamps are converted to hours since the Unix epoch.
    pub timestamp: i64,
    pub shares: Vec<f64>,
    pub flags: Vec<Flag>,
}

impl FuelMixRecord {
    pub fn observed(timestamp: i64, shares: Vec<f64>) -> Self {
        let flags = vec![Flag::Observed; shares.len()];
        Self {
            timestamp,
            shares,
            flags,
        }
    }

    pub fn has_missing(&self) -> bool {
        self.flags.contains(&Flag::Missing)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuelMixSeries {
    pub fuel_names: Vec<Fuel>,
    pub records: Vec<FuelMixRecord>,
}

impl FuelMixSeries {
    /// Builds a series, checking dimensions, duplicate fuels and hourly spacing.
    pub fn new(fuel_names: Vec<Fuel>, records: Vec<FuelMixRecord>) -> Result<Self, IngestError> {
        let mut seen = std::collections::HashSet::new();
        for f in &fuel_names {
            if !seen.insert(*f) {
                return Err(IngestError::MalformedRow {
                    row: 0,
                    reason: format!("duplicate fuel {f}"),
                });
            }
        }
        for (i, r) in records.iter().enumerate() {
            if r.shares.len() != fuel_names.len() || r.flags.len() != fuel_names.len() {
                return Err(IngestError::DimensionMismatch {
                    expected: fuel_names.len(),
                    got: r.shares.len(),
                });
            }
            if i > 0 && r.timestamp != records[i - 1].timestamp + 1 {
                return Err(IngestError::NonMonotonicTimestamp {
                    row: i + 1,
                    previous: records[i - 1].timestamp,
                    current: r.timestamp,
                });
            }
        }
        Ok(Self {
            fuel_names,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_fuels(&self) -> usize {
        self.fuel_names.len()
    }

    pub fn count_flag(&self, flag: Flag) -> usize {
        self.records
            .iter()
            .map(|r| r.flags.iter().filter(|&&f| f == flag).count())
            .sum()
    }

    pub fn fuel_index(&self, fuel: Fuel) -> Option<usize> {
        self.fuel_names.iter().position(|&f| f == fuel)
    }
}

/// Target of a raw source label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Fuel(Fuel),
    Excluded,
}

/// Total mapping from raw source labels to canonical fuels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FuelCategoryMap {
    entries: HashMap<String, Category>,
}

impl FuelCategoryMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every canonical code maps to itself.
    pub fn identity() -> Self {
        let mut m = Self::new();
        for f in Fuel::ALL {
            m.insert(f.code(), Category::Fuel(f));
        }
        m
    }

    pub fn insert(&mut self, raw: &str, category: Category) {
        self.entries.insert(raw.trim().to_string(), category);
    }

    pub fn lookup(&self, raw: &str) -> Result<Category, IngestError> {
        self.entries
            .get(raw.trim())
            .copied()
            .ok_or_else(|| IngestError::UnmappedLabel(raw.trim().to_string()))
    }

    /// Reads a two-column `raw_label,canonical` CSV. `EXCLUDED` drops a label.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, IngestError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut map = Self::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(IngestError::MalformedRow {
                    row: i + 2,
                    reason: format!("expected 2 fields, found {}", rec.len()),
                });
            }
            let target = &rec[1];
            let category = if target.eq_ignore_ascii_case("EXCLUDED") {
                Category::Excluded
            } else {
                Category::Fuel(target.parse().map_err(|e: crate::canon::UnknownCode| {
                    IngestError::MalformedRow {
                        row: i + 2,
                        reason: e.to_string(),
                    }
                })?)
            };
            map.insert(&rec[0], category);
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        Self::from_reader(File::open(path).map_err(io_err(path))?)
    }
}

/// Parses an integer hour index or an ISO-8601 timestamp on a whole hour.
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(h) = raw.parse::<i64>() {
        return Some(h);
    }
    let seconds = if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        dt.timestamp()
    } else {
        let formats = [
            "%Y-%m-%dT%H:%M:%S",
            "%Y-%m-%dT%H:%M",
            "%Y-%m-%d %H:%M:%S",
            "%Y-%m-%d %H:%M",
            "%Y-%m-%dT%H",
        ];
        let mut parsed = None;
        for fmt in formats {
            let candidate = raw.trim_end_matches('Z');
            if let Ok(dt) = NaiveDateTime::parse_from_str(candidate, fmt) {
                parsed = Some(dt.and_utc().timestamp());
                break;
            }
            if fmt == "%Y-%m-%dT%H" {
                // chrono needs minutes; accept "YYYY-MM-DDTHH"
                if let Ok(dt) =
                    NaiveDateTime::parse_from_str(&format!("{candidate}:00"), "%Y-%m-%dT%H:%M")
                {
                    parsed = Some(dt.and_utc().timestamp());
                    break;
                }
            }
        }
        parsed?
    };
    (seconds % 3600 == 0).then_some(seconds.div_euclid(3600))
}

/// Reads a fuel-mix CSV (`timestamp,<label_1>,...`). Shares are returned raw:
/// not imputed and not normalized. Hour gaps are filled with all-missing
/// records.
pub fn load_fuel_mix(path: &Path, category_map: &FuelCategoryMap) -> Result<FuelMixSeries, IngestError> {
    load_fuel_mix_from_reader(File::open(path).map_err(io_err(path))?, category_map)
}

pub fn load_fuel_mix_from_reader<R: Read>(
    reader: R,
    category_map: &FuelCategoryMap,
) -> Result<FuelMixSeries, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(IngestError::MalformedRow {
            row: 1,
            reason: "empty header".into(),
        });
    }

    // column -> canonical target
    let mut targets = Vec::with_capacity(headers.len().saturating_sub(1));
    for label in headers.iter().skip(1) {
        targets.push(category_map.lookup(label)?);
    }
    let mut fuels: Vec<Fuel> = targets
        .iter()
        .filter_map(|c| match c {
            Category::Fuel(f) => Some(*f),
            Category::Excluded => None,
        })
        .collect();
    fuels.sort();
    fuels.dedup();
    let slot = |f: Fuel| fuels.iter().position(|&x| x == f).expect("fuel collected above");

    let mut records: Vec<FuelMixRecord> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(IngestError::MalformedRow {
                row,
                reason: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let timestamp = parse_timestamp(&rec[0]).ok_or_else(|| IngestError::MalformedRow {
            row,
            reason: format!("bad timestamp '{}'", &rec[0]),
        })?;
        let mut shares = vec![0.0; fuels.len()];
        let mut flags = vec![Flag::Observed; fuels.len()];
        for (cell, target) in rec.iter().skip(1).zip(&targets) {
            let Category::Fuel(f) = target else { continue };
            let j = slot(*f);
            if cell.is_empty() {
                flags[j] = Flag::Missing;
                continue;
            }
            let value: f64 = cell.parse().map_err(|_| IngestError::MalformedRow {
                row,
                reason: format!("bad number '{cell}'"),
            })?;
            if !value.is_finite() {
                return Err(IngestError::MalformedRow {
                    row,
                    reason: format!("non-finite number '{cell}'"),
                });
            }
            shares[j] += value;
        }
        for (s, f) in shares.iter_mut().zip(&flags) {
            if *f == Flag::Missing {
                *s = 0.0;
            }
        }

        if let Some(prev) = records.last() {
            if timestamp <= prev.timestamp {
                return Err(IngestError::NonMonotonicTimestamp {
                    row,
                    previous: prev.timestamp,
                    current: timestamp,
                });
            }
            for gap in prev.timestamp + 1..timestamp {
                records.push(FuelMixRecord {
                    timestamp: gap,
                    shares: vec![0.0; fuels.len()],
                    flags: vec![Flag::Missing; fuels.len()],
                });
            }
        }
        records.push(FuelMixRecord {
            timestamp,
            shares,
            flags,
        });
    }
    FuelMixSeries::new(fuels, records)
}

/// Writes `timestamp,<fuel codes>`; missing entries become empty cells.
pub fn write_fuel_mix<W: Write>(writer: W, series: &FuelMixSeries) -> Result<(), IngestError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec!["timestamp".to_string()];
    header.extend(series.fuel_names.iter().map(|f| f.code().to_string()));
    w.write_record(&header)?;
    for r in &series.records {
        let mut row = vec![r.timestamp.to_string()];
        for (s, f) in r.shares.iter().zip(&r.flags) {
            row.push(if *f == Flag::Missing {
                String::new()
            } else {
                format!("{s}")
            });
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| IngestError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

/// Fills missing entries in two passes.
///
/// 1. An entry whose immediate neighbours (t−1, t+1) are both observed takes
///    their mean.
/// 2. Anything left takes the mean of the observed entries at the same
///    position in the cycle on the nearest days: radius 1 (t ± period), then
///    radius 2, and so on; every donor at the first non-empty radius counts.
///
/// Filled entries are flagged [`Flag::Imputed`].
pub fn impute_missing(series: &FuelMixSeries, period: usize) -> Result<FuelMixSeries, IngestError> {
    let n = series.len();
    let has_missing = series.records.iter().any(|r| r.has_missing());
    if !has_missing {
        return Ok(series.clone());
    }
    let period = period.max(1);
    if n < 2 * period {
        return Err(IngestError::TooShortForImputation {
            records: n,
            period,
            needed: 2 * period,
        });
    }

    let mut out = series.clone();
    let observed = |t: usize, f: usize| series.records[t].flags[f] == Flag::Observed;

    for t in 0..n {
        for f in 0..series.num_fuels() {
            if series.records[t].flags[f] != Flag::Missing {
                continue;
            }
            if t > 0 && t + 1 < n && observed(t - 1, f) && observed(t + 1, f) {
                let v = 0.5 * (series.records[t - 1].shares[f] + series.records[t + 1].shares[f]);
                out.records[t].shares[f] = v;
                out.records[t].flags[f] = Flag::Imputed;
            }
        }
    }

    let max_radius = n / period + 1;
    for t in 0..n {
        for f in 0..series.num_fuels() {
            if out.records[t].flags[f] != Flag::Missing {
                continue;
            }
            let mut filled = None;
            for radius in 1..=max_radius {
                let step = radius * period;
                let mut sum = 0.0;
                let mut count = 0usize;
                if t >= step && observed(t - step, f) {
                    sum += series.records[t - step].shares[f];
                    count += 1;
                }
                if t + step < n && observed(t + step, f) {
                    sum += series.records[t + step].shares[f];
                    count += 1;
                }
                if count > 0 {
                    filled = Some(sum / count as f64);
                    break;
                }
                if step > t && t + step >= n {
                    break;
                }
            }
            let Some(v) = filled else {
                return Err(IngestError::UnimputableSeries {
                    fuel: series.fuel_names[f],
                    position: t % period,
                });
            };
            out.records[t].shares[f] = v;
            out.records[t].flags[f] = Flag::Imputed;
        }
    }
    Ok(out)
}

/// Rescales every record onto the probability simplex.
pub fn normalize_mix(series: &FuelMixSeries) -> Result<FuelMixSeries, IngestError> {
    let mut out = series.clone();
    for r in &mut out.records {
        for (j, (&s, &flag)) in r.shares.iter().zip(&r.flags).enumerate() {
            if flag == Flag::Missing {
                return Err(IngestError::MissingValue {
                    timestamp: r.timestamp,
                    fuel: series.fuel_names[j],
                });
            }
            if s < 0.0 {
                return Err(IngestError::NegativeShare {
                    timestamp: r.timestamp,
                    fuel: series.fuel_names[j],
                    value: s,
                });
            }
        }
        let total: f64 = r.shares.iter().sum();
        if !(total > 0.0) {
            return Err(IngestError::ZeroRowSum {
                timestamp: r.timestamp,
            });
        }
        for s in &mut r.shares {
            *s /= total;
        }
    }
    Ok(out)
}

/// One generating unit from the plant registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub plant_id: String,
    pub region_id: String,
    pub fuel: Fuel,
    /// Annual generation (MWh/yr) used as the allocation weight.
    pub capacity_share_basis: f64,
    /// kg per MWh, aligned with [`PlantRegistry::pollutants`].
    pub emission_rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantRegistry {
    pub pollutants: Vec<Pollutant>,
    pub plants: Vec<PlantRecord>,
}

impl PlantRegistry {
    pub fn new(pollutants: Vec<Pollutant>, plants: Vec<PlantRecord>) -> Result<Self, IngestError> {
        for p in &plants {
            let bad = |reason: &str| IngestError::InvalidPlant {
                plant: p.plant_id.clone(),
                reason: reason.to_string(),
            };
            if !(p.capacity_share_basis >= 0.0) || !p.capacity_share_basis.is_finite() {
                return Err(bad("capacity basis must be non-negative"));
            }
            if p.emission_rates.len() != pollutants.len() {
                return Err(bad("emission rate count does not match pollutants"));
            }
            if p.emission_rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
                return Err(bad("emission rates must be non-negative"));
            }
        }
        Ok(Self { pollutants, plants })
    }

    /// Reads `plant_id,region_id,fuel,capacity_basis,<pollutant_1>,...`.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, IngestError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 4 {
            return Err(IngestError::MalformedRow {
                row: 1,
                reason: "plant registry needs at least 4 columns".into(),
            });
        }
        let pollutants = headers
            .iter()
            .skip(4)
            .map(|h| {
                h.parse::<Pollutant>().map_err(|e| IngestError::MalformedRow {
                    row: 1,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut plants = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 2;
            let num = |s: &str| -> Result<f64, IngestError> {
                s.parse().map_err(|_| IngestError::MalformedRow {
                    row,
                    reason: format!("bad number '{s}'"),
                })
            };
            let fuel = rec[2].parse::<Fuel>().map_err(|e| IngestError::MalformedRow {
                row,
                reason: e.to_string(),
            })?;
            plants.push(PlantRecord {
                plant_id: rec[0].to_string(),
                region_id: rec[1].to_string(),
                fuel,
                capacity_share_basis: num(&rec[3])?,
                emission_rates: rec.iter().skip(4).map(num).collect::<Result<_, _>>()?,
            });
        }
        Self::new(pollutants, plants)
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        Self::from_reader(File::open(path).map_err(io_err(path))?)
    }

    /// Plants located in one balancing region.
    pub fn in_region(&self, region_id: &str) -> Vec<PlantRecord> {
        self.plants
            .iter()
            .filter(|p| p.region_id == region_id)
            .cloned()
            .collect()
    }
}

/// Splits `demand_mwh` across fuels by share, then across the plants of each
/// fuel in proportion to their capacity basis. Every plant appears in the
/// result, in input order.
pub fn allocate_generation(
    demand_mwh: f64,
    mix: &FuelMixRecord,
    fuel_names: &[Fuel],
    plants: &[PlantRecord],
) -> Result<IndexMap<String, f64>, IngestError> {
    if !(demand_mwh >= 0.0) || !demand_mwh.is_finite() {
        return Err(IngestError::InvalidDemand(demand_mwh));
    }
    if mix.shares.len() != fuel_names.len() {
        return Err(IngestError::DimensionMismatch {
            expected: fuel_names.len(),
            got: mix.shares.len(),
        });
    }
    let mut allocation: IndexMap<String, f64> =
        plants.iter().map(|p| (p.plant_id.clone(), 0.0)).collect();
    for (&fuel, &share) in fuel_names.iter().zip(&mix.shares) {
        if share <= 0.0 {
            continue;
        }
        let total_basis: f64 = plants
            .iter()
            .filter(|p| p.fuel == fuel && p.capacity_share_basis > 0.0)
            .map(|p| p.capacity_share_basis)
            .sum();
        if total_basis <= 0.0 {
            return Err(IngestError::NoPlantForFuel(fuel));
        }
        let fuel_energy = demand_mwh * share;
        for p in plants.iter().filter(|p| p.fuel == fuel) {
            *allocation.get_mut(&p.plant_id).expect("inserted above") +=
                fuel_energy * p.capacity_share_basis / total_basis;
        }
    }
    Ok(allocation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn coal_gas_map() -> FuelCategoryMap {
        let mut m = FuelCategoryMap::new();
        m.insert("coal", Category::Fuel(Fuel::Coal));
        m.insert("gas", Category::Fuel(Fuel::NaturalGas));
        m.insert("DFO", Category::Fuel(Fuel::Oil));
        m.insert("OIL", Category::Fuel(Fuel::Oil));
        m.insert("battery", Category::Excluded);
        m
    }

    fn load(csv: &str) -> Result<FuelMixSeries, IngestError> {
        load_fuel_mix_from_reader(csv.as_bytes(), &coal_gas_map())
    }

    #[test]
    fn loads_observed_rows() {
        let s = load("timestamp,coal,gas\n0,0.5,0.5\n1,0.6,0.4\n2,0.7,0.3\n").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.fuel_names, vec![Fuel::Coal, Fuel::NaturalGas]);
        assert_eq!(s.records[1].shares, vec![0.6, 0.4]);
        assert_eq!(s.count_flag(Flag::Observed), 6);
    }

    #[test]
    fn empty_cell_is_flagged_missing() {
        let s = load("timestamp,coal,gas\n0,0.5,\n").unwrap();
        assert_eq!(s.records[0].flags, vec![Flag::Observed, Flag::Missing]);
    }

    #[test]
    fn raw_labels_accumulate_under_canonical_fuel() {
        let s = load("timestamp,DFO,OIL,gas,battery\n0,0.1,0.2,0.7,5\n").unwrap();
        assert_eq!(s.fuel_names, vec![Fuel::NaturalGas, Fuel::Oil]);
        let oil = s.fuel_index(Fuel::Oil).unwrap();
        assert!((s.records[0].shares[oil] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn unmapped_label_is_an_error() {
        match load("timestamp,coal,hydro\n0,1,2\n") {
            Err(IngestError::UnmappedLabel(l)) => assert_eq!(l, "hydro"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(matches!(
            load("timestamp,coal,gas\n0,abc,1\n"),
            Err(IngestError::MalformedRow { row: 2, .. })
        ));
        assert!(matches!(
            load("timestamp,coal,gas\n0,1\n"),
            Err(IngestError::MalformedRow { .. })
        ));
    }

    #[test]
    fn timestamps_must_increase() {
        assert!(matches!(
            load("timestamp,coal,gas\n5,1,1\n5,1,1\n"),
            Err(IngestError::NonMonotonicTimestamp { .. })
        ));
        assert!(matches!(
            load("timestamp,coal,gas\n5,1,1\n4,1,1\n"),
            Err(IngestError::NonMonotonicTimestamp { .. })
        ));
    }

    #[test]
    fn hour_gaps_become_missing_records() {
        let s = load("timestamp,coal,gas\n0,1,1\n3,1,1\n").unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.records[1].flags, vec![Flag::Missing; 2]);
        assert_eq!(s.records[2].timestamp, 2);
    }

    #[test]
    fn iso_timestamps() {
        assert_eq!(parse_timestamp("1970-01-01T01:00:00Z"), Some(1));
        assert_eq!(parse_timestamp("1970-01-02 00:00"), Some(24));
        assert_eq!(parse_timestamp("1970-01-01T02"), Some(2));
        assert_eq!(parse_timestamp("1970-01-01T01:30:00Z"), None);
        let s = load("timestamp,coal,gas\n2023-01-01T00:00:00Z,1,1\n2023-01-01T01:00:00Z,1,1\n")
            .unwrap();
        assert_eq!(s.records[1].timestamp - s.records[0].timestamp, 1);
    }

    fn series(fuels: usize, rows: Vec<Vec<Option<f64>>>) -> FuelMixSeries {
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(t, row)| FuelMixRecord {
                timestamp: t as i64,
                shares: row.iter().map(|v| v.unwrap_or(0.0)).collect(),
                flags: row
                    .iter()
                    .map(|v| if v.is_some() { Flag::Observed } else { Flag::Missing })
                    .collect(),
            })
            .collect();
        FuelMixSeries::new(Fuel::ALL[..fuels].to_vec(), records).unwrap()
    }

    #[test]
    fn interpolates_single_gap() {
        let s = series(1, vec![vec![Some(0.2)], vec![None], vec![Some(0.4)], vec![Some(0.4)]]);
        let out = impute_missing(&s, 2).unwrap();
        assert!((out.records[1].shares[0] - 0.3).abs() < 1e-15);
        assert_eq!(out.records[1].flags[0], Flag::Imputed);
        assert_eq!(out.count_flag(Flag::Missing), 0);
    }

    #[test]
    fn two_hour_gap_uses_adjacent_day() {
        // day 0 observed, day 1 has a two-hour hole at positions 5 and 6
        let period = 24;
        let mut rows: Vec<Vec<Option<f64>>> = (0..2 * period).map(|_| vec![Some(0.1)]).collect();
        rows[5] = vec![Some(0.5)];
        rows[6] = vec![Some(0.7)];
        rows[period + 5] = vec![None];
        rows[period + 6] = vec![None];
        let out = impute_missing(&series(1, rows), period).unwrap();
        assert_eq!(out.records[period + 5].shares[0], 0.5);
        assert_eq!(out.records[period + 6].shares[0], 0.7);
    }

    #[test]
    fn donor_search_averages_both_sides_at_first_radius() {
        let period = 4;
        let mut rows: Vec<Vec<Option<f64>>> = (0..12).map(|_| vec![Some(1.0)]).collect();
        rows[1] = vec![Some(2.0)];
        rows[9] = vec![Some(4.0)];
        rows[5] = vec![None];
        rows[6] = vec![None];
        let out = impute_missing(&series(1, rows), period).unwrap();
        assert_eq!(out.records[5].shares[0], 3.0);
    }

    #[test]
    fn unimputable_position_is_reported() {
        let period = 2;
        let rows = vec![vec![None], vec![Some(1.0)], vec![None], vec![Some(1.0)]];
        assert!(matches!(
            impute_missing(&series(1, rows), period),
            Err(IngestError::UnimputableSeries { position: 0, .. })
        ));
    }

    #[test]
    fn short_series_with_gaps_is_rejected() {
        let rows = vec![vec![Some(1.0)], vec![None], vec![Some(1.0)]];
        assert!(matches!(
            impute_missing(&series(1, rows), 24),
            Err(IngestError::TooShortForImputation { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let s = series(2, vec![vec![Some(2.0), Some(2.0)]]);
        assert_eq!(normalize_mix(&s).unwrap().records[0].shares, vec![0.5, 0.5]);
        let s = series(3, vec![vec![Some(1.0), Some(0.0), Some(0.0)]]);
        assert_eq!(normalize_mix(&s).unwrap().records[0].shares, vec![1.0, 0.0, 0.0]);
        let s = series(3, vec![vec![Some(0.3), Some(0.3), Some(0.3)]]);
        for v in normalize_mix(&s).unwrap().records[0].shares.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_errors() {
        let zero = series(2, vec![vec![Some(0.0), Some(0.0)]]);
        assert!(matches!(normalize_mix(&zero), Err(IngestError::ZeroRowSum { .. })));
        let neg = series(2, vec![vec![Some(-1.0), Some(2.0)]]);
        assert!(matches!(normalize_mix(&neg), Err(IngestError::NegativeShare { .. })));
        let missing = series(2, vec![vec![None, Some(2.0)]]);
        assert!(matches!(normalize_mix(&missing), Err(IngestError::MissingValue { .. })));
    }

    fn plant(id: &str, fuel: Fuel, basis: f64) -> PlantRecord {
        PlantRecord {
            plant_id: id.into(),
            region_id: "BA".into(),
            fuel,
            capacity_share_basis: basis,
            emission_rates: vec![0.0],
        }
    }

    #[test]
    fn allocation_examples() {
        let fuels = [Fuel::Coal, Fuel::NaturalGas];
        let mix = FuelMixRecord::observed(0, vec![0.4, 0.6]);
        let plants = vec![
            plant("c1", Fuel::Coal, 3.0),
            plant("c2", Fuel::Coal, 1.0),
            plant("g1", Fuel::NaturalGas, 1.0),
        ];
        let a = allocate_generation(1.0, &mix, &fuels, &plants).unwrap();
        assert!((a["c1"] - 0.3).abs() < 1e-15);
        assert!((a["c2"] - 0.1).abs() < 1e-15);

        let a = allocate_generation(0.0, &mix, &fuels, &plants).unwrap();
        assert!(a.values().all(|&v| v == 0.0));

        let mix = FuelMixRecord::observed(0, vec![0.5, 0.5]);
        let plants = vec![plant("c", Fuel::Coal, 7.0), plant("g", Fuel::NaturalGas, 2.0)];
        let a = allocate_generation(1.0, &mix, &fuels, &plants).unwrap();
        assert_eq!(a["c"], 0.5);
        assert_eq!(a.values().sum::<f64>(), 1.0);
    }

    #[test]
    fn allocation_requires_a_plant() {
        let mix = FuelMixRecord::observed(0, vec![0.5, 0.5]);
        let plants = vec![plant("c", Fuel::Coal, 1.0), plant("g", Fuel::NaturalGas, 0.0)];
        assert!(matches!(
            allocate_generation(1.0, &mix, &[Fuel::Coal, Fuel::NaturalGas], &plants),
            Err(IngestError::NoPlantForFuel(Fuel::NaturalGas))
        ));
    }

    #[test]
    fn plant_registry_csv() {
        let csv = "plant_id,region_id,fuel,capacity_basis,SO2,NOX\np1,CISO,COL,100,1.5,0.8\np2,PJM,NG,50,0.01,0.2\n";
        let reg = PlantRegistry::from_reader(csv.as_bytes()).unwrap();
        assert_eq!(reg.pollutants, vec![Pollutant::So2, Pollutant::Nox]);
        assert_eq!(reg.in_region("CISO").len(), 1);
        let bad = "plant_id,region_id,fuel,capacity_basis,SO2\np1,CISO,COL,-1,1.5\n";
        assert!(PlantRegistry::from_reader(bad.as_bytes()).is_err());
    }

    #[test]
    fn fuel_mix_csv_roundtrip() {
        let s = load("timestamp,coal,gas\n0,0.5,\n1,0.25,0.75\n").unwrap();
        let mut buf = Vec::new();
        write_fuel_mix(&mut buf, &s).unwrap();
        let back = load_fuel_mix_from_reader(buf.as_slice(), &FuelCategoryMap::identity()).unwrap();
        assert_eq!(back, s);
    }

    fn observed_series() -> impl Strategy<Value = FuelMixSeries> {
        (1usize..4, 48usize..80).prop_flat_map(|(f, n)| {
            prop::collection::vec(prop::collection::vec(0.01f64..1.0, f), n).prop_map(move |rows| {
                series(f, rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect())
            })
        })
    }

    proptest! {
        #[test]
        fn imputation_is_identity_on_observed_series(s in observed_series()) {
            prop_assert_eq!(impute_missing(&s, 24).unwrap(), s);
        }

        #[test]
        fn normalization_is_idempotent(s in observed_series()) {
            let once = normalize_mix(&s).unwrap();
            let twice = normalize_mix(&once).unwrap();
            for (a, b) in once.records.iter().zip(&twice.records) {
                prop_assert!((a.shares.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (x, y) in a.shares.iter().zip(&b.shares) {
                    prop_assert!((x - y).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn imputation_leaves_no_missing(s in observed_series(), mask in prop::collection::vec(any::<bool>(), 80)) {
            let mut holed = s.clone();
            // keep the first day observed so every position has a donor
            for (t, r) in holed.records.iter_mut().enumerate().skip(24) {
                if mask[t % mask.len()] {
                    r.flags[0] = Flag::Missing;
                    r.shares[0] = 0.0;
                }
            }
            let out = impute_missing(&holed, 24).unwrap();
            prop_assert_eq!(out.count_flag(Flag::Missing), 0);
            prop_assert!(normalize_mix(&out).is_ok());
        }

        #[test]
        fn allocation_conserves_demand(
            demand in 0.0f64..1e4,
            raw in prop::collection::vec(0.0f64..1.0, 3),
            bases in prop::collection::vec(0.1f64..100.0, 6),
        ) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-3;
            let shares: Vec<f64> = raw.iter().map(|v| (v + 1e-3 / 3.0) / total).collect();
            let fuels = [Fuel::Coal, Fuel::NaturalGas, Fuel::Oil];
            let plants: Vec<PlantRecord> = bases
                .iter()
                .enumerate()
                .map(|(i, &b)| plant(&format!("p{i}"), fuels[i % 3], b))
                .collect();
            let mix = FuelMixRecord::observed(0, shares);
            let a = allocate_generation(demand, &mix, &fuels, &plants).unwrap();
            let sum: f64 = a.values().sum();
            prop_assert!((sum - demand).abs() <= 1e-9 * demand.max(1.0));
        }
    }

    #[test]
    fn sinusoidal_profile_imputation_error_is_small() {
        use rand::{Rng, SeedableRng};
        let period = 24;
        let days = 30;
        let amplitude = 0.2;
        let truth: Vec<f64> = (0..period * days)
            .map(|t| 0.5 + amplitude * (2.0 * std::f64::consts::PI * (t % period) as f64 / period as f64).sin())
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<Option<f64>>> = truth
            .iter()
            .map(|&v| vec![if rng.random::<f64>() < 0.1 { None } else { Some(v) }])
            .collect();
        let masked: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| r[0].is_none()).map(|(t, _)| t).collect();
        assert!(!masked.is_empty());
        let out = impute_missing(&series(1, rows), period).unwrap();
        let mse = masked
            .iter()
            .map(|&t| (out.records[t].shares[0] - truth[t]).powi(2))
            .sum::<f64>()
            / masked.len() as f64;
        assert!(mse.sqrt() < 0.25 * amplitude, "rmse {}", mse.sqrt());
    }
}
