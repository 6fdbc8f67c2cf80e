//! Canonical fuel and pollutant vocabularies shared by every stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// EIA-style generation fuel categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Fuel {
    #[serde(rename = "COL")]
    Coal,
    #[serde(rename = "NG")]
    NaturalGas,
    #[serde(rename = "OIL")]
    Oil,
    #[serde(rename = "NUC")]
    Nuclear,
    #[serde(rename = "WAT")]
    Hydro,
    #[serde(rename = "WND")]
    Wind,
    #[serde(rename = "SUN")]
    Solar,
    #[serde(rename = "OTH")]
    Other,
}

impl Fuel {
    pub const ALL: [Fuel; 8] = [
        Fuel::Coal,
        Fuel::NaturalGas,
        Fuel::Oil,
        Fuel::Nuclear,
        Fuel::Hydro,
        Fuel::Wind,
        Fuel::Solar,
        Fuel::Other,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Fuel::Coal => "COL",
            Fuel::NaturalGas => "NG",
            Fuel::Oil => "OIL",
            Fuel::Nuclear => "NUC",
            Fuel::Hydro => "WAT",
            Fuel::Wind => "WND",
            Fuel::Solar => "SUN",
            Fuel::Other => "OTH",
        }
    }

    /// Fuels whose emission-factor rows must be all zero.
    pub fn is_zero_emission(self) -> bool {
        matches!(self, Fuel::Nuclear | Fuel::Hydro | Fuel::Wind | Fuel::Solar)
    }
}

impl fmt::Display for Fuel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownCode(pub String);

impl fmt::Display for UnknownCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown code '{}'", self.0)
    }
}

impl std::error::Error for UnknownCode {}

impl FromStr for Fuel {
    type Err = UnknownCode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Fuel::ALL
            .into_iter()
            .find(|f| f.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownCode(s.to_string()))
    }
}

/// Criteria air pollutants tracked through the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pollutant {
    #[serde(rename = "PM2.5")]
    Pm25,
    #[serde(rename = "SO2")]
    So2,
    #[serde(rename = "NOX")]
    Nox,
    #[serde(rename = "VOC")]
    Voc,
}

impl Pollutant {
    pub const ALL: [Pollutant; 4] = [Pollutant::Pm25, Pollutant::So2, Pollutant::Nox, Pollutant::Voc];

    pub fn code(self) -> &'static str {
        match self {
            Pollutant::Pm25 => "PM2.5",
            Pollutant::So2 => "SO2",
            Pollutant::Nox => "NOX",
            Pollutant::Voc => "VOC",
        }
    }
}

impl fmt::Display for Pollutant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Pollutant {
    type Err = UnknownCode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let normalized = s.to_ascii_uppercase().replace(['_', ' '], "");
        match normalized.as_str() {
            "PM2.5" | "PM25" => Ok(Pollutant::Pm25),
            "SO2" => Ok(Pollutant::So2),
            "NOX" => Ok(Pollutant::Nox),
            "VOC" => Ok(Pollutant::Voc),
            _ => Err(UnknownCode(s.to_string())),
        }
    }
}
