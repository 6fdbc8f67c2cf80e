//! Source-to-receptor dispersion.
//!
//! Three pieces live here: the linear source-receptor map applied to an
//! [`EmissionVector`], a ground-level Gaussian plume kernel used to
//! synthesize reference matrices, and a learnable [`DispersionLayer`] that
//! recovers a matrix from emission/concentration pairs.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{softplus, softplus_inverse, Graph, Tensor, Var};
use crate::canon::Pollutant;
use crate::emissions::EmissionVector;

#[derive(Debug, Error)]
pub enum DispersionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid plume parameters: {0}")]
    InvalidParams(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid matrix file: {0}")]
    InvalidMatrix(String),
    #[error("non-finite loss during fitting")]
    NonFiniteLoss,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Converts the plume kernel (s/m³) into annual-mean µg/m³ per kg emitted:
/// one kg released over one hour is a source rate of 1/3600 kg/s, 1e9 µg per
/// kg, averaged over the 8760 hours of a year.
pub const PLUME_UNIT: f64 = 1e9 / (3600.0 * 8760.0);

pub const SIGMA_Y_EXPONENT: f64 = 0.9;
pub const SIGMA_Z_EXPONENT: f64 = 0.85;

/// Linear gains from one source to `M` receptors for each of `K` pollutants.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceReceptorMatrix {
    pub pollutant_names: Vec<Pollutant>,
    pub receptor_ids: Vec<String>,
    /// `gains[k][i]`: µg/m³ at receptor `i` per kg of pollutant `k`.
    pub gains: Vec<Vec<f64>>,
}

impl SourceReceptorMatrix {
    pub fn new(
        pollutant_names: Vec<Pollutant>,
        receptor_ids: Vec<String>,
        gains: Vec<Vec<f64>>,
    ) -> Result<Self, DispersionError> {
        if gains.len() != pollutant_names.len() {
            return Err(DispersionError::DimensionMismatch(format!(
                "{} gain rows for {} pollutants",
                gains.len(),
                pollutant_names.len()
            )));
        }
        for row in &gains {
            if row.len() != receptor_ids.len() {
                return Err(DispersionError::DimensionMismatch(format!(
                    "{} gains for {} receptors",
                    row.len(),
                    receptor_ids.len()
                )));
            }
            if row.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
                return Err(DispersionError::InvalidMatrix("gains must be non-negative".into()));
            }
        }
        Ok(Self {
            pollutant_names,
            receptor_ids,
            gains,
        })
    }

    pub fn num_receptors(&self) -> usize {
        self.receptor_ids.len()
    }

    pub fn num_pollutants(&self) -> usize {
        self.pollutant_names.len()
    }

    /// Reads `pollutant,receptor_id,gain`; every pollutant/receptor pair must
    /// appear exactly once.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DispersionError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut pollutants: Vec<Pollutant> = Vec::new();
        let mut receptors: Vec<String> = Vec::new();
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(DispersionError::InvalidMatrix(format!(
                    "expected 3 fields, found {}",
                    rec.len()
                )));
            }
            let p: Pollutant = rec[0]
                .parse()
                .map_err(|e: crate::canon::UnknownCode| DispersionError::InvalidMatrix(e.to_string()))?;
            let gain: f64 = rec[2]
                .parse()
                .map_err(|_| DispersionError::InvalidMatrix(format!("bad gain '{}'", &rec[2])))?;
            if !pollutants.contains(&p) {
                pollutants.push(p);
            }
            if !receptors.iter().any(|r| r == &rec[1]) {
                receptors.push(rec[1].to_string());
            }
            entries.push((p, rec[1].to_string(), gain));
        }
        let mut gains = vec![vec![f64::NAN; receptors.len()]; pollutants.len()];
        for (p, r, g) in entries {
            let k = pollutants.iter().position(|x| *x == p).expect("collected");
            let i = receptors.iter().position(|x| *x == r).expect("collected");
            if !gains[k][i].is_nan() {
                return Err(DispersionError::InvalidMatrix(format!("duplicate entry {p}/{r}")));
            }
            gains[k][i] = g;
        }
        if gains.iter().flatten().any(|g| g.is_nan()) {
            return Err(DispersionError::InvalidMatrix("incomplete pollutant/receptor grid".into()));
        }
        Self::new(pollutants, receptors, gains)
    }

    pub fn load(path: &Path) -> Result<Self, DispersionError> {
        let f = File::open(path).map_err(|source| DispersionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_reader(f)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pollutant,receptor_id,gain\n");
        for (p, row) in self.pollutant_names.iter().zip(&self.gains) {
            for (r, g) in self.receptor_ids.iter().zip(row) {
                out.push_str(&format!("{},{},{:e}\n", p.code(), r, g));
            }
        }
        out
    }
}

/// Concentration change per receptor and pollutant.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceptorConcentrations {
    pub receptor_ids: Vec<String>,
    pub pollutant_names: Vec<Pollutant>,
    /// `delta[i][k]`, µg/m³.
    pub delta: Vec<Vec<f64>>,
}

/// `delta[i][k] = gains[k][i] · quantities[k]`.
pub fn apply_source_receptor(
    emissions: &EmissionVector,
    matrix: &SourceReceptorMatrix,
) -> Result<ReceptorConcentrations, DispersionError> {
    if emissions.quantities.len() != matrix.num_pollutants() {
        return Err(DispersionError::DimensionMismatch(format!(
            "{} emission quantities for {} pollutants",
            emissions.quantities.len(),
            matrix.num_pollutants()
        )));
    }
    if emissions.pollutant_names != matrix.pollutant_names {
        return Err(DispersionError::DimensionMismatch(
            "emission and matrix pollutant orders differ".into(),
        ));
    }
    let delta = (0..matrix.num_receptors())
        .map(|i| {
            matrix
                .gains
                .iter()
                .zip(&emissions.quantities)
                .map(|(row, q)| row[i] * q)
                .collect()
        })
        .collect();
    Ok(ReceptorConcentrations {
        receptor_ids: matrix.receptor_ids.clone(),
        pollutant_names: matrix.pollutant_names.clone(),
        delta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceptorOffset {
    pub id: String,
    /// Downwind distance, m.
    pub downwind_x: f64,
    /// Crosswind distance, m.
    pub crosswind_y: f64,
}

/// Prevailing-weather plume settings for one source region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlumeParams {
    /// m/s
    pub wind_speed: f64,
    /// m
    pub effective_height: f64,
    pub sigma_y_coeff: f64,
    pub sigma_z_coeff: f64,
    pub receptors: Vec<ReceptorOffset>,
}

impl PlumeParams {
    pub fn validate(&self) -> Result<(), DispersionError> {
        let bad = |m: String| Err(DispersionError::InvalidParams(m));
        if !(self.wind_speed > 0.0) || !self.wind_speed.is_finite() {
            return bad(format!("wind_speed must be positive, got {}", self.wind_speed));
        }
        if !(self.effective_height >= 0.0) || !self.effective_height.is_finite() {
            return bad(format!("effective_height must be non-negative, got {}", self.effective_height));
        }
        if !(self.sigma_y_coeff > 0.0) || !(self.sigma_z_coeff > 0.0) {
            return bad("dispersion coefficients must be positive".into());
        }
        if self.receptors.is_empty() {
            return bad("at least one receptor is required".into());
        }
        for r in &self.receptors {
            if !(r.downwind_x > 0.0) || !r.crosswind_y.is_finite() {
                return bad(format!("receptor {} must lie downwind (x > 0)", r.id));
            }
        }
        Ok(())
    }

    /// Ground-level concentration kernel at one receptor, in µg/m³ per kg.
    pub fn kernel(&self, downwind_x: f64, crosswind_y: f64) -> f64 {
        let sigma_y = self.sigma_y_coeff * downwind_x.powf(SIGMA_Y_EXPONENT);
        let sigma_z = self.sigma_z_coeff * downwind_x.powf(SIGMA_Z_EXPONENT);
        let h = self.effective_height;
        PLUME_UNIT / (std::f64::consts::PI * self.wind_speed * sigma_y * sigma_z)
            * (-crosswind_y * crosswind_y / (2.0 * sigma_y * sigma_y)).exp()
            * (-h * h / (2.0 * sigma_z * sigma_z)).exp()
    }
}

/// Source-receptor matrix from the plume kernel, identical for every pollutant.
pub fn build_plume_matrix(
    params: &PlumeParams,
    pollutants: &[Pollutant],
) -> Result<SourceReceptorMatrix, DispersionError> {
    params.validate()?;
    if pollutants.is_empty() {
        return Err(DispersionError::InvalidParams("no pollutants".into()));
    }
    let row: Vec<f64> = params
        .receptors
        .iter()
        .map(|r| params.kernel(r.downwind_x, r.crosswind_y))
        .collect();
    SourceReceptorMatrix::new(
        pollutants.to_vec(),
        params.receptors.iter().map(|r| r.id.clone()).collect(),
        vec![row; pollutants.len()],
    )
}

/// Learnable non-negative gains.
///
/// Effective gains are `scale ⊙ softplus(raw)`, laid out pollutant-major
/// (`k·M + i`). `scale` is fixed per gain from the training data (the ratio
/// of target to emission RMS) so that every raw parameter targets a value of
/// order one regardless of the physical magnitude of its gain.
#[derive(Clone, Debug, PartialEq)]
pub struct DispersionLayer {
    pub pollutant_names: Vec<Pollutant>,
    pub receptor_ids: Vec<String>,
    pub raw: Tensor,
    pub scale: Vec<f64>,
    pub trained: bool,
}

const INITIAL_NORMALIZED_GAIN: f64 = 0.5;

impl DispersionLayer {
    pub fn num_receptors(&self) -> usize {
        self.receptor_ids.len()
    }

    pub fn num_pollutants(&self) -> usize {
        self.pollutant_names.len()
    }

    /// Effective gains as `gains[k][i]`.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        let m = self.num_receptors();
        (0..self.num_pollutants())
            .map(|k| {
                (0..m)
                    .map(|i| self.scale[k * m + i] * softplus(self.raw.values[k * m + i]))
                    .collect()
            })
            .collect()
    }

    pub fn to_matrix(&self) -> Result<SourceReceptorMatrix, DispersionError> {
        SourceReceptorMatrix::new(
            self.pollutant_names.clone(),
            self.receptor_ids.clone(),
            self.weights(),
        )
    }

    /// Predicted concentrations for a batch of emissions, `P × (K·M)`.
    pub fn predict_graph(&self, g: &Graph, raw: Var, emissions: &[EmissionVector]) -> Var {
        let (k, m) = (self.num_pollutants(), self.num_receptors());
        let mut expanded = Vec::with_capacity(emissions.len() * k * m);
        for e in emissions {
            for q in &e.quantities {
                expanded.extend(std::iter::repeat_n(*q, m));
            }
        }
        let q = g.constant(Tensor::matrix(emissions.len(), k * m, expanded));
        let scale = g.constant(Tensor::matrix(1, k * m, self.scale.clone()));
        let w = g.mul_row(g.softplus(raw), scale);
        g.mul_row(q, w)
    }

    /// Mean over pairs of the per-gain normalized squared error.
    pub fn loss_graph(&self, g: &Graph, raw: Var, pairs: &[(EmissionVector, ReceptorConcentrations)]) -> Var {
        let (k, m) = (self.num_pollutants(), self.num_receptors());
        let emissions: Vec<EmissionVector> = pairs.iter().map(|(e, _)| e.clone()).collect();
        let pred = self.predict_graph(g, raw, &emissions);
        let mut target = Vec::with_capacity(pairs.len() * k * m);
        for (_, c) in pairs {
            for kk in 0..k {
                for i in 0..m {
                    target.push(c.delta[i][kk]);
                }
            }
        }
        let target = g.constant(Tensor::matrix(pairs.len(), k * m, target));
        let resid = g.sub(pred, target);
        let inv = self
            .scale
            .iter()
            .zip(&self.emission_rms(&emissions))
            .map(|(s, q)| {
                let target_rms = s * q;
                if target_rms > 0.0 {
                    1.0 / target_rms
                } else {
                    1.0
                }
            })
            .collect();
        let weighted = g.mul_row(resid, g.constant(Tensor::matrix(1, k * m, inv)));
        g.scale(g.sum_squares(weighted), 1.0 / pairs.len() as f64)
    }

    fn emission_rms(&self, emissions: &[EmissionVector]) -> Vec<f64> {
        let (k, m) = (self.num_pollutants(), self.num_receptors());
        let n = emissions.len().max(1) as f64;
        let mut out = Vec::with_capacity(k * m);
        for kk in 0..k {
            let rms = (emissions.iter().map(|e| e.quantities[kk].powi(2)).sum::<f64>() / n).sqrt();
            out.extend(std::iter::repeat_n(rms, m));
        }
        out
    }

    /// Plain mean squared error of predicted concentrations over the pairs.
    pub fn mse(&self, pairs: &[(EmissionVector, ReceptorConcentrations)]) -> f64 {
        let w = self.weights();
        let mut total = 0.0;
        let mut count = 0usize;
        for (e, c) in pairs {
            for (i, row) in c.delta.iter().enumerate() {
                for (kk, d) in row.iter().enumerate() {
                    total += (w[kk][i] * e.quantities[kk] - d).powi(2);
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

fn validate_pairs(
    pairs: &[(EmissionVector, ReceptorConcentrations)],
) -> Result<(Vec<Pollutant>, Vec<String>), DispersionError> {
    let (first_e, first_c) = pairs.first().ok_or(DispersionError::EmptyTrainingSet)?;
    let k = first_e.quantities.len();
    let m = first_c.delta.len();
    for (e, c) in pairs {
        if e.quantities.len() != k
            || c.delta.len() != m
            || c.delta.iter().any(|row| row.len() != k)
            || e.pollutant_names != first_e.pollutant_names
        {
            return Err(DispersionError::DimensionMismatch("inconsistent training pairs".into()));
        }
    }
    Ok((first_e.pollutant_names.clone(), first_c.receptor_ids.clone()))
}

/// Fits a [`DispersionLayer`] by full-batch gradient descent, one step per
/// epoch. A step that would raise the loss is retried at half the step size.
pub fn fit_dispersion_layer(
    pairs: &[(EmissionVector, ReceptorConcentrations)],
    epochs: usize,
    step_size: f64,
) -> Result<DispersionLayer, DispersionError> {
    let (pollutant_names, receptor_ids) = validate_pairs(pairs)?;
    let (k, m) = (pollutant_names.len(), receptor_ids.len());
    let n = pairs.len() as f64;

    let mut scale = Vec::with_capacity(k * m);
    for kk in 0..k {
        let q_rms = (pairs.iter().map(|(e, _)| e.quantities[kk].powi(2)).sum::<f64>() / n).sqrt();
        for i in 0..m {
            let d_rms = (pairs.iter().map(|(_, c)| c.delta[i][kk].powi(2)).sum::<f64>() / n).sqrt();
            scale.push(if q_rms > 0.0 { d_rms / q_rms } else { 1.0 });
        }
    }
    let mut layer = DispersionLayer {
        pollutant_names,
        receptor_ids,
        raw: Tensor::full(1, k * m, softplus_inverse(INITIAL_NORMALIZED_GAIN)),
        scale,
        trained: false,
    };

    let eval = |layer: &DispersionLayer, raw: &Tensor| -> (f64, Option<Tensor>) {
        let g = Graph::new();
        let rv = g.param(raw.clone());
        let loss = layer.loss_graph(&g, rv, pairs);
        g.backward(loss);
        (g.scalar(loss), g.grad(rv))
    };

    let (mut loss, mut grad) = eval(&layer, &layer.raw);
    if !loss.is_finite() {
        return Err(DispersionError::NonFiniteLoss);
    }
    for _ in 0..epochs {
        let Some(gr) = grad.as_ref() else { break };
        let mut step = step_size;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = Tensor::matrix(
                1,
                k * m,
                layer
                    .raw
                    .values
                    .iter()
                    .zip(&gr.values)
                    .map(|(r, g)| r - step * g)
                    .collect(),
            );
            let (l, gnew) = eval(&layer, &candidate);
            if l.is_finite() && l <= loss {
                layer.raw = candidate;
                loss = l;
                grad = gnew;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    layer.trained = epochs > 0;
    Ok(layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::{Rng, SeedableRng};

    fn single(p: Pollutant, q: f64) -> EmissionVector {
        EmissionVector {
            pollutant_names: vec![p],
            quantities: vec![q],
        }
    }

    fn matrix(gains: Vec<Vec<f64>>, pollutants: Vec<Pollutant>) -> SourceReceptorMatrix {
        let m = gains[0].len();
        SourceReceptorMatrix::new(pollutants, (0..m).map(|i| format!("r{i}")).collect(), gains).unwrap()
    }

    #[test]
    fn zero_emissions_give_zero_concentrations() {
        let sr = matrix(vec![vec![0.3, 0.7]], vec![Pollutant::So2]);
        let c = apply_source_receptor(&single(Pollutant::So2, 0.0), &sr).unwrap();
        assert!(c.delta.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_like_gain() {
        let sr = matrix(vec![vec![1.0, 0.0]], vec![Pollutant::So2]);
        let c = apply_source_receptor(&single(Pollutant::So2, 2.0), &sr).unwrap();
        assert_eq!(c.delta, vec![vec![2.0], vec![0.0]]);
    }

    #[test]
    fn hand_matrix_vector_product() {
        let sr = matrix(vec![vec![0.1, 0.3]], vec![Pollutant::So2]);
        let c = apply_source_receptor(&single(Pollutant::So2, 5.0), &sr).unwrap();
        assert!((c.delta[0][0] - 0.5).abs() < 1e-15);
        assert!((c.delta[1][0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn apply_rejects_wrong_dimension() {
        let sr = matrix(vec![vec![0.1], vec![0.2]], vec![Pollutant::So2, Pollutant::Nox]);
        assert!(matches!(
            apply_source_receptor(&single(Pollutant::So2, 1.0), &sr),
            Err(DispersionError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn superposition_is_exact_on_dyadic_inputs() {
        let sr = matrix(vec![vec![0.25, 0.5], vec![0.125, 2.0]], vec![Pollutant::So2, Pollutant::Nox]);
        let e1 = EmissionVector { pollutant_names: sr.pollutant_names.clone(), quantities: vec![1.5, 0.25] };
        let e2 = EmissionVector { pollutant_names: sr.pollutant_names.clone(), quantities: vec![0.75, 3.0] };
        let sum = EmissionVector { pollutant_names: sr.pollutant_names.clone(), quantities: vec![2.25, 3.25] };
        let (c1, c2, cs) = (
            apply_source_receptor(&e1, &sr).unwrap(),
            apply_source_receptor(&e2, &sr).unwrap(),
            apply_source_receptor(&sum, &sr).unwrap(),
        );
        for i in 0..2 {
            for k in 0..2 {
                assert_eq!(cs.delta[i][k], c1.delta[i][k] + c2.delta[i][k]);
            }
        }
    }

    fn plume(receptors: Vec<(f64, f64)>, h: f64, u: f64) -> PlumeParams {
        PlumeParams {
            wind_speed: u,
            effective_height: h,
            sigma_y_coeff: 0.08,
            sigma_z_coeff: 0.06,
            receptors: receptors
                .into_iter()
                .enumerate()
                .map(|(i, (x, y))| ReceptorOffset { id: format!("r{i}"), downwind_x: x, crosswind_y: y })
                .collect(),
        }
    }

    #[test]
    fn centerline_ground_source_kernel() {
        let p = plume(vec![(10_000.0, 0.0)], 0.0, 5.0);
        let sy = 0.08 * 10_000f64.powf(0.9);
        let sz = 0.06 * 10_000f64.powf(0.85);
        let expected = PLUME_UNIT / (std::f64::consts::PI * 5.0 * sy * sz);
        let sr = build_plume_matrix(&p, &[Pollutant::Pm25, Pollutant::So2]).unwrap();
        assert!((sr.gains[0][0] - expected).abs() <= 1e-15 * expected);
        assert_eq!(sr.gains[0], sr.gains[1]);
    }

    #[test]
    fn far_crosswind_gain_vanishes() {
        let p = plume(vec![(10_000.0, 0.0), (10_000.0, 1e6)], 50.0, 5.0);
        let sr = build_plume_matrix(&p, &[Pollutant::Pm25]).unwrap();
        assert!(sr.gains[0][0] > 0.0);
        assert!(sr.gains[0][1] < 1e-300);
    }

    #[test]
    fn doubling_wind_halves_gains() {
        let receptors = vec![(5_000.0, 100.0), (20_000.0, -800.0), (80_000.0, 3_000.0)];
        let slow = build_plume_matrix(&plume(receptors.clone(), 80.0, 3.0), &[Pollutant::So2]).unwrap();
        let fast = build_plume_matrix(&plume(receptors, 80.0, 6.0), &[Pollutant::So2]).unwrap();
        for (a, b) in slow.gains[0].iter().zip(&fast.gains[0]) {
            assert!((a / b - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_plume_params() {
        assert!(matches!(
            build_plume_matrix(&plume(vec![(1000.0, 0.0)], 10.0, 0.0), &[Pollutant::So2]),
            Err(DispersionError::InvalidParams(_))
        ));
        assert!(matches!(
            build_plume_matrix(&plume(vec![(-5.0, 0.0)], 10.0, 2.0), &[Pollutant::So2]),
            Err(DispersionError::InvalidParams(_))
        ));
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let sr = matrix(vec![vec![0.1, 0.3], vec![1e-7, 2.5]], vec![Pollutant::So2, Pollutant::Voc]);
        assert_eq!(SourceReceptorMatrix::from_reader(sr.to_csv().as_bytes()).unwrap(), sr);
        assert!(SourceReceptorMatrix::from_reader("pollutant,receptor_id,gain\nSO2,a,1\nNOX,b,1\n".as_bytes()).is_err());
    }

    fn pairs_from(sr: &SourceReceptorMatrix, n: usize, seed: u64) -> Vec<(EmissionVector, ReceptorConcentrations)> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let e = EmissionVector {
                    pollutant_names: sr.pollutant_names.clone(),
                    quantities: (0..sr.num_pollutants()).map(|_| rng.random_range(0.2..2.0)).collect(),
                };
                let c = apply_source_receptor(&e, sr).unwrap();
                (e, c)
            })
            .collect()
    }

    #[test]
    fn recovers_known_matrix() {
        let sr = matrix(
            vec![vec![0.2, 1.3, 0.05], vec![0.7, 0.01, 2.0]],
            vec![Pollutant::So2, Pollutant::Nox],
        );
        let pairs = pairs_from(&sr, 24, 3);
        let layer = fit_dispersion_layer(&pairs, 500, 0.5).unwrap();
        for (row, truth) in layer.weights().iter().zip(&sr.gains) {
            for (w, t) in row.iter().zip(truth) {
                assert!((w - t).abs() < 1e-3, "{w} vs {t}");
            }
        }
        assert!(layer.trained);
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let sr = matrix(vec![vec![0.2, 1.3]], vec![Pollutant::So2]);
        let pairs = pairs_from(&sr, 4, 1);
        let layer = fit_dispersion_layer(&pairs, 0, 0.5).unwrap();
        assert!(layer.raw.values.iter().all(|&r| r == softplus_inverse(INITIAL_NORMALIZED_GAIN)));
        assert!(!layer.trained);
    }

    #[test]
    fn zero_emission_pair_leaves_weights_unchanged() {
        let e = single(Pollutant::So2, 0.0);
        let c = ReceptorConcentrations {
            receptor_ids: vec!["a".into()],
            pollutant_names: vec![Pollutant::So2],
            delta: vec![vec![0.0]],
        };
        let before = fit_dispersion_layer(&[(e.clone(), c.clone())], 0, 0.5).unwrap();
        let after = fit_dispersion_layer(&[(e, c)], 50, 0.5).unwrap();
        assert_eq!(before.raw, after.raw);
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(fit_dispersion_layer(&[], 10, 0.5), Err(DispersionError::EmptyTrainingSet)));
    }

    #[test]
    fn fitting_never_raises_mse() {
        let sr = matrix(vec![vec![0.4, 0.02, 3.0, 0.9]], vec![Pollutant::Pm25]);
        let pairs = pairs_from(&sr, 10, 9);
        let init = fit_dispersion_layer(&pairs, 0, 2.0).unwrap();
        let fitted = fit_dispersion_layer(&pairs, 30, 2.0).unwrap();
        assert!(fitted.mse(&pairs) <= init.mse(&pairs));
    }

    #[test]
    fn layer_loss_gradient_matches_finite_differences() {
        let sr = matrix(vec![vec![0.2, 1.3], vec![0.7, 0.4]], vec![Pollutant::So2, Pollutant::Nox]);
        let pairs = pairs_from(&sr, 5, 4);
        let layer = fit_dispersion_layer(&pairs, 0, 0.5).unwrap();
        let raw = Tensor::matrix(1, 4, vec![-0.3, 0.2, 0.9, -1.1]);
        let err = grad_check(|g, v| layer.loss_graph(g, v, &pairs), &raw, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
