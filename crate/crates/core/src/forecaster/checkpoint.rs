//! Self-describing JSON checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConverterConfig, ForecastError, ForecastModel, HealthConverterNet, ModelConfig, ParamStore, TrainConfig};
use crate::canon::Fuel;

pub const CHECKPOINT_FORMAT: &str = "gridhealth-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub fuels: Vec<Fuel>,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub converter_config: ConverterConfig,
    pub model_params: ParamStore,
    pub converter_params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &ForecastModel, converter: &HealthConverterNet, cfg: &TrainConfig, fuels: &[Fuel]) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: cfg.seed,
            fuels: fuels.to_vec(),
            train_config: cfg.clone(),
            model_config: model.config.clone(),
            converter_config: converter.config.clone(),
            model_params: model.params.clone(),
            converter_params: converter.params.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String, ForecastError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(raw: &str) -> Result<Self, ForecastError> {
        let c: Checkpoint = serde_json::from_str(raw)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(ForecastError::Checkpoint(format!("unsupported format {} v{}", c.format, c.version)));
        }
        Ok(c)
    }

    /// Rebuilds both networks, checking every tensor against the shapes the
    /// stored configs imply.
    pub fn into_parts(self) -> Result<(ForecastModel, HealthConverterNet), ForecastError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = ForecastModel::new(self.model_config, &mut rng)?;
        let mut converter = HealthConverterNet::new(self.converter_config, &mut rng)?;
        replace_checked(&mut model.params, self.model_params)?;
        replace_checked(&mut converter.params, self.converter_params)?;
        Ok((model, converter))
    }
}

fn replace_checked(expected: &mut ParamStore, stored: ParamStore) -> Result<(), ForecastError> {
    if expected.tensors.len() != stored.tensors.len() {
        return Err(ForecastError::Checkpoint(format!(
            "{} tensors stored, {} expected",
            stored.tensors.len(),
            expected.tensors.len()
        )));
    }
    for (name, t) in &stored.tensors {
        let want = expected
            .get(name)
            .ok_or_else(|| ForecastError::Checkpoint(format!("unexpected tensor '{name}'")))?;
        if want.shape != t.shape || t.values.len() != t.shape.iter().product::<usize>() {
            return Err(ForecastError::Checkpoint(format!("tensor '{name}' has shape {:?}", t.shape)));
        }
        if !t.is_finite() {
            return Err(ForecastError::Checkpoint(format!("tensor '{name}' has non-finite values")));
        }
    }
    let order: Vec<String> = expected.tensors.keys().cloned().collect();
    let mut stored = stored;
    expected.tensors = order
        .into_iter()
        .map(|k| {
            let t = stored.tensors.swap_remove(&k).expect("checked above");
            (k, t)
        })
        .collect();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::Architecture;

    #[test]
    fn roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = ForecastModel::new(
            ModelConfig { embed_dim: 8, heads: 2, ffn_dim: 8, ..ModelConfig::new(Architecture::AttentionEncoderDecoder, 3, 4) },
            &mut rng,
        )
        .unwrap();
        let conv = HealthConverterNet::new(ConverterConfig { num_fuels: 3, hidden: 5, output_scale: 12.5 }, &mut rng).unwrap();
        let cfg = TrainConfig::default();
        let ck = Checkpoint::new(&model, &conv, &cfg, &[Fuel::Coal, Fuel::Wind, Fuel::Solar]);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let (m2, c2) = back.into_parts().unwrap();
        assert_eq!(m2, model);
        assert_eq!(c2, conv);
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = ForecastModel::new(ModelConfig::new(Architecture::LinearBaseline, 3, 4), &mut rng).unwrap();
        let conv = HealthConverterNet::new(ConverterConfig { num_fuels: 3, hidden: 5, output_scale: 1.0 }, &mut rng).unwrap();
        let mut ck = Checkpoint::new(&model, &conv, &TrainConfig::default(), &[Fuel::Coal, Fuel::Wind, Fuel::Solar]);
        ck.model_config.horizon = 2;
        assert!(matches!(ck.into_parts(), Err(ForecastError::Checkpoint(_))));
    }
}
