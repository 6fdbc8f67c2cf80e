//! Mix-to-impact converter: three fully connected layers with a softplus
//! output so both predicted costs stay non-negative.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_init, Bound, ForecastError, ParamStore};
use crate::autograd::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConverterConfig {
    pub num_fuels: usize,
    pub hidden: usize,
    /// $/MWh represented by one output unit. Fixed from the training labels
    /// so the network works in units of order one.
    pub output_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HealthConverterNet {
    pub config: ConverterConfig,
    pub params: ParamStore,
}

impl HealthConverterNet {
    pub fn new(config: ConverterConfig, rng: &mut ChaCha8Rng) -> Result<Self, ForecastError> {
        if config.num_fuels == 0 || config.hidden == 0 {
            return Err(ForecastError::InvalidConfig("converter widths must be positive".into()));
        }
        if !(config.output_scale > 0.0) || !config.output_scale.is_finite() {
            return Err(ForecastError::InvalidConfig(format!(
                "converter output scale must be positive, got {}",
                config.output_scale
            )));
        }
        let (f, h) = (config.num_fuels, config.hidden);
        let mut params = ParamStore::default();
        params.insert("conv.w1", uniform_init(rng, f, h));
        params.insert("conv.b1", Tensor::zeros(1, h));
        params.insert("conv.w2", uniform_init(rng, h, h));
        params.insert("conv.b2", Tensor::zeros(1, h));
        params.insert("conv.w3", uniform_init(rng, h, 2));
        params.insert("conv.b3", Tensor::zeros(1, 2));
        Ok(Self { config, params })
    }

    /// `rows × 2` impacts in units of `output_scale`.
    pub fn forward_graph(&self, g: &Graph, p: &Bound, mix: Var) -> Var {
        let h1 = g.tanh(g.add_row(g.matmul(mix, p["conv.w1"]), p["conv.b1"]));
        let h2 = g.tanh(g.add_row(g.matmul(h1, p["conv.w2"]), p["conv.b2"]));
        g.softplus(g.add_row(g.matmul(h2, p["conv.w3"]), p["conv.b3"]))
    }

    /// (internal, external) $/MWh for each mix row.
    pub fn predict(&self, mixes: &[Vec<f64>]) -> Result<Vec<[f64; 2]>, ForecastError> {
        if mixes.is_empty() {
            return Ok(Vec::new());
        }
        let f = self.config.num_fuels;
        if let Some(row) = mixes.iter().find(|r| r.len() != f) {
            return Err(ForecastError::ShapeMismatch(format!("{} shares for {f} fuels", row.len())));
        }
        let g = Graph::new();
        let p = self.params.bind_constants(&g);
        let x = g.constant(Tensor::matrix(mixes.len(), f, mixes.concat()));
        let out = self.forward_graph(&g, &p, x);
        let t = g.value(out);
        let s = self.config.output_scale;
        Ok((0..mixes.len()).map(|r| [t.at(r, 0) * s, t.at(r, 1) * s]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::{Rng, SeedableRng};

    fn net(seed: u64) -> HealthConverterNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HealthConverterNet::new(ConverterConfig { num_fuels: 5, hidden: 7, output_scale: 40.0 }, &mut rng).unwrap()
    }

    #[test]
    fn outputs_are_non_negative() {
        let mut n = net(1);
        for v in &mut n.params.tensors.get_mut("conv.b3").unwrap().values {
            *v = -50.0;
        }
        let out = n.predict(&[vec![0.2; 5], vec![1.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(out.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_bad_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ConverterConfig { num_fuels: 3, hidden: 4, output_scale: 0.0 };
        assert!(HealthConverterNet::new(cfg, &mut rng).is_err());
    }

    #[test]
    fn converter_gradients() {
        let n = net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mix = Tensor::matrix(6, 5, (0..30).map(|_| rng.random_range(0.0..1.0)).collect());
        let readout = Tensor::matrix(6, 2, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        for name in n.params.tensors.keys() {
            let x = n.params.get(name).unwrap().clone();
            let err = grad_check(
                |g, v| {
                    let mut p = n.params.bind_constants(g);
                    p.insert(name.clone(), v);
                    let out = n.forward_graph(g, &p, g.constant(mix.clone()));
                    g.sum(g.mul(out, g.constant(readout.clone())))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
        let err = grad_check(
            |g, v| {
                let p = n.params.bind_constants(g);
                g.sum(g.mul(n.forward_graph(g, &p, v), g.constant(readout.clone())))
            },
            &mix,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input: {err}");
    }
}
