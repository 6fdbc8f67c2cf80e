//! Forecast architectures: a small attention encoder-decoder and a linear
//! baseline over log-shares.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normal_init, uniform_init, Bound, ForecastError, ParamStore};
use crate::autograd::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    AttentionEncoderDecoder,
    LinearBaseline,
}

impl std::str::FromStr for Architecture {
    type Err = ForecastError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "attention" | "attention_encoder_decoder" => Ok(Architecture::AttentionEncoderDecoder),
            "linear" | "linear_baseline" => Ok(Architecture::LinearBaseline),
            other => Err(ForecastError::InvalidConfig(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub num_fuels: usize,
    /// Input rows per window.
    pub context: usize,
    /// Output rows per window.
    pub horizon: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, num_fuels: usize, window: usize) -> Self {
        Self {
            architecture,
            num_fuels,
            context: window,
            horizon: window,
            embed_dim: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        let bad = |m: &str| Err(ForecastError::InvalidConfig(m.to_string()));
        if self.num_fuels == 0 || self.context == 0 || self.horizon == 0 {
            return bad("fuels, context and horizon must be positive");
        }
        if self.horizon > self.context {
            return bad("horizon may not exceed context");
        }
        if self.architecture == Architecture::AttentionEncoderDecoder {
            if self.heads == 0 || self.embed_dim % self.heads != 0 {
                return bad("heads must divide embed_dim");
            }
            if self.ffn_dim == 0 || self.decoder_layers == 0 {
                return bad("ffn_dim and decoder_layers must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Floor and scale for the linear baseline's log-share features.
const LINEAR_FLOOR: f64 = 1e-9;
const LINEAR_FEATURE_SCALE: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl ForecastModel {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ForecastError> {
        config.validate()?;
        let params = match config.architecture {
            Architecture::AttentionEncoderDecoder => attention_params(&config, rng),
            Architecture::LinearBaseline => linear_params(&config),
        };
        Ok(Self { config, params })
    }

    /// Stacks windows into the `(batch·context) × F` input layout.
    pub fn input_tensor(&self, windows: &[&[Vec<f64>]]) -> Result<Tensor, ForecastError> {
        let (c, f) = (self.config.context, self.config.num_fuels);
        let mut values = Vec::with_capacity(windows.len() * c * f);
        for w in windows {
            if w.len() < c {
                return Err(ForecastError::ShortHistory { needed: c, got: w.len() });
            }
            for row in &w[w.len() - c..] {
                if row.len() != f {
                    return Err(ForecastError::ShapeMismatch(format!("{} shares for {f} fuels", row.len())));
                }
                values.extend_from_slice(row);
            }
        }
        Ok(Tensor::matrix(windows.len() * c, f, values))
    }

    /// Simplex-valued `(batch·horizon) × F` forecast. Dropout is applied
    /// only when an RNG is supplied.
    pub fn forward_graph(
        &self,
        g: &Graph,
        p: &Bound,
        inputs: &Tensor,
        batch: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let logits = match self.config.architecture {
            Architecture::AttentionEncoderDecoder => self.attention_logits(g, p, inputs, batch, dropout_rng),
            Architecture::LinearBaseline => self.linear_logits(g, p, inputs, batch),
        };
        g.softmax_rows(logits)
    }

    /// Deterministic forecast of the `horizon` hours following `history`.
    pub fn predict(&self, history: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ForecastError> {
        Ok(self.predict_batch(&[history])?.remove(0))
    }

    pub fn predict_batch(&self, histories: &[&[Vec<f64>]]) -> Result<Vec<Vec<Vec<f64>>>, ForecastError> {
        if histories.is_empty() {
            return Ok(Vec::new());
        }
        let inputs = self.input_tensor(histories)?;
        let g = Graph::new();
        let p = self.params.bind_constants(&g);
        let out = self.forward_graph(&g, &p, &inputs, histories.len(), None);
        let t = g.value(out);
        let h = self.config.horizon;
        Ok((0..histories.len())
            .map(|b| (0..h).map(|j| t.row(b * h + j).to_vec()).collect())
            .collect())
    }

    fn attention_logits(
        &self,
        g: &Graph,
        p: &Bound,
        inputs: &Tensor,
        batch: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let cfg = &self.config;
        let (c, h, d) = (cfg.context, cfg.horizon, cfg.embed_dim);
        let x = g.constant(inputs.clone());
        let pe = g.tile_rows(g.constant(positional_encoding(0, c, d)), batch);
        let mut enc = g.add(g.add_row(g.matmul(x, p["embed.w"]), p["embed.b"]), pe);

        for l in 0..cfg.encoder_layers {
            let pre = format!("enc{l}");
            let a = mha(g, p, &format!("{pre}.attn"), enc, enc, batch, c, c, cfg.heads);
            let a = dropout(g, a, cfg.dropout, rng.as_deref_mut());
            enc = layer_norm(g, p, &format!("{pre}.ln1"), g.add(enc, a));
            let f = ffn(g, p, &format!("{pre}.ffn"), enc);
            let f = dropout(g, f, cfg.dropout, rng.as_deref_mut());
            enc = layer_norm(g, p, &format!("{pre}.ln2"), g.add(enc, f));
        }

        let queries = g.add(p["dec.query"], g.constant(positional_encoding(c, h, d)));
        let mut dec = g.tile_rows(queries, batch);
        for l in 0..cfg.decoder_layers {
            let pre = format!("dec{l}");
            let s = mha(g, p, &format!("{pre}.self"), dec, dec, batch, h, h, cfg.heads);
            let s = dropout(g, s, cfg.dropout, rng.as_deref_mut());
            dec = layer_norm(g, p, &format!("{pre}.ln1"), g.add(dec, s));
            let x = mha(g, p, &format!("{pre}.cross"), dec, enc, batch, h, c, cfg.heads);
            let x = dropout(g, x, cfg.dropout, rng.as_deref_mut());
            dec = layer_norm(g, p, &format!("{pre}.ln2"), g.add(dec, x));
            let f = ffn(g, p, &format!("{pre}.ffn"), dec);
            let f = dropout(g, f, cfg.dropout, rng.as_deref_mut());
            dec = layer_norm(g, p, &format!("{pre}.ln3"), g.add(dec, f));
        }

        g.add_row(g.matmul(dec, p["out.w"]), p["out.b"])
    }

    fn linear_logits(&self, g: &Graph, p: &Bound, inputs: &Tensor, batch: usize) -> Var {
        let (c, h, f) = (self.config.context, self.config.horizon, self.config.num_fuels);
        let features = Tensor::matrix(
            batch,
            c * f,
            inputs
                .values
                .iter()
                .map(|x| (x + LINEAR_FLOOR).ln() / LINEAR_FEATURE_SCALE)
                .collect(),
        );
        let z = g.add_row(g.matmul(g.constant(features), p["linear.w"]), p["linear.b"]);
        g.reshape(z, batch * h, f)
    }
}

fn attention_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let (f, d, ff) = (cfg.num_fuels, cfg.embed_dim, cfg.ffn_dim);
    let mut ps = ParamStore::default();
    ps.insert("embed.w", uniform_init(rng, f, d));
    ps.insert("embed.b", Tensor::zeros(1, d));
    let attn = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, pre: &str| {
        for name in ["wq", "wk", "wv", "wo"] {
            ps.insert(&format!("{pre}.{name}"), uniform_init(rng, d, d));
        }
        for name in ["bq", "bv", "bo"] {
            ps.insert(&format!("{pre}.{name}"), Tensor::zeros(1, d));
        }
    };
    let norm = |ps: &mut ParamStore, pre: &str| {
        ps.insert(&format!("{pre}.gamma"), Tensor::full(1, d, 1.0));
        ps.insert(&format!("{pre}.beta"), Tensor::zeros(1, d));
    };
    let ffn = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, pre: &str| {
        ps.insert(&format!("{pre}.w1"), uniform_init(rng, d, ff));
        ps.insert(&format!("{pre}.b1"), Tensor::zeros(1, ff));
        ps.insert(&format!("{pre}.w2"), uniform_init(rng, ff, d));
        ps.insert(&format!("{pre}.b2"), Tensor::zeros(1, d));
    };
    for l in 0..cfg.encoder_layers {
        attn(&mut ps, rng, &format!("enc{l}.attn"));
        norm(&mut ps, &format!("enc{l}.ln1"));
        ffn(&mut ps, rng, &format!("enc{l}.ffn"));
        norm(&mut ps, &format!("enc{l}.ln2"));
    }
    ps.insert("dec.query", normal_init(rng, cfg.horizon, d, 0.1));
    for l in 0..cfg.decoder_layers {
        attn(&mut ps, rng, &format!("dec{l}.self"));
        norm(&mut ps, &format!("dec{l}.ln1"));
        attn(&mut ps, rng, &format!("dec{l}.cross"));
        norm(&mut ps, &format!("dec{l}.ln2"));
        ffn(&mut ps, rng, &format!("dec{l}.ffn"));
        norm(&mut ps, &format!("dec{l}.ln3"));
    }
    ps.insert("out.w", normal_init(rng, d, f, 0.02));
    ps.insert("out.b", Tensor::zeros(1, f));
    ps
}

/// Persistence: every output row starts as the last observed row.
fn linear_params(cfg: &ModelConfig) -> ParamStore {
    let (c, h, f) = (cfg.context, cfg.horizon, cfg.num_fuels);
    let mut w = Tensor::zeros(c * f, h * f);
    for j in 0..h {
        for k in 0..f {
            w.values[((c - 1) * f + k) * h * f + j * f + k] = LINEAR_FEATURE_SCALE;
        }
    }
    let mut ps = ParamStore::default();
    ps.insert("linear.w", w);
    ps.insert("linear.b", Tensor::zeros(1, h * f));
    ps
}

/// Sinusoidal encoding for positions `start..start + len`.
pub(crate) fn positional_encoding(start: usize, len: usize, d: usize) -> Tensor {
    let mut values = Vec::with_capacity(len * d);
    for pos in start..start + len {
        for i in 0..d {
            let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            values.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(len, d, values)
}

#[allow(clippy::too_many_arguments)]
fn mha(g: &Graph, p: &Bound, pre: &str, xq: Var, xkv: Var, batch: usize, q_len: usize, k_len: usize, heads: usize) -> Var {
    let w = |n: &str| p[&format!("{pre}.{n}")];
    let q = g.add_row(g.matmul(xq, w("wq")), w("bq"));
    let k = g.matmul(xkv, w("wk"));
    let v = g.add_row(g.matmul(xkv, w("wv")), w("bv"));
    let a = g.attention(q, k, v, batch, q_len, k_len, heads);
    g.add_row(g.matmul(a, w("wo")), w("bo"))
}

fn ffn(g: &Graph, p: &Bound, pre: &str, x: Var) -> Var {
    let w = |n: &str| p[&format!("{pre}.{n}")];
    let hidden = g.gelu(g.add_row(g.matmul(x, w("w1")), w("b1")));
    g.add_row(g.matmul(hidden, w("w2")), w("b2"))
}

fn layer_norm(g: &Graph, p: &Bound, pre: &str, x: Var) -> Var {
    g.layer_norm(x, p[&format!("{pre}.gamma")], p[&format!("{pre}.beta")])
}

/// Inverted dropout through a constant mask.
fn dropout(g: &Graph, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if rate == 0.0 {
        return x;
    }
    let (rows, cols) = g.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    g.mul(x, g.constant(Tensor::matrix(rows, cols, mask)))
}
