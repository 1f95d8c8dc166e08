//! Trainable layers built on the tape: linear maps, layer norm and a
//! pre-norm Transformer encoder over ragged segments.

use hme_autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HmeError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `rows × cols` matrix with entries ~ Uniform(−a, a), a = √(6 / (rows + cols)).
pub fn xavier_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

/// `y = x W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = params.add(format!("{name}.weight"), xavier_uniform(rng, in_dim, out_dim));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: params.add(
                format!("{name}.gamma"),
                Tensor::new(vec![dim], vec![1.0; dim]).expect("dim > 0"),
            ),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        Ok(tape.layer_norm_affine(x, g, b, LAYER_NORM_EPS)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Width of the incoming rows; `None` when they already have `d_model`
    /// columns and no input projection is wanted.
    pub input_dim: Option<usize>,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ff_dim == 0 {
            return Err(HmeError::Config("encoder widths must be positive".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(HmeError::Config(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HmeError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Pre-norm Transformer encoder applied independently to each segment of
/// consecutive rows.
///
/// Positions restart at zero in every segment. With zero layers the encoder
/// reduces to its input projection (or the identity).
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub config: EncoderConfig,
    pub input: Option<Linear>,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<LayerNorm>,
}

impl TransformerEncoder {
    pub fn new<R: Rng>(params: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let input = config
            .input_dim
            .map(|i| Linear::new(params, &format!("{name}.input"), i, d, rng));
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    norm_attn: LayerNorm::new(params, &format!("{p}.norm_attn"), d),
                    query: Linear::new(params, &format!("{p}.query"), d, d, rng),
                    key: Linear::new(params, &format!("{p}.key"), d, d, rng),
                    value: Linear::new(params, &format!("{p}.value"), d, d, rng),
                    out: Linear::new(params, &format!("{p}.out"), d, d, rng),
                    norm_ff: LayerNorm::new(params, &format!("{p}.norm_ff"), d),
                    ff_in: Linear::new(params, &format!("{p}.ff_in"), d, config.ff_dim, rng),
                    ff_out: Linear::new(params, &format!("{p}.ff_out"), config.ff_dim, d, rng),
                }
            })
            .collect();
        let final_norm = (config.layers > 0).then(|| LayerNorm::new(params, &format!("{name}.final_norm"), d));
        Ok(TransformerEncoder {
            config,
            input,
            layers,
            final_norm,
        })
    }

    /// Encodes `x` (`N × input`) whose rows form segments of lengths `lens`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var, lens: &[usize]) -> Result<Var> {
        let mut h = match &self.input {
            Some(lin) => lin.forward(tape, params, x)?,
            None => x,
        };
        if self.layers.is_empty() {
            return Ok(h);
        }
        let pe = tape.constant(positional_encoding(lens, self.config.d_model));
        h = tape.add(h, pe)?;
        h = tape.dropout(h, self.config.dropout)?;
        for layer in &self.layers {
            let n = layer.norm_attn.forward(tape, params, h)?;
            let q = layer.query.forward(tape, params, n)?;
            let k = layer.key.forward(tape, params, n)?;
            let v = layer.value.forward(tape, params, n)?;
            let a = tape.segment_attention(q, k, v, self.config.heads, lens)?;
            let a = layer.out.forward(tape, params, a)?;
            let a = tape.dropout(a, self.config.dropout)?;
            h = tape.add(h, a)?;

            let n = layer.norm_ff.forward(tape, params, h)?;
            let f = layer.ff_in.forward(tape, params, n)?;
            let f = tape.relu(f)?;
            let f = layer.ff_out.forward(tape, params, f)?;
            let f = tape.dropout(f, self.config.dropout)?;
            h = tape.add(h, f)?;
        }
        match &self.final_norm {
            Some(norm) => norm.forward(tape, params, h),
            None => Ok(h),
        }
    }
}

/// Sinusoidal position table for rows grouped into segments; the position
/// of a row is its offset within its segment.
pub fn positional_encoding(lens: &[usize], d: usize) -> Tensor {
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(total * d);
    for &len in lens {
        for pos in 0..len {
            for k in 0..d {
                let freq = 10000f64.powf((k - k % 2) as f64 / d as f64);
                let angle = pos as f64 / freq;
                data.push(if k % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::matrix(total, d, data)
}
