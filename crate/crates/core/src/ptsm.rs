//! Physiological time-series encoder: per-hour convolutional embedding,
//! sinusoidal positions, a Transformer encoder stack and dense interpolation
//! down to a fixed-length vector.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{encoder_layer, Ctx, EncoderConfig, EncoderLayerParams};
use crate::tensor::{init, Activation, Binding, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PtsmConfig {
    /// Input features per hour (M).
    pub features: usize,
    /// Embedding width (K).
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Inner width of the position-wise FFN; `4 * embed_dim` when absent.
    #[serde(default)]
    pub d_ff: Option<usize>,
    /// Interpolation coefficient (I).
    pub interpolation: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "relu")]
    pub activation: Activation,
}

fn relu() -> Activation {
    Activation::Relu
}

impl PtsmConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("ptsm: {msg}")));
        if self.features == 0 {
            return fail("features must be positive".into());
        }
        if self.embed_dim <= self.features {
            return fail(format!(
                "embed_dim {} must exceed the feature count {}",
                self.embed_dim, self.features
            ));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return fail(format!("embed_dim {} must be even", self.embed_dim));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.interpolation == 0 {
            return fail("interpolation must be at least 1".into());
        }
        if self.d_ff == Some(0) {
            return fail("d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.embed_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.embed_dim * self.interpolation
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.embed_dim,
            heads: self.heads,
            d_ff: self.d_ff(),
            dropout: self.dropout,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PtsmParams {
    /// `[1, M, K]` kernel.
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub layers: Vec<EncoderLayerParams>,
}

impl PtsmParams {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &PtsmConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed_w = params.add(
            format!("{prefix}.embed.w"),
            init::conv_kernel(1, cfg.features, cfg.embed_dim, rng),
        )?;
        let embed_b = params.add(format!("{prefix}.embed.b"), init::bias(cfg.embed_dim))?;
        let enc = cfg.encoder();
        let layers = (0..cfg.layers)
            .map(|n| EncoderLayerParams::init(params, &format!("{prefix}.layer{n}"), &enc, rng))
            .collect::<Result<_>>()?;
        Ok(PtsmParams {
            embed_w,
            embed_b,
            layers,
        })
    }
}

/// Sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/K))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/K))`, with `pos` 0-based.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs a positive even width, got {dim}"
        )));
    }
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, dim], data)
}

/// Interpolation weights as an `[I, L]` matrix: entry `(i-1, l-1)` is
/// `(1 - |I*l/L - i| / I)^2` for 1-based `l` and `i`.
pub fn interpolation_weights(len: usize, coeff: usize) -> Result<Tensor> {
    if len == 0 || coeff == 0 {
        return Err(Error::Config(format!(
            "dense interpolation needs L >= 1 and I >= 1, got L={len}, I={coeff}"
        )));
    }
    let (lf, cf) = (len as f64, coeff as f64);
    let mut data = Vec::with_capacity(coeff * len);
    for i in 1..=coeff {
        for l in 1..=len {
            let e = cf * l as f64 / lf;
            data.push((1.0 - (e - i as f64).abs() / cf).powi(2));
        }
    }
    Tensor::new(vec![coeff, len], data)
}

/// Dense interpolation of the rows of `e` (`[L, d]`) into `I` rows,
/// flattened row-major to length `I * d`.
pub fn dense_interpolate(e: &Tensor, coeff: usize) -> Result<Vec<f64>> {
    if e.shape().len() != 2 {
        return Err(Error::shape("dense_interpolate", e.shape(), &[0, 0]));
    }
    let (len, d) = (e.rows(), e.cols());
    let w = interpolation_weights(len, coeff)?;
    let mut z = vec![0.0; coeff * d];
    for i in 0..coeff {
        for l in 0..len {
            let r = w.at(i, l);
            for (zc, &ec) in z[i * d..(i + 1) * d].iter_mut().zip(e.row(l)) {
                *zc += r * ec;
            }
        }
    }
    Ok(z)
}

/// Taped dense interpolation; returns a `[1, I*d]` row.
pub fn dense_interpolate_var(tape: &mut Tape, e: Var, coeff: usize) -> Result<Var> {
    let shape = tape.shape(e).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("dense_interpolate", &shape, &[0, 0]));
    }
    let w = tape.constant(interpolation_weights(shape[0], coeff)?);
    let z = tape.matmul(w, e)?;
    tape.reshape(z, &[1, coeff * shape[1]])
}

/// Kernel-size-1 convolution of `[L, M]` hourly rows to `[L, K]`.
pub fn embed_sequence(
    tape: &mut Tape,
    b: &Binding,
    p: &PtsmParams,
    cfg: &PtsmConfig,
    x: Var,
) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != cfg.features {
        return Err(Error::shape("embed_sequence", shape, &[0, cfg.features]));
    }
    tape.conv1d(x, b[p.embed_w], Some(b[p.embed_b]))
}

pub struct PtsmOutput {
    /// `[1, K*I]`.
    pub vector: Var,
    /// Attention weights per layer, per head.
    pub attention: Vec<Vec<Var>>,
}

/// embed, add positions, run the encoder stack, interpolate.
pub fn ptsm_forward(
    tape: &mut Tape,
    b: &Binding,
    p: &PtsmParams,
    cfg: &PtsmConfig,
    ctx: &mut Ctx<'_>,
    x: Var,
) -> Result<PtsmOutput> {
    let emb = embed_sequence(tape, b, p, cfg, x)?;
    let len = tape.shape(emb)[0];
    let pe = tape.constant(positional_encoding(len, cfg.embed_dim)?);
    let mut h = tape.add(emb, pe)?;
    let enc = cfg.encoder();
    let mut attention = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (y, w) = encoder_layer(tape, b, layer, &enc, ctx, h, None)?;
        h = y;
        attention.push(w);
    }
    let vector = dense_interpolate_var(tape, h, cfg.interpolation)?;
    Ok(PtsmOutput { vector, attention })
}
