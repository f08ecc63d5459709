//! Attention and Transformer encoder blocks shared by both encoders.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{init, Activation, Binding, ParamId, ParamSet, Tape, Var};

/// Forward-pass mode: whether dropout is active, and its randomness.
pub struct Ctx<'r> {
    pub training: bool,
    pub rng: &'r mut dyn RngCore,
}

impl<'r> Ctx<'r> {
    pub fn train(rng: &'r mut dyn RngCore) -> Self {
        Ctx {
            training: true,
            rng,
        }
    }

    pub fn eval(rng: &'r mut dyn RngCore) -> Self {
        Ctx {
            training: false,
            rng,
        }
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        tape.dropout(x, rate, self.training, &mut *self.rng)
    }
}

/// `softmax(Q Kᵀ / √d_k) V`, optionally hiding keys where `keep[j]` is false.
///
/// Returns the output and the attention weights (queries × keys).
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    keep: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::shape("scaled_dot_attention", &qs, &ks));
    }
    if qs[1] != ks[1] {
        return Err(Error::shape("scaled_dot_attention", &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::shape("scaled_dot_attention", &ks, &vs));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    let weights = match keep {
        Some(mask) => tape.masked_softmax(scores, mask)?,
        None => tape.softmax(scores, 1)?,
    };
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Per-head query/key/value projections followed by an output projection of
/// the concatenated heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl MultiHeadParams {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let d_k = d_model / heads;
        let mut hs = Vec::with_capacity(heads);
        for h in 0..heads {
            hs.push(HeadParams {
                wq: params.add(
                    format!("{prefix}.head{h}.wq"),
                    init::weight(d_model, d_k, rng),
                )?,
                wk: params.add(
                    format!("{prefix}.head{h}.wk"),
                    init::weight(d_model, d_k, rng),
                )?,
                wv: params.add(
                    format!("{prefix}.head{h}.wv"),
                    init::weight(d_model, d_k, rng),
                )?,
            });
        }
        Ok(MultiHeadParams {
            heads: hs,
            wo: params.add(format!("{prefix}.wo"), init::weight(d_model, d_model, rng))?,
            bo: params.add(format!("{prefix}.bo"), init::bias(d_model))?,
        })
    }
}

/// Multi-head self-attention over the rows of `x`. Returns the projected
/// output and each head's attention weights.
pub fn multi_head_attention(
    tape: &mut Tape,
    b: &Binding,
    p: &MultiHeadParams,
    x: Var,
    keep: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let q = tape.matmul(x, b[head.wq])?;
        let k = tape.matmul(x, b[head.wk])?;
        let v = tape.matmul(x, b[head.wv])?;
        let (o, w) = scaled_dot_attention(tape, q, k, v, keep)?;
        outs.push(o);
        weights.push(w);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let proj = tape.matmul(cat, b[p.wo])?;
    let out = tape.add_bias(proj, b[p.bo])?;
    Ok((out, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub attn: MultiHeadParams,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl EncoderLayerParams {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(EncoderLayerParams {
            attn: MultiHeadParams::init(params, &format!("{prefix}.attn"), d, cfg.heads, rng)?,
            ln1_gain: params.add(format!("{prefix}.ln1.gain"), init::ones(d))?,
            ln1_bias: params.add(format!("{prefix}.ln1.bias"), init::bias(d))?,
            ff1_w: params.add(
                format!("{prefix}.ff1.w"),
                init::conv_kernel(1, d, cfg.d_ff, rng),
            )?,
            ff1_b: params.add(format!("{prefix}.ff1.b"), init::bias(cfg.d_ff))?,
            ff2_w: params.add(
                format!("{prefix}.ff2.w"),
                init::conv_kernel(1, cfg.d_ff, d, rng),
            )?,
            ff2_b: params.add(format!("{prefix}.ff2.b"), init::bias(d))?,
            ln2_gain: params.add(format!("{prefix}.ln2.gain"), init::ones(d))?,
            ln2_bias: params.add(format!("{prefix}.ln2.bias"), init::bias(d))?,
        })
    }
}

/// Post-norm encoder layer:
/// `y1 = LN(x + Dropout(MHA(x)))`, `y2 = LN(y1 + Dropout(FFN(y1)))`, where the
/// FFN is two kernel-size-1 convolutions with the activation in between.
pub fn encoder_layer(
    tape: &mut Tape,
    b: &Binding,
    p: &EncoderLayerParams,
    cfg: &EncoderConfig,
    ctx: &mut Ctx<'_>,
    x: Var,
    keep: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let (attn, weights) = multi_head_attention(tape, b, &p.attn, x, keep)?;
    let attn = ctx.dropout(tape, attn, cfg.dropout)?;
    let res1 = tape.add(x, attn)?;
    let y1 = tape.layer_norm(res1, b[p.ln1_gain], b[p.ln1_bias])?;

    let h = tape.conv1d(y1, b[p.ff1_w], Some(b[p.ff1_b]))?;
    let h = tape.activation(h, cfg.activation);
    let ff = tape.conv1d(h, b[p.ff2_w], Some(b[p.ff2_b]))?;
    let ff = ctx.dropout(tape, ff, cfg.dropout)?;
    let res2 = tape.add(y1, ff)?;
    let y2 = tape.layer_norm(res2, b[p.ln2_gain], b[p.ln2_bias])?;
    Ok((y2, weights))
}
