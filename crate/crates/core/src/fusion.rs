//! Concatenation fusion and the classification head.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::{init, Activation, Binding, ParamId, ParamSet, Tape, Tensor, Var};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub ptsm_dim: usize,
    pub cnm_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
    /// Weight of the positive-class loss term; the negative term gets `1 - w`.
    pub class_weight: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

fn relu() -> Activation {
    Activation::Relu
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ptsm_dim == 0 || self.cnm_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("fusion: all widths must be positive".into()));
        }
        if !(self.class_weight > 0.0 && self.class_weight < 1.0) {
            return Err(Error::Config(format!(
                "fusion: class_weight {} outside (0, 1)",
                self.class_weight
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "fusion: dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.ptsm_dim + self.cnm_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionParams {
    pub hidden: Vec<(ParamId, ParamId)>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl FusionParams {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &FusionConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut width = cfg.input_dim();
        let mut hidden = Vec::with_capacity(cfg.hidden.len());
        for (n, &h) in cfg.hidden.iter().enumerate() {
            let w = params.add(format!("{prefix}.hidden{n}.w"), init::weight(width, h, rng))?;
            let b = params.add(format!("{prefix}.hidden{n}.b"), init::bias(h))?;
            hidden.push((w, b));
            width = h;
        }
        Ok(FusionParams {
            hidden,
            out_w: params.add(format!("{prefix}.out.w"), init::weight(width, 2, rng))?,
            out_b: params.add(format!("{prefix}.out.b"), init::bias(2))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prob_sepsis: f64,
    pub label: u8,
}

impl Prediction {
    pub fn new(prob_sepsis: f64, threshold: f64) -> Self {
        Prediction {
            prob_sepsis,
            label: u8::from(prob_sepsis >= threshold),
        }
    }
}

/// Concatenates one `[1, ptsm_dim]` and one `[1, cnm_dim]` row. An absent
/// modality is replaced by zeros of its configured width.
pub fn fuse(
    tape: &mut Tape,
    cfg: &FusionConfig,
    ptsm: Option<Var>,
    cnm: Option<Var>,
) -> Result<Var> {
    let mut part = |v: Option<Var>, width: usize, what: &'static str| -> Result<Var> {
        let v = v.unwrap_or_else(|| tape.constant(Tensor::zeros(&[1, width])));
        if tape.shape(v) != [1, width] {
            return Err(Error::shape(what, tape.shape(v), &[1, width]));
        }
        Ok(v)
    };
    let a = part(ptsm, cfg.ptsm_dim, "fuse (ptsm)")?;
    let c = part(cnm, cfg.cnm_dim, "fuse (cnm)")?;
    tape.concat_cols(&[a, c])
}

/// Head over a `[B, ptsm_dim + cnm_dim]` batch of fused rows: hidden affine
/// layers with activation, a 2-logit affine, softmax. Returns the `[B]`
/// positive-class probabilities.
pub fn head_forward(
    tape: &mut Tape,
    b: &Binding,
    p: &FusionParams,
    cfg: &FusionConfig,
    ctx: &mut Ctx<'_>,
    fused: Var,
) -> Result<Var> {
    let shape = tape.shape(fused);
    if shape.len() != 2 || shape[1] != cfg.input_dim() {
        return Err(Error::shape("head_forward", shape, &[0, cfg.input_dim()]));
    }
    let mut h = fused;
    for &(w, bias) in &p.hidden {
        h = tape.matmul(h, b[w])?;
        h = tape.add_bias(h, b[bias])?;
        h = tape.activation(h, cfg.activation);
        h = ctx.dropout(tape, h, cfg.dropout)?;
    }
    let logits = tape.matmul(h, b[p.out_w])?;
    let logits = tape.add_bias(logits, b[p.out_b])?;
    let probs = tape.softmax(logits, 1)?;
    tape.col(probs, 1)
}

/// Fuses a single sample and predicts.
pub fn fuse_forward(
    tape: &mut Tape,
    b: &Binding,
    p: &FusionParams,
    cfg: &FusionConfig,
    ctx: &mut Ctx<'_>,
    ptsm: Option<Var>,
    cnm: Option<Var>,
) -> Result<(Var, Prediction)> {
    let fused = fuse(tape, cfg, ptsm, cnm)?;
    let prob = head_forward(tape, b, p, cfg, ctx, fused)?;
    let value = tape.value(prob).data()[0];
    Ok((prob, Prediction::new(value, DEFAULT_THRESHOLD)))
}

/// Weighted cross-entropy of one prediction.
///
/// The published formula places the leading minus on the positive term
/// only, which makes the negative-class term reward confident mistakes
/// without bound. The usual negative log-likelihood is used instead:
/// `-[w y ln p + (1 - w)(1 - y) ln(1 - p)]`, with `p` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn weighted_bce(prob: f64, label: u8, class_weight: f64) -> f64 {
    crate::tensor::weighted_bce(prob, f64::from(label), class_weight)
}
