//! Clinical-notes encoder: BERT-style embedding sum, a PAD-masked encoder
//! stack, and CLS pooling.

use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{encoder_layer, Ctx, EncoderConfig, EncoderLayerParams};
use crate::notes::TokenSequence;
use crate::tensor::{checkpoint, init, Activation, Binding, ParamId, ParamSet, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// `4 * d_model` when absent.
    #[serde(default)]
    pub d_ff: Option<usize>,
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "gelu")]
    pub activation: Activation,
}

fn gelu() -> Activation {
    Activation::Gelu
}

impl CnmConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("cnm: {msg}")));
        if self.vocab_size < crate::notes::RESERVED.len() {
            return fail(format!(
                "vocab_size {} is smaller than the reserved ids",
                self.vocab_size
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.max_len < 2 {
            return fail(format!("max_len {} must be at least 2", self.max_len));
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
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
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff(),
            dropout: self.dropout,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnmParams {
    pub token: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
    pub layers: Vec<EncoderLayerParams>,
}

impl CnmParams {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &CnmConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let token = params.add(
            format!("{prefix}.token"),
            init::embedding(cfg.vocab_size, d, rng),
        )?;
        let segment = params.add(format!("{prefix}.segment"), init::embedding(2, d, rng))?;
        let position = params.add(
            format!("{prefix}.position"),
            init::embedding(cfg.max_len, d, rng),
        )?;
        let enc = cfg.encoder();
        let layers = (0..cfg.layers)
            .map(|n| EncoderLayerParams::init(params, &format!("{prefix}.layer{n}"), &enc, rng))
            .collect::<Result<_>>()?;
        Ok(CnmParams {
            token,
            segment,
            position,
            layers,
        })
    }
}

/// Token + segment + position embeddings, followed by dropout.
pub fn embed_tokens(
    tape: &mut Tape,
    b: &Binding,
    p: &CnmParams,
    cfg: &CnmConfig,
    ctx: &mut Ctx<'_>,
    seq: &TokenSequence,
) -> Result<Var> {
    if seq.segment_ids.len() != seq.max_len() || seq.position_ids.len() != seq.max_len() {
        return Err(Error::Data(format!(
            "token sequence has {} tokens, {} segments and {} positions",
            seq.max_len(),
            seq.segment_ids.len(),
            seq.position_ids.len()
        )));
    }
    let tok = tape.embedding(b[p.token], &seq.token_ids)?;
    let seg = tape.embedding(b[p.segment], &seq.segment_ids)?;
    let pos = tape.embedding(b[p.position], &seq.position_ids)?;
    let sum = tape.add(tok, seg)?;
    let sum = tape.add(sum, pos)?;
    ctx.dropout(tape, sum, cfg.dropout)
}

pub struct CnmOutput {
    /// Final-layer CLS row, `[1, d_model]`.
    pub cls: Var,
    pub attention: Vec<Vec<Var>>,
}

pub fn cnm_forward(
    tape: &mut Tape,
    b: &Binding,
    p: &CnmParams,
    cfg: &CnmConfig,
    ctx: &mut Ctx<'_>,
    seq: &TokenSequence,
) -> Result<CnmOutput> {
    if seq.max_len() != cfg.max_len {
        return Err(Error::shape(
            "cnm_forward",
            &[seq.max_len()],
            &[cfg.max_len],
        ));
    }
    let keep = seq.attention_mask();
    let mut h = embed_tokens(tape, b, p, cfg, ctx, seq)?;
    let enc = cfg.encoder();
    let mut attention = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (y, w) = encoder_layer(tape, b, layer, &enc, ctx, h, Some(&keep))?;
        h = y;
        attention.push(w);
    }
    let cls = tape.row(h, 0)?;
    Ok(CnmOutput { cls, attention })
}

/// CLS output of [`cnm_forward`] computed over the unpadded prefix only.
///
/// PAD keys get zero attention weight and every other sublayer is
/// row-wise, so PAD query rows never influence the real rows; dropping them
/// gives the same CLS vector at a fraction of the cost.
pub fn cnm_cls(
    tape: &mut Tape,
    b: &Binding,
    p: &CnmParams,
    cfg: &CnmConfig,
    ctx: &mut Ctx<'_>,
    seq: &TokenSequence,
) -> Result<Var> {
    if seq.max_len() != cfg.max_len {
        return Err(Error::shape("cnm_cls", &[seq.max_len()], &[cfg.max_len]));
    }
    let n = seq.true_length.clamp(1, seq.max_len());
    let trimmed = TokenSequence {
        token_ids: seq.token_ids[..n].to_vec(),
        segment_ids: seq.segment_ids[..n].to_vec(),
        position_ids: seq.position_ids[..n].to_vec(),
        true_length: n,
    };
    let mut h = embed_tokens(tape, b, p, cfg, ctx, &trimmed)?;
    let enc = cfg.encoder();
    for layer in &p.layers {
        h = encoder_layer(tape, b, layer, &enc, ctx, h, None)?.0;
    }
    tape.row(h, 0)
}

/// Replaces every parameter under `prefix` with the same-named array of a
/// checkpoint file. Arrays outside `prefix` in the file are ignored; any
/// missing or differently shaped array aborts before anything is written.
pub fn load_pretrained(path: &Path, params: &mut ParamSet, prefix: &str) -> Result<()> {
    let (loaded, _) = checkpoint::load(path)?;
    let targets: Vec<ParamId> = params
        .ids()
        .filter(|&id| params.name(id).starts_with(prefix))
        .collect();
    for &id in &targets {
        let name = params.name(id);
        let src = loaded.by_name(name).ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing array {name}", path.display()))
        })?;
        if src.shape() != params.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{}: array {name} has shape {:?}, expected {:?}",
                path.display(),
                src.shape(),
                params.get(id).shape()
            )));
        }
    }
    for id in targets {
        let src = loaded
            .by_name(params.name(id))
            .expect("checked above")
            .data()
            .to_vec();
        params.get_mut(id).data_mut().copy_from_slice(&src);
    }
    Ok(())
}
