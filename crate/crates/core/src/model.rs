//! The fused multimodal classifier and its ablation modes.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnm::{cnm_cls, cnm_forward, CnmConfig, CnmParams};
use crate::error::{Error, Result};
use crate::fusion::{fuse, head_forward, FusionConfig, FusionParams};
use crate::nn::Ctx;
use crate::notes::TokenSequence;
use crate::ptsm::{ptsm_forward, PtsmConfig, PtsmParams};
use crate::tensor::{Activation, Binding, ParamSet, Tape, Tensor, Var};

pub const PTSM_PREFIX: &str = "ptsm.";
pub const CNM_PREFIX: &str = "cnm.";
pub const HEAD_PREFIX: &str = "head.";

/// Which modalities reach the fusion head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationMode {
    MptsOnly,
    NotesOnly,
    Hour1MptsPlusNotes,
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::MptsOnly,
        AblationMode::NotesOnly,
        AblationMode::Hour1MptsPlusNotes,
        AblationMode::Full,
    ];

    pub fn uses_mpts(self) -> bool {
        self != AblationMode::NotesOnly
    }

    pub fn uses_notes(self) -> bool {
        self != AblationMode::MptsOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::MptsOnly => "MPTS_ONLY",
            AblationMode::NotesOnly => "NOTES_ONLY",
            AblationMode::Hour1MptsPlusNotes => "HOUR1_MPTS_PLUS_NOTES",
            AblationMode::Full => "FULL",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?}; expected one of MPTS_ONLY, NOTES_ONLY, HOUR1_MPTS_PLUS_NOTES, FULL"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub class_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub ptsm: PtsmConfig,
    pub cnm: CnmConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            ptsm_dim: self.ptsm.output_dim(),
            cnm_dim: self.cnm.d_model,
            hidden: self.head.hidden.clone(),
            activation: self.head.activation,
            dropout: self.head.dropout,
            class_weight: self.head.class_weight,
        }
    }
}

/// One model input: a standardized `[T, M]` matrix, the encoded notes, and
/// the label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patient_id: String,
    pub matrix: Tensor,
    pub tokens: TokenSequence,
    pub label: u8,
}

pub struct BatchOutput {
    /// `[B]` positive-class probabilities.
    pub probs: Var,
    pub ptsm_attention: Vec<Vec<Vec<Var>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub ptsm: PtsmParams,
    pub cnm: CnmParams,
    pub head: FusionParams,
}

impl MultimodalModel {
    /// Builds and initializes every parameter. Construction order is fixed,
    /// so the same config always yields the same parameter names and shapes.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let ptsm = PtsmParams::init(&mut params, "ptsm", &config.ptsm, &mut rng)?;
        let cnm = CnmParams::init(&mut params, "cnm", &config.cnm, &mut rng)?;
        let head = FusionParams::init(&mut params, "head", &config.fusion(), &mut rng)?;
        Ok(MultimodalModel {
            config,
            params,
            ptsm,
            cnm,
            head,
        })
    }

    /// Freezes the encoder of each modality the mode leaves out.
    pub fn set_mode(&mut self, mode: AblationMode) {
        self.params.set_trainable(PTSM_PREFIX, mode.uses_mpts());
        self.params.set_trainable(CNM_PREFIX, mode.uses_notes());
        self.params.set_trainable(HEAD_PREFIX, true);
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        ctx: &mut Ctx<'_>,
        samples: &[&Sample],
        mode: AblationMode,
    ) -> Result<BatchOutput> {
        let fusion = self.config.fusion();
        let mut rows = Vec::with_capacity(samples.len());
        let mut ptsm_attention = Vec::with_capacity(samples.len());
        for s in samples {
            let (pv, pa) = if mode.uses_mpts() {
                let m = if mode == AblationMode::Hour1MptsPlusNotes {
                    first_row_replicated(&s.matrix)?
                } else {
                    s.matrix.clone()
                };
                let x = tape.constant(m);
                let out = ptsm_forward(tape, b, &self.ptsm, &self.config.ptsm, ctx, x)?;
                (Some(out.vector), out.attention)
            } else {
                (None, Vec::new())
            };
            let cv = if mode.uses_notes() {
                Some(cnm_cls(
                    tape,
                    b,
                    &self.cnm,
                    &self.config.cnm,
                    ctx,
                    &s.tokens,
                )?)
            } else {
                None
            };
            rows.push(fuse(tape, &fusion, pv, cv)?);
            ptsm_attention.push(pa);
        }
        let fused = if rows.len() == 1 {
            rows[0]
        } else {
            tape.concat_rows(&rows)?
        };
        let probs = head_forward(tape, b, &self.head, &fusion, ctx, fused)?;
        Ok(BatchOutput {
            probs,
            ptsm_attention,
        })
    }

    /// Positive-class probabilities with dropout disabled.
    pub fn predict(&self, samples: &[Sample], mode: AblationMode) -> Result<Vec<f64>> {
        const CHUNK: usize = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let b = self.params.bind(&mut tape);
            let mut ctx = Ctx::eval(&mut rng);
            let batch = self.forward(&mut tape, &b, &mut ctx, &refs, mode)?;
            out.extend_from_slice(tape.value(batch.probs).data());
        }
        Ok(out)
    }

    /// CNM attention weights of one sample, per layer, per head, each
    /// `[max_len, max_len]`.
    pub fn notes_attention(&self, sample: &Sample) -> Result<Vec<Vec<Tensor>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut rng);
        let out = cnm_forward(
            &mut tape,
            &b,
            &self.cnm,
            &self.config.cnm,
            &mut ctx,
            &sample.tokens,
        )?;
        Ok(out
            .attention
            .iter()
            .map(|layer| layer.iter().map(|&w| tape.value(w).clone()).collect())
            .collect())
    }
}

fn first_row_replicated(m: &Tensor) -> Result<Tensor> {
    if m.shape().len() != 2 {
        return Err(Error::shape("first_row_replicated", m.shape(), &[0, 0]));
    }
    let row = m.row(0);
    Tensor::new(m.shape().to_vec(), row.repeat(m.rows()))
}
