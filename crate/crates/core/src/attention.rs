//! Attention-matrix export and CLS attention statistics by token category.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{MultimodalModel, Sample};
use crate::notes::{TokenSequence, Vocabulary};
use crate::synth::PhraseBank;
use crate::tensor::Tensor;

/// `"{position}:{token}"` for every position, so labels stay unique.
pub fn token_labels(seq: &TokenSequence, vocab: &Vocabulary) -> Vec<String> {
    seq.decode(vocab)
        .into_iter()
        .enumerate()
        .map(|(i, t)| format!("{i}:{t}"))
        .collect()
}

/// Writes a query × key weight matrix with key labels as the header and
/// the query label leading each row.
pub fn write_attention_csv(path: &Path, weights: &Tensor, labels: &[String]) -> Result<()> {
    if weights.shape() != [labels.len(), labels.len()] {
        return Err(Error::shape(
            "write_attention_csv",
            weights.shape(),
            &[labels.len(), labels.len()],
        ));
    }
    io::ensure_parent(path)?;
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut header = vec!["query".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for (r, label) in labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(weights.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean per-token CLS attention for each token category, averaged over
/// patients that contain the category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryMass {
    pub positive: f64,
    pub negative: f64,
    pub filler: f64,
    pub patients: usize,
}

/// CLS-row attention of the final notes-encoder layer, averaged over heads,
/// split by phrase-bank category.
pub fn cls_attention_by_category(
    model: &MultimodalModel,
    samples: &[Sample],
    vocab: &Vocabulary,
    bank: &PhraseBank,
) -> Result<CategoryMass> {
    let sets: [HashSet<String>; 3] = [
        bank.positive_tokens().into_iter().collect(),
        bank.negative_tokens().into_iter().collect(),
        bank.filler_tokens().into_iter().collect(),
    ];
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for s in samples {
        let layers = model.notes_attention(s)?;
        let last = layers
            .last()
            .ok_or_else(|| Error::Config("notes encoder has no layers".into()))?;
        let heads = last.len() as f64;
        let tokens = s.tokens.decode(vocab);
        let mut per = [(0.0, 0usize); 3];
        for (j, tok) in tokens.iter().enumerate().take(s.tokens.true_length) {
            let w: f64 = last.iter().map(|h| h.at(0, j)).sum::<f64>() / heads;
            for (c, set) in sets.iter().enumerate() {
                if set.contains(tok) {
                    per[c].0 += w;
                    per[c].1 += 1;
                }
            }
        }
        for c in 0..3 {
            if per[c].1 > 0 {
                sums[c] += per[c].0 / per[c].1 as f64;
                counts[c] += 1;
            }
        }
    }
    let mean = |c: usize| {
        if counts[c] == 0 {
            0.0
        } else {
            sums[c] / counts[c] as f64
        }
    };
    Ok(CategoryMass {
        positive: mean(0),
        negative: mean(1),
        filler: mean(2),
        patients: samples.len(),
    })
}
