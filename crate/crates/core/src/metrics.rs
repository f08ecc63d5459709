//! Threshold-free and thresholded binary-classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann-Whitney AUROC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half. Computed from mid-ranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", &[scores.len()], &[labels.len()]));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Data(format!("auroc: score {s} is not a number")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(
            "auroc needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps mid-ranks integral.
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank2_pos += mid2 * pos_in_group;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    // U * 2 = rank2_pos - np (np + 1)
    let u2 = rank2_pos - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// `(precision, recall, f1)` at `threshold`.
pub fn classification_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> (f64, f64, f64) {
    let c = Confusion::from_scores(scores, labels, threshold);
    (c.precision(), c.recall(), c.f1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Metrics {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let (precision, recall, f1) = classification_metrics(scores, labels, threshold);
        Ok(Metrics {
            auroc: auroc(scores, labels)?,
            f1,
            precision,
            recall,
        })
    }

    fn fields(&self) -> [f64; 4] {
        [self.auroc, self.f1, self.precision, self.recall]
    }

    fn from_fields(v: [f64; 4]) -> Self {
        Metrics {
            auroc: v[0],
            f1: v[1],
            precision: v[2],
            recall: v[3],
        }
    }
}

/// Per-seed metrics with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_seed: Vec<(u64, Metrics)>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl MetricsReport {
    pub fn aggregate(per_seed: Vec<(u64, Metrics)>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Data("cannot aggregate zero runs".into()));
        }
        let n = per_seed.len() as f64;
        let mut mean = [0.0; 4];
        for (_, m) in &per_seed {
            for (acc, v) in mean.iter_mut().zip(m.fields()) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = [0.0; 4];
        for (_, m) in &per_seed {
            for ((acc, v), mu) in var.iter_mut().zip(m.fields()).zip(mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var.map(|v| (v / n).sqrt());
        Ok(MetricsReport {
            per_seed,
            mean: Metrics::from_fields(mean),
            std: Metrics::from_fields(std),
        })
    }
}
