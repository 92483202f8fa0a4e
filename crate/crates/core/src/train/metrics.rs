use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc1: f64,
    pub val_acc1: f64,
    pub val_acc5: f64,
    pub wall_ms: u64,
}

/// The machine-independent part of [`EpochMetrics`], as written to `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc1: f64,
    pub val_acc1: f64,
    pub val_acc5: f64,
}

impl From<&EpochMetrics> for MetricsRecord {
    fn from(m: &EpochMetrics) -> Self {
        Self { epoch: m.epoch, train_loss: m.train_loss, train_acc1: m.train_acc1, val_acc1: m.val_acc1, val_acc5: m.val_acc5 }
    }
}

/// Number of rows of `[B,K]` logits whose label ranks among the top `k`
/// (`k` capped at `K`). A class outranks the label if its logit is greater,
/// or equal with a lower index.
pub fn topk_correct<T: Element>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<usize> {
    let &[b, classes] = logits.shape() else {
        return Err(shape_err("evaluate_topk", format!("expected [B,K] logits, got {:?}", logits.shape())));
    };
    if b != labels.len() {
        return Err(shape_err("evaluate_topk", format!("{b} rows for {} labels", labels.len())));
    }
    let k = k.clamp(1, classes);
    let mut hits = 0;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        if label >= classes {
            continue;
        }
        let target = row[label];
        let rank = row.iter().enumerate().filter(|&(j, &v)| v > target || (v == target && j < label)).count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits)
}

pub fn evaluate_topk<T: Element>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    let hits = topk_correct(logits, labels, k)?;
    Ok(if labels.is_empty() { 0.0 } else { hits as f64 / labels.len() as f64 })
}
