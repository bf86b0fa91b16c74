//! Accuracy and macro-F1.

use serde::{Deserialize, Serialize};

/// Macro-F1 over `num_classes` classes. A class absent from both the truth
/// and the predictions is skipped rather than counted as 0 or 1.
pub fn macro_f1(truth: &[usize], pred: &[usize], num_classes: usize) -> f64 {
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..num_classes {
        let support = tp[c] + fp[c] + fn_[c];
        if support == 0 {
            continue;
        }
        sum += 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub diag_acc: f64,
    pub diag_f1: f64,
    /// Fraction of correct (sample, concept) value predictions.
    pub concept_acc: f64,
    /// Macro-F1 over every (concept, value) class.
    pub concept_f1: f64,
}

impl Metrics {
    /// `concept_truth[i][k]` / `concept_pred[i][k]` are value indices of
    /// concept `k` for sample `i`.
    pub fn compute(
        diag_truth: &[usize],
        diag_pred: &[usize],
        num_classes: usize,
        concept_truth: &[Vec<usize>],
        concept_pred: &[Vec<usize>],
        values_per_concept: &[usize],
    ) -> Self {
        let offsets: Vec<usize> = values_per_concept
            .iter()
            .scan(0, |acc, &m| {
                let o = *acc;
                *acc += m;
                Some(o)
            })
            .collect();
        let total_values: usize = values_per_concept.iter().sum();
        // Each (concept, value) pair is one class; a wrong value within
        // concept k is a false positive for the predicted pair and a false
        // negative for the true one, like a per-concept confusion matrix.
        let mut truth_ids = Vec::new();
        let mut pred_ids = Vec::new();
        for (t, p) in concept_truth.iter().zip(concept_pred) {
            for k in 0..values_per_concept.len() {
                truth_ids.push(offsets[k] + t[k]);
                pred_ids.push(offsets[k] + p[k]);
            }
        }
        Metrics {
            diag_acc: accuracy(diag_truth, diag_pred),
            diag_f1: macro_f1(diag_truth, diag_pred, num_classes),
            concept_acc: accuracy(&truth_ids, &pred_ids),
            concept_f1: macro_f1(&truth_ids, &pred_ids, total_values),
        }
    }
}
