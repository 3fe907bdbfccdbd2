//! Threshold calibration against human interpretability labels: ROC AUC by
//! rank statistics, confusion metrics at a threshold, and selection of the
//! operating threshold over ROC-derived candidates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Published operating point used when no calibration data is supplied.
pub const DEFAULT_EPSILON: f64 = 0.7434;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CalibrationError {
    #[error("labels contain a single class")]
    DegenerateLabels,
}

/// One labeled certainty score: 1 when a human saw a clear pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub sequence_id: String,
    pub certainty: f64,
    pub label: u8,
}

impl LabeledScore {
    pub fn new(sequence_id: impl Into<String>, certainty: f64, label: u8) -> Self {
        assert!(label <= 1, "label must be 0 or 1");
        Self {
            sequence_id: sequence_id.into(),
            certainty,
            label,
        }
    }
}

/// Area under the ROC curve via tie-aware rank statistics. Equivalent to
/// pair counting with half credit for ties.
pub fn roc_auc(scores: &[LabeledScore]) -> Result<f64, CalibrationError> {
    let positives = scores.iter().filter(|s| s.label == 1).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CalibrationError::DegenerateLabels);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .certainty
            .partial_cmp(&scores[b].certainty)
            .expect("certainty scores must be comparable")
    });

    // Average ranks within tied groups (1-based).
    let mut positive_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len()
            && scores[order[j + 1]].certainty == scores[order[i]].certainty
        {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if scores[idx].label == 1 {
                positive_rank_sum += mean_rank;
            }
        }
        i = j + 1;
    }

    let p = positives as f64;
    let n = negatives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Precision, recall, and F1 when predicting positive at `certainty >=
/// threshold`. Precision is 1 by convention when nothing is predicted
/// positive.
pub fn confusion_at(scores: &[LabeledScore], threshold: f64) -> (f64, f64, f64) {
    assert!(!scores.is_empty());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for s in scores {
        let predicted = s.certainty >= threshold;
        match (predicted, s.label) {
            (true, 1) => tp += 1,
            (true, 0) => fp += 1,
            (false, 1) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub epsilon: f64,
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold_candidates_evaluated: usize,
}

/// Selects the operating threshold: candidates are midpoints between
/// consecutive distinct sorted scores plus one sentinel below the minimum
/// and one above the maximum; the F1-maximizing candidate wins, with ties
/// broken by higher precision and then by the larger threshold.
pub fn calibrate_threshold(scores: &[LabeledScore]) -> Result<CalibrationResult, CalibrationError> {
    let auc = roc_auc(scores)?;

    let mut distinct: Vec<f64> = scores.iter().map(|s| s.certainty).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("comparable scores"));
    distinct.dedup();

    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(distinct[0] - 1.0);
    for pair in distinct.windows(2) {
        candidates.push((pair[0] + pair[1]) / 2.0);
    }
    candidates.push(distinct[distinct.len() - 1] + 1.0);

    let mut best: Option<(f64, f64, f64, f64)> = None; // (f1, precision, threshold, recall)
    for &threshold in &candidates {
        let (precision, recall, f1) = confusion_at(scores, threshold);
        let key = (f1, precision, threshold);
        let is_better = match best {
            None => true,
            Some((bf, bp, bt, _)) => key > (bf, bp, bt),
        };
        if is_better {
            best = Some((f1, precision, threshold, recall));
        }
    }
    let (f1, precision, epsilon, recall) = best.expect("at least one candidate");
    Ok(CalibrationResult {
        epsilon,
        auc,
        f1,
        precision,
        recall,
        threshold_candidates_evaluated: candidates.len(),
    })
}
