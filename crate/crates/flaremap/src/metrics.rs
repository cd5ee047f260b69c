//! Binary classification metrics: confusion counts, F1, exact AUROC, and
//! the per-CUDA-core inference time normalization.
//!
//! Everything here is a pure function over immutable slices and safe to
//! call concurrently.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metric input is empty")]
    Empty,
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("labels must be exactly 0.0 or 1.0, got {0}")]
    BadLabel(f64),
    #[error("scores must be finite, got {0}")]
    BadScore(f64),
    #[error("threshold must be finite, got {0}")]
    BadThreshold(f64),
    #[error("AUROC is undefined without at least one {0} example")]
    SingleClass(&'static str),
    #[error("CUDA core count must be positive")]
    NoCores,
    #[error("per-image time must be finite and non-negative, got {0}")]
    BadTime(f64),
}

/// Counts from thresholding scores against 0/1 labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub r#fn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.r#fn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

fn validate_pairs(scores: &[f64], labels: &[f64]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(MetricsError::BadScore(s));
        }
    }
    for &y in labels {
        if y != 0.0 && y != 1.0 {
            return Err(MetricsError::BadLabel(y));
        }
    }
    Ok(())
}

/// Threshold scores into predictions and tally them against the labels.
/// A score exactly equal to the threshold predicts positive.
pub fn confusion(scores: &[f64], labels: &[f64], threshold: f64) -> Result<ConfusionMatrix, MetricsError> {
    validate_pairs(scores, labels)?;
    if !threshold.is_finite() {
        return Err(MetricsError::BadThreshold(threshold));
    }
    let mut cm = ConfusionMatrix {
        tp: 0,
        fp: 0,
        tn: 0,
        r#fn: 0,
    };
    for (&s, &y) in scores.iter().zip(labels) {
        let predicted_positive = s >= threshold;
        match (predicted_positive, y == 1.0) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.r#fn += 1,
        }
    }
    Ok(cm)
}

/// Harmonic mean of precision and recall.
///
/// Degenerate cases: with no true positives but some false positives or
/// false negatives the score is 0.0; with tp = fp = fn = 0 there are no
/// positives anywhere in sight and the score is undefined (None).
pub fn f1(cm: &ConfusionMatrix) -> Option<f64> {
    if cm.tp == 0 {
        return if cm.fp == 0 && cm.r#fn == 0 {
            None
        } else {
            Some(0.0)
        };
    }
    let precision = cm.tp as f64 / (cm.tp + cm.fp) as f64;
    let recall = cm.tp as f64 / (cm.tp + cm.r#fn) as f64;
    Some(2.0 * precision * recall / (precision + recall))
}

/// Area under the ROC curve as the exact Mann-Whitney statistic:
/// P(score_pos > score_neg) + 0.5 * P(score_pos = score_neg), computed via
/// midranks rather than curve integration.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    validate_pairs(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 {
        return Err(MetricsError::SingleClass("positive"));
    }
    if negatives == 0 {
        return Err(MetricsError::SingleClass("negative"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores are finite"));

    // Midranks: every member of a tied run takes the mean of the ranks the
    // run occupies. Ranks are 1-based.
    let mut rank_sum_positive = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start+1 ..= end average to (start + end + 1) / 2.
        let midrank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            if labels[idx] == 1.0 {
                rank_sum_positive += midrank;
            }
        }
        start = end;
    }

    let p = positives as f64;
    let n = negatives as f64;
    let u = rank_sum_positive - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Inference time normalized by the parallelism of the measuring GPU:
/// milliseconds per image divided by the CUDA core count.
pub fn relative_inference_time(per_image_ms: f64, cuda_cores: u32) -> Result<f64, MetricsError> {
    if cuda_cores == 0 {
        return Err(MetricsError::NoCores);
    }
    if !per_image_ms.is_finite() || per_image_ms < 0.0 {
        return Err(MetricsError::BadTime(per_image_ms));
    }
    Ok(per_image_ms / cuda_cores as f64)
}

/// The full metric battery for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub auroc: f64,
    pub f1: Option<f64>,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    /// Assemble the report from raw scores. `loss` is supplied by the
    /// caller (it depends on the loss function, not the threshold).
    pub fn from_scores(
        loss: f64,
        scores: &[f64],
        labels: &[f64],
        threshold: f64,
    ) -> Result<EvalReport, MetricsError> {
        let cm = confusion(scores, labels, threshold)?;
        Ok(EvalReport {
            loss,
            accuracy: cm.accuracy(),
            auroc: auroc(scores, labels)?,
            f1: f1(&cm),
            threshold,
            confusion: cm,
        })
    }

    /// Aligned table with the column order Loss, Accuracy, AUROC, F1.
    pub fn to_text_table(&self) -> String {
        let f1_text = match self.f1 {
            Some(v) => format!("{v:.4}"),
            None => "n/a".to_string(),
        };
        let headers = ["Loss", "Accuracy", "AUROC", "F1"];
        let values = [
            format!("{:.4}", self.loss),
            format!("{:.4}", self.accuracy),
            format!("{:.4}", self.auroc),
            f1_text,
        ];
        let widths: Vec<usize> = headers
            .iter()
            .zip(&values)
            .map(|(h, v)| h.len().max(v.len()))
            .collect();
        let mut out = String::new();
        for (i, h) in headers.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{h:<width$}", width = widths[i]));
        }
        out.push('\n');
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{v:<width$}", width = widths[i]));
        }
        out.push('\n');
        out
    }
}
