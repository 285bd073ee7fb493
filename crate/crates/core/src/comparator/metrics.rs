use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean confidence per outcome. Accepts (score above threshold) report the
/// score itself, rejects report `1 − score`. `None` when the outcome never
/// occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBreakdown {
    pub correctly_accept: Option<f64>,
    pub incorrectly_accept: Option<f64>,
    pub correctly_reject: Option<f64>,
    pub incorrectly_reject: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub total: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confidence: ConfidenceBreakdown,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Binary metrics of `scores` against `labels` under the rule
/// `score > threshold → positive`.
pub fn evaluate_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<BinaryMetrics> {
    if scores.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty pair set".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::dim("evaluate_scores", &[scores.len()], &[labels.len()]));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let mut counts = [0usize; 4];
    let mut conf = [0.0f64; 4];
    for (&s, &y) in scores.iter().zip(labels) {
        let accept = s > threshold;
        // 0: TP, 1: FP, 2: TN, 3: FN
        let k = match (accept, y) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        counts[k] += 1;
        conf[k] += if accept { s } else { 1.0 - s };
    }
    let [tp, fp, tn, fneg] = counts;
    let mean = |k: usize| (counts[k] > 0).then(|| conf[k] / counts[k] as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(BinaryMetrics {
        total: scores.len(),
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fneg,
        accuracy: ratio(tp + tn, scores.len()),
        precision,
        recall,
        f1,
        confidence: ConfidenceBreakdown {
            correctly_accept: mean(0),
            incorrectly_accept: mean(1),
            correctly_reject: mean(2),
            incorrectly_reject: mean(3),
        },
    })
}
