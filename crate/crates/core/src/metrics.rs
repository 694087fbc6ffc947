//! Confusion matrix and macro-averaged classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// `counts[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let l = counts.len();
        if l == 0 || counts.iter().any(|r| r.len() != l) {
            return Err(contract("confusion matrix must be square and nonempty"));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.classes())
            .filter(|&t| t != class)
            .map(|t| self.counts[t][class])
            .sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.classes())
            .filter(|&p| p != class)
            .map(|p| self.counts[class][p])
            .sum()
    }
}

pub fn confusion(predictions: &[usize], truths: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(contract("predictions and truths differ in length"));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(contract(format!("class index out of range for {classes} classes")));
        }
        counts[t][p] += 1;
    }
    ConfusionMatrix::from_counts(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest precision, recall and F1 per class, macro-averaged. A zero
/// denominator yields 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsRecord> {
    let total = cm.total();
    if total == 0 {
        return Err(contract("cannot compute metrics of an empty confusion matrix"));
    }
    let l = cm.classes();
    let trace: u64 = (0..l).map(|c| cm.true_positives(c)).sum();
    let mut precision = Vec::with_capacity(l);
    let mut recall = Vec::with_capacity(l);
    let mut f1 = Vec::with_capacity(l);
    for c in 0..l {
        let tp = cm.true_positives(c);
        let fp = cm.false_positives(c);
        let fn_ = cm.false_negatives(c);
        precision.push(ratio(tp, tp + fp));
        recall.push(ratio(tp, tp + fn_));
        f1.push(ratio(2 * tp, 2 * tp + fp + fn_));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / l as f64;
    Ok(MetricsRecord {
        accuracy: trace as f64 / total as f64,
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        per_class_precision: precision,
        per_class_recall: recall,
        per_class_f1: f1,
    })
}

/// F1 as the harmonic mean of precision and recall; 0 when both are 0.
pub fn harmonic_f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}
