use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts for the positive class (sarcastic or humorous).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        Self { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn record(&mut self, pred: bool, label: bool) {
        match (pred, label) {
            (true, true) => self.tp += 1,
            (false, true) => self.fn_ += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.fp += other.fp;
        self.tn += other.tn;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Positive-class precision, recall and F1, plus accuracy. Empty
/// denominators give 0.
pub fn compute_metrics(m: &ConfusionMatrix) -> Metrics {
    let precision = ratio(m.tp, m.tp + m.fp);
    let recall = ratio(m.tp, m.tp + m.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        precision,
        recall,
        f1,
        accuracy: ratio(m.tp + m.tn, m.total()),
    }
}

pub fn confusion(preds: &[bool], labels: &[bool]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        m.record(p, l);
    }
    Ok(m)
}

/// Positive-class F1 of always predicting the majority label.
pub fn majority_baseline_f1(labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count();
    let majority_positive = 2 * pos > labels.len();
    let preds = vec![majority_positive; labels.len()];
    confusion(&preds, labels).map(|m| compute_metrics(&m).f1).unwrap_or(0.0)
}
