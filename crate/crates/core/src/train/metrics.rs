//! Confusion-matrix metrics. The positive class is Flooded (label 1).

use serde::Serialize;

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[Label], predicted: &[usize]) -> Self {
        let mut cm = Self::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p as Label);
        }
        cm
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth == 1, predicted == 1) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// The same matrix with Non-Flooded taken as the positive class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

/// Precision, recall and F1 for one class. A flag marks a value whose
/// denominator was zero (the value is then reported as 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub flooded: ClassMetrics,
    pub non_flooded: ClassMetrics,
}

impl Metrics {
    pub fn macro_f1(&self) -> f64 {
        (self.flooded.f1 + self.non_flooded.f1) / 2.0
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// `2PR / (P + R)`, or 0 when `P + R == 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn positive_class(cm: &ConfusionMatrix) -> ClassMetrics {
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    ClassMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        precision_undefined,
        recall_undefined,
        f1_undefined: precision + recall == 0.0,
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    if cm.total() == 0 {
        return Err(Error::Contract("metrics of an empty confusion matrix".into()));
    }
    Ok(Metrics {
        accuracy: (cm.tp + cm.tn) as f64 / cm.total() as f64,
        flooded: positive_class(cm),
        non_flooded: positive_class(&cm.swapped()),
    })
}
