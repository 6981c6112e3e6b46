//! Classification metrics: top-1 and macro-averaged precision/recall/F1
//! over a confusion matrix.
//!
//! Macro averages run over the classes present in the ground truth. A class
//! with no predicted positives has precision 0, and per-class F1 is 0 when
//! precision + recall is 0.

#![allow(clippy::needless_range_loop)] // index loops drive parallel buffers

use serde::Serialize;

use crate::error::{Error, Result};

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Data(format!(
                "confusion matrix needs {} counts, got {}",
                classes * classes,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn at(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(Error::Data("empty evaluation set".into()));
        }
        let k = confusion.classes;
        let mut row_sums = vec![0u64; k];
        let mut col_sums = vec![0u64; k];
        for t in 0..k {
            for p in 0..k {
                let c = confusion.at(t, p);
                row_sums[t] += c;
                col_sums[p] += c;
            }
        }

        let mut correct = 0u64;
        let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
        let mut present = 0usize;
        for c in 0..k {
            let tp = confusion.at(c, c);
            correct += tp;
            if row_sums[c] == 0 {
                continue; // absent from ground truth
            }
            present += 1;
            let precision = if col_sums[c] == 0 {
                0.0
            } else {
                tp as f64 / col_sums[c] as f64
            };
            let recall = tp as f64 / row_sums[c] as f64;
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            p_sum += precision;
            r_sum += recall;
            f_sum += f1;
        }
        if present == 0 {
            return Err(Error::Data("no class present in ground truth".into()));
        }
        Ok(MetricsReport {
            top1: correct as f64 / total as f64,
            macro_precision: p_sum / present as f64,
            macro_recall: r_sum / present as f64,
            macro_f1: f_sum / present as f64,
            confusion,
        })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Data("label/prediction length mismatch".into()));
        }
        let mut confusion = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted.iter()) {
            if t >= classes || p >= classes {
                return Err(Error::Data(format!(
                    "label {t}/{p} out of range for {classes} classes"
                )));
            }
            confusion.record(t, p);
        }
        Self::from_confusion(confusion)
    }
}

/// Accuracy of a prediction set after mapping labels through `f` (species
/// accuracy when `f` maps fine classes to their coarse group).
pub fn mapped_accuracy(truth: &[usize], predicted: &[usize], f: impl Fn(usize) -> usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let correct = truth
        .iter()
        .zip(predicted.iter())
        .filter(|&(&t, &p)| f(t) == f(p))
        .count();
    correct as f64 / truth.len() as f64
}
