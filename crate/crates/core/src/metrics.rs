//! Classification metrics from a confusion matrix.
//!
//! Precision, recall and F1 are macro averages over the classes present in
//! the ground truth. A class that is never predicted has precision zero.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Square count matrix, rows indexed by true class, columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Tallies paired label vectors.
    pub fn from_labels(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Dimension {
                expected: truth.len(),
                actual: predicted.len(),
            });
        }
        if truth.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if classes == 0 {
            return Err(Error::ZeroDimension);
        }
        let mut counts = vec![0u64; classes * classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidParameter {
                    name: "label",
                    reason: "class id out of range",
                });
            }
            counts[t * classes + p] += 1;
        }
        Ok(Self { classes, counts })
    }

    /// Wraps explicit row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Dimension {
                expected: classes * classes,
                actual: counts.len(),
            });
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { classes, counts })
    }

    /// Number of classes.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Count of samples with true class `t` predicted as `p`.
    pub fn get(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.classes + p]
    }

    /// Total number of samples.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, t: usize) -> u64 {
        (0..self.classes).map(|p| self.get(t, p)).sum()
    }

    fn col_sum(&self, p: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, p)).sum()
    }

    /// Accuracy, balanced accuracy and macro precision/recall/F1, in percent.
    pub fn metrics(&self) -> Metrics {
        let total = self.total() as f64;
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        let mut absent = Vec::new();
        let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
        let mut present = 0usize;
        for c in 0..self.classes {
            let support = self.row_sum(c);
            if support == 0 {
                absent.push(c);
                continue;
            }
            present += 1;
            let tp = self.get(c, c) as f64;
            let predicted = self.col_sum(c);
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = tp / support as f64;
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            p_sum += precision;
            r_sum += recall;
            f_sum += f1;
        }
        let k = present as f64;
        Metrics {
            accuracy: 100.0 * correct as f64 / total,
            // Balanced accuracy is the macro recall.
            balanced_accuracy: 100.0 * r_sum / k,
            precision: 100.0 * p_sum / k,
            recall: 100.0 * r_sum / k,
            f1: 100.0 * f_sum / k,
            absent_classes: absent,
        }
    }
}

/// Percent-valued classification metrics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    /// Overall accuracy.
    pub accuracy: f64,
    /// Mean per-class recall.
    pub balanced_accuracy: f64,
    /// Macro precision.
    pub precision: f64,
    /// Macro recall.
    pub recall: f64,
    /// Macro F1.
    pub f1: f64,
    /// Classes with no ground-truth samples, excluded from macro terms.
    pub absent_classes: Vec<usize>,
}

/// Convenience wrapper: confusion matrix then metrics.
pub fn evaluate_labels(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Metrics> {
    Ok(ConfusionMatrix::from_labels(truth, predicted, classes)?.metrics())
}

/// Arithmetic mean of each metric over runs; absent classes are unioned.
pub fn mean_metrics(runs: &[Metrics]) -> Result<Metrics> {
    if runs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = runs.len() as f64;
    let avg = |f: fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let mut absent: Vec<usize> = runs.iter().flat_map(|m| m.absent_classes.iter().copied()).collect();
    absent.sort_unstable();
    absent.dedup();
    Ok(Metrics {
        accuracy: avg(|m| m.accuracy),
        balanced_accuracy: avg(|m| m.balanced_accuracy),
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        f1: avg(|m| m.f1),
        absent_classes: absent,
    })
}
