//! Confusion matrices and precision / recall / F1 reports.
//!
//! A zero denominator yields 0 for precision, recall and F1 alike, and such
//! classes still count toward the macro average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    p: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(p: usize) -> Self {
        Self {
            p,
            counts: vec![0; p * p],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.p
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.p + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    /// Predicted `c`, truly something else.
    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.p)
            .filter(|&t| t != c)
            .map(|t| self.get(t, c))
            .sum()
    }

    /// Truly `c`, predicted something else.
    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.p)
            .filter(|&q| q != c)
            .map(|q| self.get(c, q))
            .sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.p)
    }
}

pub fn confusion(labels: &[usize], predictions: &[usize], p: usize) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(p);
    for (&t, &q) in labels.iter().zip(predictions) {
        if t >= p || q >= p {
            return Err(Error::InvalidArgument(format!(
                "class id out of range for {p} classes: label {t}, prediction {q}"
            )));
        }
        cm.counts[t * p + q] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClassScores<T> {
    pub precision: T,
    pub recall: T,
    pub f1: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MetricsReport<T> {
    pub per_class: Vec<ClassScores<T>>,
    pub macro_f1: T,
    pub accuracy: T,
    /// Headline scores for the positive class of a binary task.
    pub positive: Option<ClassScores<T>>,
    pub positive_class: Option<usize>,
}

fn ratio<T: Scalar>(num: u64, den: u64) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::lit(num as f64) / T::lit(den as f64)
    }
}

fn harmonic<T: Scalar>(a: T, b: T) -> T {
    if a + b == T::zero() {
        T::zero()
    } else {
        T::lit(2.0) * a * b / (a + b)
    }
}

/// Per-class and macro scores. The positive class defaults to 1 for binary
/// tasks; multiclass reports carry one only when asked.
pub fn report<T: Scalar>(cm: &ConfusionMatrix, positive_class: Option<usize>) -> MetricsReport<T> {
    let per_class: Vec<ClassScores<T>> = (0..cm.p)
        .map(|c| {
            let tp = cm.true_positives(c);
            let precision = ratio(tp, tp + cm.false_positives(c));
            let recall = ratio(tp, tp + cm.false_negatives(c));
            ClassScores {
                precision,
                recall,
                f1: harmonic(precision, recall),
            }
        })
        .collect();
    let macro_f1 = if per_class.is_empty() {
        T::zero()
    } else {
        per_class.iter().map(|s| s.f1).sum::<T>() / T::from_count(per_class.len())
    };
    let correct: u64 = (0..cm.p).map(|c| cm.get(c, c)).sum();
    let positive_class = positive_class
        .or((cm.p == 2).then_some(1))
        .filter(|&c| c < cm.p);
    MetricsReport {
        positive: positive_class.map(|c| per_class[c]),
        per_class,
        macro_f1,
        accuracy: ratio(correct, cm.total()),
        positive_class,
    }
}
