use serde::{Deserialize, Serialize};

use crate::datamodel::{ConvergenceCurve, ConvergencePoint};
use crate::error::{Error, Result};
use crate::training::EpochRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and unweighted mean of per-class F1. A class with no true and
/// no predicted samples scores 0.
pub fn metrics(predictions: &[usize], truth: &[usize], num_classes: usize) -> Result<Metrics> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch(predictions.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(Error::Empty);
    }
    if let Some(&c) = predictions.iter().chain(truth).find(|&&c| c >= num_classes) {
        return Err(Error::InvalidArgument(format!("class {c} outside 0..{num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let f1_sum: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(Metrics {
        accuracy: correct as f64 / truth.len() as f64,
        macro_f1: f1_sum / num_classes as f64,
    })
}

/// Training and validation accuracy of the first `first_n_epochs` epochs.
pub fn record_convergence(cell: &str, history: &[EpochRecord], first_n_epochs: usize) -> ConvergenceCurve {
    ConvergenceCurve {
        cell: cell.to_string(),
        points: history
            .iter()
            .filter(|r| r.epoch < first_n_epochs)
            .map(|r| ConvergencePoint {
                epoch: r.epoch,
                train_accuracy: r.train_acc.unwrap_or(f64::NAN),
                eval_accuracy: r.val_acc.unwrap_or(f64::NAN),
            })
            .collect(),
    }
}

/// First epoch whose training accuracy reaches `fraction` of the last
/// recorded training accuracy.
pub fn epochs_to_fraction(curve: &ConvergenceCurve, fraction: f64) -> Option<usize> {
    let last = curve.points.last()?.train_accuracy;
    curve
        .points
        .iter()
        .find(|p| p.train_accuracy >= fraction * last)
        .map(|p| p.epoch)
}
