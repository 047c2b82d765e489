//! Metrics that need ground-truth target labels.
//!
//! Target labels are only reachable through an [`Evaluator`], which hands
//! out aggregate numbers and never the labels themselves. Training code
//! receives at most an `Option<&Evaluator>` for logging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsc::PseudoLabel;
use crate::synth::DomainDataset;

/// Recall of every class; `None` for classes absent from `truth`.
pub fn per_class_accuracies(predictions: &[usize], truth: &[usize], num_classes: usize) -> Result<Vec<Option<f64>>> {
    if truth.is_empty() {
        return Err(Error::EmptyDataset("no labels to score against".into()));
    }
    if predictions.len() != truth.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let mut correct = vec![0usize; num_classes];
    let mut count = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(truth) {
        if y >= num_classes || p >= num_classes {
            return Err(Error::Validation(format!(
                "label out of range for {num_classes} classes"
            )));
        }
        count[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    Ok(correct
        .iter()
        .zip(&count)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect())
}

/// Unweighted mean of per-class recalls over classes present in `truth`.
pub fn per_class_mean_accuracy(predictions: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    let recalls: Vec<f64> = per_class_accuracies(predictions, truth, num_classes)?
        .into_iter()
        .flatten()
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Pseudo-label quality against hidden labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelAudit {
    pub raw_accuracy: f64,
    pub calibrated_accuracy: f64,
    pub calibrated_proportion: f64,
    /// Accuracy of the raw labels on samples whose label calibration changed.
    pub subset_raw_accuracy: Option<f64>,
    /// Accuracy of the calibrated labels on the same samples.
    pub subset_calibrated_accuracy: Option<f64>,
}

pub fn pseudo_label_audit(pseudo: &[PseudoLabel], truth: &[usize]) -> Result<PseudoLabelAudit> {
    if pseudo.is_empty() || pseudo.len() != truth.len() {
        return Err(Error::Validation(format!(
            "{} pseudo-labels for {} true labels",
            pseudo.len(),
            truth.len()
        )));
    }
    let n = pseudo.len() as f64;
    let mut raw = 0usize;
    let mut calibrated = 0usize;
    let mut flipped = 0usize;
    let mut flipped_raw = 0usize;
    let mut flipped_calibrated = 0usize;
    for (p, &y) in pseudo.iter().zip(truth) {
        raw += usize::from(p.raw_label == y);
        calibrated += usize::from(p.calibrated_label == y);
        if p.is_calibrated() {
            flipped += 1;
            flipped_raw += usize::from(p.raw_label == y);
            flipped_calibrated += usize::from(p.calibrated_label == y);
        }
    }
    let subset = |hits: usize| (flipped > 0).then(|| hits as f64 / flipped as f64);
    Ok(PseudoLabelAudit {
        raw_accuracy: raw as f64 / n,
        calibrated_accuracy: calibrated as f64 / n,
        calibrated_proportion: flipped as f64 / n,
        subset_raw_accuracy: subset(flipped_raw),
        subset_calibrated_accuracy: subset(flipped_calibrated),
    })
}

/// Capability to score predictions against a dataset's hidden labels.
#[derive(Debug, Clone)]
pub struct Evaluator {
    labels: Vec<usize>,
    num_classes: usize,
}

impl Evaluator {
    pub fn new(dataset: &DomainDataset) -> Self {
        Self {
            labels: dataset.labels_unchecked().to_vec(),
            num_classes: dataset.num_classes(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn per_class_accuracies(&self, predictions: &[usize]) -> Result<Vec<Option<f64>>> {
        per_class_accuracies(predictions, &self.labels, self.num_classes)
    }

    pub fn per_class_mean_accuracy(&self, predictions: &[usize]) -> Result<f64> {
        per_class_mean_accuracy(predictions, &self.labels, self.num_classes)
    }

    pub fn audit(&self, pseudo: &[PseudoLabel]) -> Result<PseudoLabelAudit> {
        pseudo_label_audit(pseudo, &self.labels)
    }

    /// Unsmoothed class frequencies of the hidden labels.
    pub fn label_distribution(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1.0;
        }
        let n = self.labels.len() as f64;
        counts.into_iter().map(|c| c / n).collect()
    }
}

/// `Σ |a_i − b_i|`.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
