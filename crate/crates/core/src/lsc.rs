//! Label shift calibration of target pseudo-labels.
//!
//! The source label distribution `P_S` and an estimate `P̂_T` of the target
//! distribution give a per-class shift metric `M = P̂_T / P_S`. Each class
//! gets a bounded weight `1 / (h_m + exp(−√M))`, and a pseudo-label is the
//! argmax of the class probabilities multiplied by those weights. The
//! confidence kept for a calibrated label is the *uncalibrated* probability
//! of that class.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::model::argmax;

/// Additive smoothing applied to every class count.
pub const SMOOTHING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub raw_label: usize,
    pub raw_confidence: f64,
    pub calibrated_label: usize,
    pub calibrated_confidence: f64,
}

impl PseudoLabel {
    /// Plain argmax labelling with no calibration.
    pub fn uncalibrated(probs: &[f64]) -> Self {
        let raw_label = argmax(probs);
        Self {
            raw_label,
            raw_confidence: probs[raw_label],
            calibrated_label: raw_label,
            calibrated_confidence: probs[raw_label],
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.raw_label != self.calibrated_label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelShiftState {
    pub source_distribution: Vec<f64>,
    pub target_estimate: Vec<f64>,
    pub shift_metric: Vec<f64>,
    pub class_weights: Vec<f64>,
    pub h_m: f64,
}

impl LabelShiftState {
    pub fn new(source_distribution: Vec<f64>, target_estimate: Vec<f64>, h_m: f64) -> Result<Self> {
        let shift_metric = shift_metric(&source_distribution, &target_estimate)?;
        let class_weights = weighting_matrix(&shift_metric, h_m)?;
        Ok(Self {
            source_distribution,
            target_estimate,
            shift_metric,
            class_weights,
            h_m,
        })
    }

    pub fn calibrate(&self, probs: &Tensor) -> Result<Vec<PseudoLabel>> {
        calibrate(probs, &self.class_weights)
    }
}

fn smoothed_frequencies(labels: impl Iterator<Item = usize>, num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![SMOOTHING; num_classes];
    for y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::Validation(format!("label {y} not below class count {num_classes}")))? += 1.0;
    }
    let total: f64 = counts.iter().sum();
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// Empirical source label distribution with additive smoothing.
pub fn source_distribution(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset("no source labels".into()));
    }
    smoothed_frequencies(labels.iter().copied(), num_classes)
}

/// Smoothed frequencies of raw pseudo-labels whose confidence exceeds
/// `threshold`. Falls back to all samples when none qualify.
pub fn estimate_target_distribution(pseudo: &[PseudoLabel], threshold: f64, num_classes: usize) -> Result<Vec<f64>> {
    if pseudo.is_empty() {
        return Err(Error::EmptyDataset("no target pseudo-labels".into()));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Parameter(format!(
            "confidence threshold must lie in [0, 1), got {threshold}"
        )));
    }
    let confident = pseudo.iter().filter(|p| p.raw_confidence > threshold);
    if confident.clone().next().is_none() {
        warn!(
            "no pseudo-label above confidence {threshold}; estimating from all {} samples",
            pseudo.len()
        );
        return smoothed_frequencies(pseudo.iter().map(|p| p.raw_label), num_classes);
    }
    smoothed_frequencies(confident.map(|p| p.raw_label), num_classes)
}

/// Per-class ratio `P̂_T[i] / P_S[i]`.
pub fn shift_metric(source: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if source.len() != target.len() {
        return Err(Error::Validation(format!(
            "distributions have {} and {} classes",
            source.len(),
            target.len()
        )));
    }
    if source.iter().chain(target).any(|&p| !(p > 0.0)) {
        return Err(Error::Validation(
            "label distributions must be strictly positive".into(),
        ));
    }
    Ok(source.iter().zip(target).map(|(s, t)| t / s).collect())
}

/// Class weights `1 / (h_m + exp(−√M[i]))`, bounded in `(1/(h_m+1), 1/h_m)`.
pub fn weighting_matrix(metric: &[f64], h_m: f64) -> Result<Vec<f64>> {
    if !(h_m > 0.0) {
        return Err(Error::Parameter(format!("h_m must be positive, got {h_m}")));
    }
    if metric.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::Validation("shift metric must be strictly positive".into()));
    }
    Ok(metric.iter().map(|m| 1.0 / (h_m + (-m.sqrt()).exp())).collect())
}

/// Pseudo-labels from class probabilities reweighted by `class_weights`.
pub fn calibrate(probs: &Tensor, class_weights: &[f64]) -> Result<Vec<PseudoLabel>> {
    if probs.cols() != class_weights.len() {
        return Err(Error::Validation(format!(
            "{} probability columns but {} class weights",
            probs.cols(),
            class_weights.len()
        )));
    }
    let mut weighted = vec![0.0; class_weights.len()];
    Ok((0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            for ((w, p), m) in weighted.iter_mut().zip(row).zip(class_weights) {
                *w = p * m;
            }
            let raw_label = argmax(row);
            let calibrated_label = argmax(&weighted);
            PseudoLabel {
                raw_label,
                raw_confidence: row[raw_label],
                calibrated_label,
                calibrated_confidence: row[calibrated_label],
            }
        })
        .collect())
}
