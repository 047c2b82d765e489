//! Training losses: source cross-entropy, the domain adversarial loss, the
//! sample-weighted moving-average centroid alignment loss and the
//! discriminative feature alignment loss.
//!
//! Every loss is recorded on a [`Tape`] so its gradient reaches the
//! networks that produced the features.

use log::warn;

use crate::error::{Error, Result};
use crate::kernel::{Tape, Tensor, Var};
use crate::synth::Domain;

/// Probabilities are clamped to this value before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Added to the denominator of every ratio loss.
pub const RATIO_EPS: f64 = 1e-8;

/// Features of one batch together with (pseudo-)labels and confidence
/// weights `w = max p(y|x)`.
#[derive(Debug, Clone)]
pub struct WeightedBatch {
    pub features: Var,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

impl WeightedBatch {
    pub fn new(tape: &Tape, features: Var, labels: Vec<usize>, weights: Vec<f64>, num_classes: usize) -> Result<Self> {
        let rows = tape.value(features)?.rows();
        if labels.len() != rows || weights.len() != rows {
            return Err(Error::Validation(format!(
                "batch has {rows} feature rows, {} labels and {} weights",
                labels.len(),
                weights.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Validation(format!(
                "label {y} not below class count {num_classes}"
            )));
        }
        if let Some(&w) = weights.iter().find(|&&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::Validation(format!("sample weight {w} outside [0, 1]")));
        }
        Ok(Self {
            features,
            labels,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean negative log-likelihood of the labelled class.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let p = tape.value(probs)?;
    let (n, c) = (p.rows(), p.cols());
    if n == 0 || labels.len() != n {
        return Err(Error::Validation(format!(
            "{n} probability rows but {} labels",
            labels.len()
        )));
    }
    let mut mask = Tensor::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Validation(format!("label {y} out of range for {c} classes")));
        }
        mask.set(i, y, -1.0 / n as f64);
    }
    let logp = tape.log(probs, PROB_FLOOR)?;
    let mask = tape.leaf(mask);
    let picked = tape.mul(logp, mask)?;
    Ok(tape.sum(picked)?)
}

/// Binary cross-entropy of the discriminator with source labelled 0 and
/// target labelled 1: `−(mean log(1 − d_src) + mean log d_tgt)`.
///
/// Minimizing it trains D; the gradient-reversal layer in front of D makes
/// the feature extractor ascend it.
pub fn domain_adversarial_loss(tape: &mut Tape, d_src: Var, d_tgt: Var) -> Result<Var> {
    for (name, var) in [("source", d_src), ("target", d_tgt)] {
        let v = tape.value(var)?;
        if v.cols() != 1 || v.rows() == 0 {
            return Err(Error::Validation(format!("{name} discriminator output must be n x 1")));
        }
        if let Some(x) = v.values().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Validation(format!(
                "{name} discriminator output {x} is not a probability"
            )));
        }
    }
    let neg = tape.scale(d_src, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let log_src = tape.log(one_minus, PROB_FLOOR)?;
    let src_term = tape.mean(log_src)?;
    let log_tgt = tape.log(d_tgt, PROB_FLOOR)?;
    let tgt_term = tape.mean(log_tgt)?;
    let both = tape.add(src_term, tgt_term)?;
    Ok(tape.scale(both, -1.0)?)
}

/// Exponential-moving-average class centroids for both domains.
///
/// Stored centroids are plain values: only the current batch's
/// contribution to an updated centroid is differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank {
    num_classes: usize,
    dim: usize,
    ema_coeff: f64,
    source: Vec<Option<Vec<f64>>>,
    target: Vec<Option<Vec<f64>>>,
}

/// Centroids of one domain as recorded on a tape for the current step.
#[derive(Debug, Clone)]
pub struct CentroidSet {
    /// `C × dim`; rows of unavailable classes are zero and never used.
    pub matrix: Var,
    pub available: Vec<bool>,
}

impl CentroidBank {
    pub fn new(num_classes: usize, dim: usize, ema_coeff: f64) -> Result<Self> {
        if !(ema_coeff > 0.0 && ema_coeff <= 1.0) {
            return Err(Error::Parameter(format!(
                "ema coefficient must lie in (0, 1], got {ema_coeff}"
            )));
        }
        Ok(Self {
            num_classes,
            dim,
            ema_coeff,
            source: vec![None; num_classes],
            target: vec![None; num_classes],
        })
    }

    pub fn centroid(&self, domain: Domain, class: usize) -> Option<&[f64]> {
        self.slots(domain).get(class)?.as_deref()
    }

    fn slots(&self, domain: Domain) -> &Vec<Option<Vec<f64>>> {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    fn slots_mut(&mut self, domain: Domain) -> &mut Vec<Option<Vec<f64>>> {
        match domain {
            Domain::Source => &mut self.source,
            Domain::Target => &mut self.target,
        }
    }

    /// Folds a batch into the bank and returns the updated centroids.
    ///
    /// For every class present with positive total weight the batch
    /// centroid is `Σ wᵢfᵢ / Σ wᵢ`; the bank entry becomes
    /// `θ·old + (1 − θ)·batch` when already initialized, else the batch
    /// centroid itself. Absent classes keep their stored value.
    pub fn update(&mut self, tape: &mut Tape, batch: &WeightedBatch, domain: Domain) -> Result<CentroidSet> {
        let feats = tape.value(batch.features)?;
        let (n, dim) = (feats.rows(), feats.cols());
        if dim != self.dim {
            return Err(Error::Validation(format!(
                "bank holds {}-d centroids, batch is {dim}-d",
                self.dim
            )));
        }
        let c = self.num_classes;
        let mut weight_sums = vec![0.0; c];
        for (&y, &w) in batch.labels.iter().zip(&batch.weights) {
            weight_sums[y] += w;
        }

        let theta = self.ema_coeff;
        let slots = self.slots(domain);
        let mut coeffs = Tensor::zeros(c, n);
        let mut base = Tensor::zeros(c, dim);
        let mut available = vec![false; c];
        for k in 0..c {
            let present = weight_sums[k] > 0.0;
            let mix = match (&slots[k], present) {
                (Some(old), true) => {
                    for (b, o) in base.row_mut(k).iter_mut().zip(old) {
                        *b = theta * o;
                    }
                    1.0 - theta
                }
                (Some(old), false) => {
                    base.row_mut(k).copy_from_slice(old);
                    0.0
                }
                (None, true) => 1.0,
                (None, false) => 0.0,
            };
            available[k] = slots[k].is_some() || present;
            if present {
                for (i, (&y, &w)) in batch.labels.iter().zip(&batch.weights).enumerate() {
                    if y == k {
                        coeffs.set(k, i, mix * w / weight_sums[k]);
                    }
                }
            }
        }

        let coeffs = tape.leaf(coeffs);
        let contribution = tape.matmul(coeffs, batch.features)?;
        let base = tape.leaf(base);
        let matrix = tape.add(contribution, base)?;

        let updated = tape.value(matrix)?.clone();
        let slots = self.slots_mut(domain);
        for k in 0..c {
            if weight_sums[k] > 0.0 {
                slots[k] = Some(updated.row(k).to_vec());
            }
        }
        Ok(CentroidSet { matrix, available })
    }
}

/// Ratio of mean same-class cross-domain centroid distance to mean
/// different-class cross-domain centroid distance.
///
/// Only classes with both centroids available take part. With a single
/// eligible class the plain numerator is returned; with none the result
/// is `None`.
pub fn centroid_ratio(tape: &mut Tape, source: &CentroidSet, target: &CentroidSet) -> Result<Option<Var>> {
    let eligible: Vec<usize> = (0..source.available.len())
        .filter(|&k| source.available[k] && target.available.get(k).copied().unwrap_or(false))
        .collect();
    if eligible.is_empty() {
        warn!("centroid alignment skipped: no class has centroids in both domains");
        return Ok(None);
    }
    let c = source.available.len();
    let dist = tape.pairwise_distance(source.matrix, target.matrix)?;

    let mut same = Tensor::zeros(c, c);
    for &k in &eligible {
        same.set(k, k, 1.0 / eligible.len() as f64);
    }
    let same = tape.leaf(same);
    let same = tape.mul(dist, same)?;
    let numerator = tape.sum(same)?;
    if eligible.len() < 2 {
        return Ok(Some(numerator));
    }

    let pairs = eligible.len() * (eligible.len() - 1);
    let mut cross = Tensor::zeros(c, c);
    for &i in &eligible {
        for &k in &eligible {
            if i != k {
                cross.set(i, k, 1.0 / pairs as f64);
            }
        }
    }
    let cross = tape.leaf(cross);
    let cross = tape.mul(dist, cross)?;
    let denominator = tape.sum(cross)?;
    let denominator = tape.add_scalar(denominator, RATIO_EPS)?;
    Ok(Some(tape.div(numerator, denominator)?))
}

/// Updates the bank with both batches and returns the centroid alignment
/// loss, or `None` when no class is eligible yet.
pub fn centroid_alignment_loss(
    tape: &mut Tape,
    bank: &mut CentroidBank,
    source: &WeightedBatch,
    target: &WeightedBatch,
) -> Result<Option<Var>> {
    let src = bank.update(tape, source, Domain::Source)?;
    let tgt = bank.update(tape, target, Domain::Target)?;
    centroid_ratio(tape, &src, &tgt)
}

/// Weighted mean distance over same-label source/target pairs divided by
/// the weighted mean distance over different-label pairs. Pair weights are
/// `√(wˢᵢ wᵗⱼ)`.
///
/// Returns `None` when either pair set is empty.
pub fn discriminative_alignment_loss(
    tape: &mut Tape,
    source: &WeightedBatch,
    target: &WeightedBatch,
) -> Result<Option<Var>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Validation(
            "discriminative alignment needs non-empty batches".into(),
        ));
    }
    let (ns, nt) = (source.len(), target.len());
    let n_same = source
        .labels
        .iter()
        .map(|ys| target.labels.iter().filter(|&&yt| yt == *ys).count())
        .sum::<usize>();
    let n_diff = ns * nt - n_same;
    if n_same == 0 || n_diff == 0 {
        return Ok(None);
    }

    let mut same = Tensor::zeros(ns, nt);
    let mut diff = Tensor::zeros(ns, nt);
    for i in 0..ns {
        for j in 0..nt {
            let w = (source.weights[i] * target.weights[j]).sqrt();
            if source.labels[i] == target.labels[j] {
                same.set(i, j, w / n_same as f64);
            } else {
                diff.set(i, j, w / n_diff as f64);
            }
        }
    }
    let dist = tape.pairwise_distance(source.features, target.features)?;
    let same = tape.leaf(same);
    let same = tape.mul(dist, same)?;
    let numerator = tape.sum(same)?;
    let diff = tape.leaf(diff);
    let diff = tape.mul(dist, diff)?;
    let denominator = tape.sum(diff)?;
    let denominator = tape.add_scalar(denominator, RATIO_EPS)?;
    Ok(Some(tape.div(numerator, denominator)?))
}
