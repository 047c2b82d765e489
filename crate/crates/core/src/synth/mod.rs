//! Two-domain synthetic classification benchmarks.
//!
//! Each class is an isotropic Gaussian whose mean sits on a circle of
//! radius `4·σ` in the first two coordinates. The target domain rotates
//! and translates those class-conditionals (covariate shift) and assigns
//! long-tailed class sizes in a different order (label shift).

mod csv_io;
mod dataset;
mod sampler;

pub use csv_io::{load_dataset, save_dataset};
pub use dataset::{Domain, DomainDataset};
pub use sampler::{balanced_source_batches, BalancedBatches};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Tensor;

/// Parameters of a generated source/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Size of the head class.
    pub n_max: usize,
    /// Ratio of the largest to the smallest class size.
    pub imbalance_factor: f64,
    /// `source_order[r]` is the class holding rank `r` (rank 0 = head).
    pub source_order: Vec<usize>,
    pub target_order: Vec<usize>,
    /// Radians, applied in the plane of the first two coordinates.
    pub rotation_angle: f64,
    /// Offset added to target features; empty means no translation.
    #[serde(default)]
    pub translation: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ShiftSpec {
    /// Benchmark used throughout the acceptance suite: 5 classes in 10
    /// dimensions, IF 10 with reversed target order, a 30° rotation.
    pub fn standard() -> Self {
        let num_classes = 5;
        let feature_dim = 10;
        let mut translation = vec![0.0; feature_dim];
        translation[0] = 0.5;
        translation[1] = -0.5;
        Self {
            num_classes,
            feature_dim,
            n_max: 300,
            imbalance_factor: 10.0,
            source_order: (0..num_classes).collect(),
            target_order: (0..num_classes).rev().collect(),
            rotation_angle: 30f64.to_radians(),
            translation,
            noise_sigma: 1.0,
            seed: 7,
        }
    }

    /// Same class-conditionals and class sizes in both domains.
    pub fn no_shift(num_classes: usize, feature_dim: usize, n_max: usize, seed: u64) -> Self {
        Self {
            num_classes,
            feature_dim,
            n_max,
            imbalance_factor: 1.0,
            source_order: (0..num_classes).collect(),
            target_order: (0..num_classes).collect(),
            rotation_angle: 0.0,
            translation: Vec::new(),
            noise_sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 {
            return Err(Error::Parameter(format!("num_classes must be at least 2, got {c}")));
        }
        if self.feature_dim < 2 {
            return Err(Error::Parameter("feature_dim must be at least 2".into()));
        }
        if self.n_max < c {
            return Err(Error::Parameter(format!(
                "n_max {} is below num_classes {c}",
                self.n_max
            )));
        }
        if !(self.imbalance_factor >= 1.0) || !self.imbalance_factor.is_finite() {
            return Err(Error::Parameter(format!(
                "imbalance_factor must be a finite value >= 1, got {}",
                self.imbalance_factor
            )));
        }
        for (name, order) in [
            ("source_order", &self.source_order),
            ("target_order", &self.target_order),
        ] {
            let mut seen = vec![false; c];
            if order.len() != c || !order.iter().all(|&k| k < c && !std::mem::replace(&mut seen[k], true)) {
                return Err(Error::Parameter(format!("{name} is not a permutation of 0..{c}")));
            }
        }
        if !self.translation.is_empty() && self.translation.len() != self.feature_dim {
            return Err(Error::Parameter(format!(
                "translation has length {}, expected {}",
                self.translation.len(),
                self.feature_dim
            )));
        }
        if !(self.noise_sigma > 0.0) || !self.rotation_angle.is_finite() {
            return Err(Error::Parameter(
                "noise_sigma must be positive and rotation finite".into(),
            ));
        }
        Ok(())
    }

    /// Per-class sample counts (indexed by class) for one domain.
    pub fn class_counts(&self, domain: Domain) -> Result<Vec<usize>> {
        let by_rank = class_sizes(self)?;
        let order = match domain {
            Domain::Source => &self.source_order,
            Domain::Target => &self.target_order,
        };
        let mut counts = vec![0; self.num_classes];
        for (rank, &class) in order.iter().enumerate() {
            counts[class] = by_rank[rank];
        }
        Ok(counts)
    }

    /// Class label distribution of one domain, as generated.
    pub fn label_distribution(&self, domain: Domain) -> Result<Vec<f64>> {
        let counts = self.class_counts(domain)?;
        let total: usize = counts.iter().sum();
        Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
    }

    fn class_mean(&self, class: usize) -> Vec<f64> {
        let radius = 4.0 * self.noise_sigma;
        let angle = std::f64::consts::TAU * class as f64 / self.num_classes as f64;
        let mut mean = vec![0.0; self.feature_dim];
        mean[0] = radius * angle.cos();
        mean[1] = radius * angle.sin();
        mean
    }
}

/// Long-tailed class sizes by rank: `round(n_max · IF^(−r/(C−1)))`, at least 1.
pub fn class_sizes(spec: &ShiftSpec) -> Result<Vec<usize>> {
    let c = spec.num_classes;
    if !(spec.imbalance_factor >= 1.0) {
        return Err(Error::Parameter(format!(
            "imbalance_factor must be >= 1, got {}",
            spec.imbalance_factor
        )));
    }
    if c < 2 || spec.n_max < c {
        return Err(Error::Parameter(format!(
            "need num_classes >= 2 and n_max >= num_classes, got {c} and {}",
            spec.n_max
        )));
    }
    Ok((0..c)
        .map(|r| {
            let exponent = -(r as f64) / (c - 1) as f64;
            let size = (spec.n_max as f64 * spec.imbalance_factor.powf(exponent)).round();
            (size as usize).max(1)
        })
        .collect())
}

/// Draws the source and target datasets described by `spec`.
pub fn generate(spec: &ShiftSpec) -> Result<(DomainDataset, DomainDataset)> {
    spec.validate()?;
    let source = sample_domain(spec, Domain::Source)?;
    let target = sample_domain(spec, Domain::Target)?;
    Ok((source, target))
}

fn sample_domain(spec: &ShiftSpec, domain: Domain) -> Result<DomainDataset> {
    let counts = spec.class_counts(domain)?;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match domain {
        Domain::Source => 0,
        Domain::Target => 1,
    });
    let (sin, cos) = spec.rotation_angle.sin_cos();

    let total: usize = counts.iter().sum();
    let mut values = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (class, &n) in counts.iter().enumerate() {
        let mean = spec.class_mean(class);
        for _ in 0..n {
            let mut x: Vec<f64> = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.noise_sigma * z
                })
                .collect();
            if domain == Domain::Target {
                let (x0, x1) = (x[0], x[1]);
                x[0] = cos * x0 - sin * x1;
                x[1] = sin * x0 + cos * x1;
                for (v, t) in x.iter_mut().zip(&spec.translation) {
                    *v += t;
                }
            }
            values.extend(x);
            labels.push(class);
        }
    }
    let features = Tensor::new(total, d, values)?;
    DomainDataset::new(domain, features, labels, spec.num_classes)
}
