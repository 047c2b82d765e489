use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synth::DomainDataset;

/// Endless stream of class-balanced index batches over a labelled dataset.
///
/// Every slot first draws a class uniformly, then a sample of that class
/// uniformly, with replacement.
#[derive(Debug, Clone)]
pub struct BalancedBatches {
    by_class: Vec<Vec<usize>>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

pub fn balanced_source_batches(ds: &DomainDataset, batch_size: usize, seed: u64) -> Result<BalancedBatches> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Parameter("balanced sampling needs visible labels".into()))?;
    BalancedBatches::new(labels, ds.num_classes(), batch_size, seed)
}

impl BalancedBatches {
    pub fn new(labels: &[usize], num_classes: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Parameter(format!(
                "class count must be at least 2, got {num_classes}"
            )));
        }
        if batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            let bucket = by_class
                .get_mut(y)
                .ok_or_else(|| Error::Validation(format!("label {y} out of range")))?;
            bucket.push(i);
        }
        if let Some(k) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Validation(format!("class {k} has no samples to draw from")));
        }
        Ok(Self {
            by_class,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch_size)
            .map(|_| {
                let class = &self.by_class[self.rng.random_range(0..self.by_class.len())];
                class[self.rng.random_range(0..class.len())]
            })
            .collect()
    }
}

impl Iterator for BalancedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}
