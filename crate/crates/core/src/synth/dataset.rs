use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Feature vectors and labels for one domain.
///
/// Target-domain labels are hidden: [`DomainDataset::labels`] returns
/// `None` for them, and only [`crate::eval::Evaluator`] can read them.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    domain: Domain,
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl DomainDataset {
    pub fn new(domain: Domain, features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset(format!("{domain} dataset has no samples")));
        }
        if features.rows() != labels.len() {
            return Err(Error::Validation(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Parameter(format!(
                "class count must be at least 2, got {num_classes}"
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Validation(format!(
                "sample {i} has label {y} but only {num_classes} classes are declared"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        Ok(Self {
            domain,
            features,
            labels,
            num_classes,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn is_hidden(&self) -> bool {
        self.domain == Domain::Target
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Labels, or `None` when they are hidden from training code.
    pub fn labels(&self) -> Option<&[usize]> {
        (!self.is_hidden()).then_some(self.labels.as_slice())
    }

    pub(crate) fn labels_unchecked(&self) -> &[usize] {
        &self.labels
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

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Same samples relabelled with another domain tag.
    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }
}
