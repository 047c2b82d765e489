use serde::{Deserialize, Serialize};

use super::{KernelError, Tensor};

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    #[serde(skip)]
    grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Self { value, grad: None }
    }

    pub fn grad(&self) -> Tensor {
        self.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value.rows(), self.value.cols()))
    }

    /// Adds `g` into the gradient slot.
    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<(), KernelError> {
        if g.shape() != self.value.shape() {
            return Err(KernelError::mismatch("accumulate_grad", self.value.shape(), g.shape()));
        }
        match &mut self.grad {
            Some(acc) => {
                for (a, v) in acc.values_mut().iter_mut().zip(g.values()) {
                    *a += v;
                }
            }
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← momentum·v + grad`, `param ← param − lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self, KernelError> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(KernelError::Domain(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Applies one update to every parameter and clears their gradients.
    pub fn step(&mut self, params: &mut [Parameter], lr: f64) -> Result<(), KernelError> {
        if !(lr > 0.0) {
            return Err(KernelError::Domain(format!("learning rate must be positive, got {lr}")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.values().len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(KernelError::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if v.len() != p.value.values().len() {
                return Err(KernelError::Shape("parameter size changed under the optimizer".into()));
            }
            if let Some(g) = p.grad.take() {
                for (vel, gv) in v.iter_mut().zip(g.values()) {
                    *vel = self.momentum * *vel + gv;
                }
            } else {
                for vel in v.iter_mut() {
                    *vel *= self.momentum;
                }
            }
            for (w, vel) in p.value.values_mut().iter_mut().zip(v.iter()) {
                *w -= lr * vel;
            }
        }
        Ok(())
    }
}
