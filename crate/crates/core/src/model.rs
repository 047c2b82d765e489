//! Feature extractor G, classifier F and domain discriminator D.
//!
//! All three are small multilayer perceptrons. Parameters live in one flat
//! list (G layers, then F, then D) so a single optimizer can own them.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Gradients, Parameter, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    pub num_classes: usize,
    pub discriminator_hidden_dims: Vec<usize>,
}

/// The architecture-only part of [`ModelConfig`]; input and class counts
/// come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub hidden_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    pub discriminator_hidden_dims: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            bottleneck_dim: 16,
            discriminator_hidden_dims: vec![32],
        }
    }
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize, arch: &Architecture) -> Self {
        Self {
            input_dim,
            hidden_dims: arch.hidden_dims.clone(),
            bottleneck_dim: arch.bottleneck_dim,
            num_classes,
            discriminator_hidden_dims: arch.discriminator_hidden_dims.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_dim < 2 {
            return Err(Error::Parameter("bottleneck_dim must be at least 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Parameter("num_classes must be at least 2".into()));
        }
        let mut dims = std::iter::once(&self.input_dim)
            .chain(&self.hidden_dims)
            .chain(&self.discriminator_hidden_dims);
        if dims.any(|&d| d == 0) {
            return Err(Error::Parameter("all layer dimensions must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer in parameter order.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.bottleneck_dim)) {
            shapes.push((prev, h));
            prev = h;
        }
        shapes.push((self.bottleneck_dim, self.num_classes));
        prev = self.bottleneck_dim;
        for &h in &self.discriminator_hidden_dims {
            shapes.push((prev, h));
            prev = h;
        }
        shapes.push((prev, 1));
        shapes
    }

    fn extractor_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }
}

/// Parameters of all three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    config: ModelConfig,
    params: Vec<Parameter>,
}

/// Weights drawn uniformly in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (fan_in, fan_out) in config.layer_shapes() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        params.push(Parameter::new(Tensor::new(fan_in, fan_out, weights)?));
        params.push(Parameter::new(Tensor::zeros(1, fan_out)));
    }
    Ok(ModelState {
        config: config.clone(),
        params,
    })
}

/// Parameter leaves of a [`ModelState`] recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    layers: Vec<(Var, Var)>,
    extractor_layers: usize,
}

impl BoundModel {
    fn extractor(&self) -> &[(Var, Var)] {
        &self.layers[..self.extractor_layers]
    }

    fn classifier(&self) -> (Var, Var) {
        self.layers[self.extractor_layers]
    }

    fn discriminator(&self) -> &[(Var, Var)] {
        &self.layers[self.extractor_layers + 1..]
    }

    /// All parameter leaves in the same order as [`ModelState::params`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Feature extractor G: affine + relu for each hidden layer, then an
    /// affine map to the bottleneck with no activation.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        mlp(tape, self.extractor(), x)
    }

    /// Classifier F: one affine layer followed by softmax.
    pub fn classify(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let (w, b) = self.classifier();
        let logits = affine(tape, feats, w, b)?;
        Ok(tape.softmax(logits)?)
    }

    /// Discriminator D behind a gradient-reversal layer; returns the
    /// probability that each row comes from the target domain.
    pub fn discriminate(&self, tape: &mut Tape, feats: Var, grl_coeff: f64) -> Result<Var> {
        let reversed = tape.grad_reverse(feats, grl_coeff)?;
        let logit = mlp(tape, self.discriminator(), reversed)?;
        Ok(tape.sigmoid(logit)?)
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    Ok(tape.add_bias(h, b)?)
}

fn mlp(tape: &mut Tape, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = affine(tape, h, w, b)?;
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

impl ModelState {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let layers = self
            .params
            .chunks(2)
            .map(|pair| (tape.leaf(pair[0].value.clone()), tape.leaf(pair[1].value.clone())))
            .collect();
        BoundModel {
            layers,
            extractor_layers: self.config.extractor_layers(),
        }
    }

    /// Adds the gradients of a backward pass into the parameter slots.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundModel, grads: &Gradients) -> Result<()> {
        for (param, var) in self.params.iter_mut().zip(bound.vars()) {
            if let Some(g) = grads.get(var) {
                param.accumulate_grad(g)?;
            } else {
                // still validates the binding belongs to this tape
                tape.value(var)?;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::Kernel(crate::kernel::KernelError::Shape(format!(
                "model expects {} input columns, got {}x{}",
                self.config.input_dim,
                x.rows(),
                x.cols()
            ))));
        }
        Ok(())
    }

    /// Bottleneck features for a batch, without keeping the tape.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = bound.features(&mut tape, xv)?;
        Ok(tape.value(f)?.clone())
    }

    /// Class probabilities `p(y|x)` for a batch.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = bound.features(&mut tape, xv)?;
        let p = bound.classify(&mut tape, f)?;
        Ok(tape.value(p)?.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: ModelState = serde_json::from_str(&text)?;
        state.config.validate()?;
        let shapes = state.config.layer_shapes();
        let consistent = state.params.len() == 2 * shapes.len()
            && shapes.iter().enumerate().all(|(i, &(fi, fo))| {
                state.params[2 * i].value.shape() == [fi, fo] && state.params[2 * i + 1].value.shape() == [1, fo]
            });
        if !consistent {
            return Err(Error::Validation(
                "checkpoint parameters do not match its config".into(),
            ));
        }
        Ok(state)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
