//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse recording order and
//! accumulates gradients, so a value consumed twice (the feature extractor
//! output feeds both the classifier and the discriminator) receives the sum
//! of both contributions.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{matmul_a_bt_into, matmul_at_b_into};
use super::{KernelError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Scalar division `a / b`, both `1 × 1`.
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    Log {
        input: usize,
        floor: f64,
    },
    Sqrt(usize),
    GradReverse {
        input: usize,
        coeff: f64,
    },
    Sum(usize),
    /// Row-wise sum, `n × k → n × 1`.
    SumRows(usize),
    /// Euclidean distances between every row of `a` and every row of `b`.
    PairwiseDistance(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` when the root does not
    /// depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns a correctly shaped zero tensor
    /// for values the root does not depend on.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Result<Tensor, KernelError> {
        if var.tape != self.tape {
            return Err(KernelError::ForeignVar);
        }
        let value = tape.value(var)?;
        Ok(self
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols())))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, var: Var) -> Result<usize, KernelError> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(KernelError::ForeignVar);
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records an input value. Parameters and constants are both leaves;
    /// a constant is simply a leaf whose gradient nobody reads.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor, KernelError> {
        let i = self.check(var)?;
        Ok(&self.nodes[i].value)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.val(ia).matmul(self.val(ib))?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    /// Adds a `1 × k` bias row to every row of an `n × k` input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, KernelError> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (xv, bv) = (self.val(ix), self.val(ib));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(KernelError::mismatch("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.values()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(ix, ib)))
    }

    fn same_shape(&self, name: &str, ia: usize, ib: usize) -> Result<(), KernelError> {
        let (a, b) = (self.val(ia), self.val(ib));
        if a.shape() != b.shape() {
            return Err(KernelError::mismatch(name, a.shape(), b.shape()));
        }
        Ok(())
    }

    fn zip_map(&self, ia: usize, ib: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (a, b) = (self.val(ia), self.val(ib));
        let values = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.rows(), a.cols(), values).expect("shapes checked")
    }

    fn map(&self, ix: usize, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.val(ix);
        let values = x.values().iter().map(|&v| f(v)).collect();
        Tensor::new(x.rows(), x.cols(), values).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ia, ib)?;
        let out = self.zip_map(ia, ib, |x, y| x + y);
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("sub", ia, ib)?;
        let out = self.zip_map(ia, ib, |x, y| x - y);
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", ia, ib)?;
        let out = self.zip_map(ia, ib, |x, y| x * y);
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    /// Quotient of two `1 × 1` values.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        if av.shape() != [1, 1] || bv.shape() != [1, 1] {
            return Err(KernelError::mismatch("div", av.shape(), bv.shape()));
        }
        let out = Tensor::scalar(av.item() / bv.item());
        Ok(self.push(out, Op::Div(ia, ib)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, KernelError> {
        let ix = self.check(x)?;
        let out = self.map(ix, |v| v * factor);
        Ok(self.push(out, Op::Scale(ix, factor)))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var, KernelError> {
        let ix = self.check(x)?;
        let out = self.map(ix, |v| v + offset);
        Ok(self.push(out, Op::AddScalar(ix)))
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var, KernelError> {
        let ix = self.check(x)?;
        let out = self.map(ix, |v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(out, Op::Relu(ix)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, KernelError> {
        let ix = self.check(x)?;
        let out = self.map(ix, sigmoid);
        Ok(self.push(out, Op::Sigmoid(ix)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, logits: Var) -> Result<Var, KernelError> {
        let ix = self.check(logits)?;
        let x = self.val(ix);
        if x.cols() < 2 {
            return Err(KernelError::Shape(format!(
                "softmax needs at least 2 columns, got {:?}",
                x.shape()
            )));
        }
        let out = softmax_rows(x);
        Ok(self.push(out, Op::Softmax(ix)))
    }

    /// `ln(max(x, floor))`; no gradient flows where the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var, KernelError> {
        let ix = self.check(x)?;
        let out = self.map(ix, |v| v.max(floor).ln());
        Ok(self.push(out, Op::Log { input: ix, floor }))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, KernelError> {
        let ix = self.check(x)?;
        if self.val(ix).values().iter().any(|&v| v < 0.0) {
            return Err(KernelError::Domain("sqrt of a negative value".into()));
        }
        let out = self.map(ix, f64::sqrt);
        Ok(self.push(out, Op::Sqrt(ix)))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-coeff`.
    pub fn grad_reverse(&mut self, x: Var, coeff: f64) -> Result<Var, KernelError> {
        let ix = self.check(x)?;
        if !(coeff >= 0.0) {
            return Err(KernelError::Domain(format!(
                "gradient reversal coefficient must be non-negative, got {coeff}"
            )));
        }
        let out = self.val(ix).clone();
        Ok(self.push(out, Op::GradReverse { input: ix, coeff }))
    }

    /// Sum of all entries, as a `1 × 1` value.
    pub fn sum(&mut self, x: Var) -> Result<Var, KernelError> {
        let ix = self.check(x)?;
        let out = Tensor::scalar(self.val(ix).values().iter().sum());
        Ok(self.push(out, Op::Sum(ix)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, KernelError> {
        let n = self.value(x)?.values().len();
        if n == 0 {
            return Err(KernelError::Shape("mean of an empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var, KernelError> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        let values = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let out = Tensor::new(xv.rows(), 1, values)?;
        Ok(self.push(out, Op::SumRows(ix)))
    }

    /// Distance matrix `D[i][j] = ‖a_i − b_j‖₂` for `a: n × k`, `b: m × k`.
    ///
    /// At coincident rows the distance is not differentiable; the gradient
    /// there is taken as zero.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        if av.cols() != bv.cols() {
            return Err(KernelError::mismatch("pairwise_distance", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        for i in 0..av.rows() {
            for j in 0..bv.rows() {
                out.set(i, j, euclidean(av.row(i), bv.row(j)));
            }
        }
        Ok(self.push(out, Op::PairwiseDistance(ia, ib)))
    }

    /// Runs reverse accumulation from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients, KernelError> {
        if self.nodes.is_empty() {
            return Err(KernelError::EmptyTape);
        }
        let ir = self.check(root)?;
        if self.val(ir).shape() != [1, 1] {
            return Err(KernelError::Shape(format!(
                "backward root must be 1x1, got {:?}",
                self.val(ir).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[ir] = Some(Tensor::scalar(1.0));

        for i in (0..=ir).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(ia, ib) => {
                let (a, b) = (self.val(ia), self.val(ib));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let ga = slot(grads, ia, a);
                matmul_a_bt_into(g.values(), b.values(), ga.values_mut(), m, n, k);
                let gb = slot(grads, ib, b);
                matmul_at_b_into(a.values(), g.values(), gb.values_mut(), m, k, n);
            }
            Op::AddBias(ix, ib) => {
                accumulate(slot(grads, ix, self.val(ix)), g.values());
                let gb = slot(grads, ib, self.val(ib));
                for r in 0..g.rows() {
                    for (o, v) in gb.values_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::Add(ia, ib) => {
                accumulate(slot(grads, ia, self.val(ia)), g.values());
                accumulate(slot(grads, ib, self.val(ib)), g.values());
            }
            Op::Sub(ia, ib) => {
                accumulate(slot(grads, ia, self.val(ia)), g.values());
                let gb = slot(grads, ib, self.val(ib));
                for (o, v) in gb.values_mut().iter_mut().zip(g.values()) {
                    *o -= v;
                }
            }
            Op::Mul(ia, ib) => {
                let (a, b) = (self.val(ia), self.val(ib));
                let ga = slot(grads, ia, a);
                for ((o, gv), bv) in ga.values_mut().iter_mut().zip(g.values()).zip(b.values()) {
                    *o += gv * bv;
                }
                let gb = slot(grads, ib, b);
                for ((o, gv), av) in gb.values_mut().iter_mut().zip(g.values()).zip(a.values()) {
                    *o += gv * av;
                }
            }
            Op::Div(ia, ib) => {
                let (a, b) = (self.val(ia).item(), self.val(ib).item());
                let gv = g.item();
                slot(grads, ia, self.val(ia)).values_mut()[0] += gv / b;
                slot(grads, ib, self.val(ib)).values_mut()[0] -= gv * a / (b * b);
            }
            Op::Scale(ix, factor) => {
                let gx = slot(grads, ix, self.val(ix));
                for (o, v) in gx.values_mut().iter_mut().zip(g.values()) {
                    *o += factor * v;
                }
            }
            Op::AddScalar(ix) => accumulate(slot(grads, ix, self.val(ix)), g.values()),
            Op::Relu(ix) => {
                let x = self.val(ix);
                let gx = slot(grads, ix, x);
                for ((o, gv), xv) in gx.values_mut().iter_mut().zip(g.values()).zip(x.values()) {
                    if *xv > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Sigmoid(ix) => {
                let gx = slot(grads, ix, self.val(ix));
                for ((o, gv), s) in gx.values_mut().iter_mut().zip(g.values()).zip(out.values()) {
                    *o += gv * s * (1.0 - s);
                }
            }
            Op::Softmax(ix) => {
                let gx = slot(grads, ix, self.val(ix));
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::Log { input, floor } => {
                let x = self.val(input);
                let gx = slot(grads, input, x);
                for ((o, gv), xv) in gx.values_mut().iter_mut().zip(g.values()).zip(x.values()) {
                    if *xv > floor {
                        *o += gv / xv;
                    }
                }
            }
            Op::Sqrt(ix) => {
                let gx = slot(grads, ix, self.val(ix));
                for ((o, gv), s) in gx.values_mut().iter_mut().zip(g.values()).zip(out.values()) {
                    if *s > 0.0 {
                        *o += gv * 0.5 / s;
                    }
                }
            }
            Op::GradReverse { input, coeff } => {
                let gx = slot(grads, input, self.val(input));
                for (o, v) in gx.values_mut().iter_mut().zip(g.values()) {
                    *o -= coeff * v;
                }
            }
            Op::Sum(ix) => {
                let gv = g.item();
                for o in slot(grads, ix, self.val(ix)).values_mut() {
                    *o += gv;
                }
            }
            Op::SumRows(ix) => {
                let gx = slot(grads, ix, self.val(ix));
                for r in 0..gx.rows() {
                    let gv = g.get(r, 0);
                    for o in gx.row_mut(r) {
                        *o += gv;
                    }
                }
            }
            Op::PairwiseDistance(ia, ib) => {
                let (a, b) = (self.val(ia), self.val(ib));
                let cols = a.cols();
                let mut da = Tensor::zeros(a.rows(), cols);
                let mut db = Tensor::zeros(b.rows(), cols);
                for i in 0..a.rows() {
                    for j in 0..b.rows() {
                        let d = out.get(i, j);
                        let gv = g.get(i, j);
                        if d == 0.0 || gv == 0.0 {
                            continue;
                        }
                        let s = gv / d;
                        let (ar, br) = (a.row(i), b.row(j));
                        for c in 0..cols {
                            let diff = s * (ar[c] - br[c]);
                            da.row_mut(i)[c] += diff;
                            db.row_mut(j)[c] -= diff;
                        }
                    }
                }
                accumulate(slot(grads, ia, a), da.values());
                accumulate(slot(grads, ib, b), db.values());
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], i: usize, like: &Tensor) -> &'g mut Tensor {
    grads[i].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

fn accumulate(target: &mut Tensor, g: &[f64]) {
    for (o, v) in target.values_mut().iter_mut().zip(g) {
        *o += v;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Row-wise softmax without recording anything.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(2, 1, &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap().values(), &[3.0, 4.0]);

        let z = tape.leaf(t(1, 1, &[2.0]));
        let w = tape.leaf(t(1, 1, &[0.0]));
        let p = tape.matmul(z, w).unwrap();
        assert_eq!(tape.value(p).unwrap().values(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(3, 4));
        let b = tape.leaf(Tensor::zeros(3, 2));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("3x4") && err.contains("3x2"), "{err}");
    }

    #[test]
    fn relu_sign_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().values(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, x).unwrap().values(), &[0.0, 0.0, 1.0]);

        let pos = tape.leaf(t(1, 3, &[0.5, 1.0, 7.0]));
        let r = tape.relu(pos).unwrap();
        assert_eq!(tape.value(r).unwrap(), tape.value(pos).unwrap());
    }

    #[test]
    fn softmax_known_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(3, 3, &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 1e300, 1e300, 1e300]));
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).unwrap();
        for c in 0..3 {
            assert!((v.get(0, c) - 1.0 / 3.0).abs() < 1e-15);
            assert!((v.get(2, c) - 1.0 / 3.0).abs() < 1e-15);
        }
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (c, e) in expected.iter().enumerate() {
            assert!((v.get(1, c) - e).abs() < 1e-8);
        }

        let two = tape.leaf(t(1, 2, &[0.0, 0.0]));
        let half = tape.softmax(two).unwrap();
        assert_eq!(tape.value(half).unwrap().values(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_needs_two_columns() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 1));
        assert!(tape.softmax(x).is_err());
    }

    #[test]
    fn grad_reverse_is_identity_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.5, -2.0]));
        let y = tape.grad_reverse(x, 1.0).unwrap();
        assert_eq!(tape.value(y).unwrap().values(), &[1.5, -2.0]);
        assert!(tape.grad_reverse(x, -0.5).is_err());
    }

    #[test]
    fn grad_reverse_zero_coefficient_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.5, -2.0]));
        let y = tape.grad_reverse(x, 0.0).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(&tape, x).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_reverse_negates_through_two_layers() {
        // x: 1x2, w1: 2x1, w2: 1x1, loss = R(x·w1)·w2.
        // Unreversed dloss/dx = w2·w1ᵀ = [-6, -15]; reversal flips it.
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[0.3, -0.7]));
        let w1 = tape.leaf(t(2, 1, &[2.0, 5.0]));
        let w2 = tape.leaf(t(1, 1, &[-3.0]));
        let h = tape.matmul(x, w1).unwrap();
        let r = tape.grad_reverse(h, 1.0).unwrap();
        let o = tape.matmul(r, w2).unwrap();
        let g = tape.backward(o).unwrap();
        assert_eq!(g.wrt(&tape, x).unwrap().values(), &[6.0, 15.0]);
        let gw1 = g.wrt(&tape, w1).unwrap();
        assert!((gw1.get(0, 0) - 0.9).abs() < 1e-15 && (gw1.get(1, 0) + 2.1).abs() < 1e-15);
        // w2 sits after the reversal, so its gradient is not flipped
        let hv = 0.3 * 2.0 - 0.7 * 5.0;
        assert!((g.wrt(&tape, w2).unwrap().item() - hv).abs() < 1e-15);
    }

    #[test]
    fn shared_subgraph_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(&tape, x).unwrap().item(), 7.0);
    }

    #[test]
    fn backward_errors() {
        let empty = Tape::new();
        let mut other = Tape::new();
        let v = other.leaf(Tensor::scalar(1.0));
        assert_eq!(empty.backward(v).unwrap_err(), KernelError::EmptyTape);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(KernelError::Shape(_))));
        assert_eq!(tape.backward(v).unwrap_err(), KernelError::ForeignVar);
    }

    #[test]
    fn pairwise_distance_zero_gradient_at_coincidence() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[1.0, 1.0]));
        let b = tape.leaf(t(2, 2, &[1.0, 1.0, 4.0, 5.0]));
        let d = tape.pairwise_distance(a, b).unwrap();
        assert_eq!(tape.value(d).unwrap().values(), &[0.0, 5.0]);
        let s = tape.sum(d).unwrap();
        let g = tape.backward(s).unwrap();
        let ga = g.wrt(&tape, a).unwrap();
        assert!((ga.get(0, 0) + 0.6).abs() < 1e-15);
        assert!((ga.get(0, 1) + 0.8).abs() < 1e-15);
    }
}
