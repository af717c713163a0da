//! Minimal reverse-mode differentiation over matrix expressions.
//!
//! A [`Tape`] records primitive operations eagerly (values are computed at
//! record time), then [`Tape::backward`] walks the record in reverse and
//! accumulates adjoints by the chain rule. The primitive set is exactly what
//! the tiny models and regularization losses need — nothing speculative.
//!
//! Convention used throughout the crate: activations are stored as
//! (features x batch) matrices, i.e. one sample per column.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Relu(NodeId),
    /// Elementwise product with a constant matrix (dropout masks etc.).
    MaskMul(NodeId, Matrix),
    Sum(NodeId),
    FrobSq(NodeId),
    /// Copy of a contiguous column range.
    Cols(NodeId, usize, usize),
    /// Mean cross-entropy over columns; caches the softmax probabilities
    /// computed in the forward pass for the backward rule.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Matrix,
    },
    /// Column-wise softmax where column j only sees rows 0..=j (causal
    /// attention over one sequence laid out as keys x queries).
    CausalColSoftmax(NodeId),
}

struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Gradients keyed by node, as produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `id`, if it required gradients and was reached.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Record of a forward computation; single-owner, single-threaded.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Enters a constant or trainable matrix.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        let rg = self.needs(a);
        self.push(Op::Scale(a, s), value, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let rg = self.needs(a);
        self.push(Op::Transpose(a), value, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let rg = self.needs(a);
        self.push(Op::Relu(a), value, rg)
    }

    /// Elementwise multiply by a fixed mask of the same shape.
    pub fn mask_mul(&mut self, a: NodeId, mask: Matrix) -> Result<NodeId> {
        if self.value(a).shape() != mask.shape() {
            return Err(Error::invalid_argument(format!(
                "mask shape {:?} does not match value shape {:?}",
                mask.shape(),
                self.value(a).shape()
            )));
        }
        let mut value = self.value(a).clone();
        for (v, &m) in value.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
        let rg = self.needs(a);
        Ok(self.push(Op::MaskMul(a, mask), value, rg))
    }

    /// Sum of all entries, as a 1x1 matrix.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let value = Matrix::from_vec_unchecked(1, 1, vec![total]);
        let rg = self.needs(a);
        self.push(Op::Sum(a), value, rg)
    }

    /// Columns `start..end` of `a`, as a new node.
    pub fn cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start >= end || end > v.cols() {
            return Err(Error::invalid_argument(format!(
                "column range {start}..{end} invalid for {} columns",
                v.cols()
            )));
        }
        let value = v.columns(start, end);
        let rg = self.needs(a);
        Ok(self.push(Op::Cols(a, start, end), value, rg))
    }

    /// Squared Frobenius norm, as a 1x1 matrix.
    pub fn frob_sq(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().map(|&x| x * x).sum();
        let value = Matrix::from_vec_unchecked(1, 1, vec![total]);
        let rg = self.needs(a);
        self.push(Op::FrobSq(a), value, rg)
    }

    /// Mean cross-entropy of column-wise softmax against integer labels
    /// (`labels[j]` is the target row for column j). Uses max-subtraction
    /// for numerical stability.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let value = self.value(logits);
        let (classes, batch) = value.shape();
        if labels.len() != batch {
            return Err(Error::invalid_argument(format!(
                "{} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid_argument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Matrix::zeros(classes, batch);
        let mut loss = 0.0;
        for j in 0..batch {
            let col = value.column(j);
            let max = col.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let exps: Vec<f64> = col.iter().map(|&x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for i in 0..classes {
                probs[(i, j)] = exps[i] / z;
            }
            loss -= (probs[(labels[j], j)]).ln();
        }
        loss /= batch as f64;
        let rg = self.needs(logits);
        let value = Matrix::from_vec_unchecked(1, 1, vec![loss]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            rg,
        ))
    }

    /// Causal column softmax on a square score matrix: entry (i, j) is the
    /// weight of key position i for query position j, and positions i > j
    /// are masked out (weight exactly 0).
    pub fn causal_col_softmax(&mut self, scores: NodeId) -> Result<NodeId> {
        let value = self.value(scores);
        let (rows, cols) = value.shape();
        if rows != cols {
            return Err(Error::invalid_argument(format!(
                "causal softmax needs a square matrix, got {rows}x{cols}"
            )));
        }
        let mut out = Matrix::zeros(rows, cols);
        for j in 0..cols {
            let visible: Vec<f64> = (0..=j).map(|i| value[(i, j)]).collect();
            let max = visible.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let exps: Vec<f64> = visible.iter().map(|&x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (i, e) in exps.iter().enumerate() {
                out[(i, j)] = e / z;
            }
        }
        let rg = self.needs(scores);
        Ok(self.push(Op::CausalColSoftmax(scores), out, rg))
    }

    /// Runs the chain rule backward from a scalar `loss` node and returns the
    /// adjoints of every gradient-requiring node. Forward values are left
    /// untouched.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::invalid_argument(format!(
                "loss must be scalar (1x1), got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec_unchecked(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue, // not on a path to the loss
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(&self.value(*b).transpose())?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).transpose().matmul(&g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone())?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0))?;
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.scale(*s))?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose())?;
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    for (gx, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if x <= 0.0 {
                            *gx = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::MaskMul(a, mask) => {
                    let mut ga = g.clone();
                    for (gx, &m) in ga.data_mut().iter_mut().zip(mask.data()) {
                        *gx *= m;
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sum(a) => {
                    let s = g[(0, 0)];
                    let (r, c) = self.value(*a).shape();
                    let ga = Matrix::from_vec_unchecked(r, c, vec![s; r * c]);
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Cols(a, start, _end) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            ga[(i, start + j)] = g[(i, j)];
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::FrobSq(a) => {
                    let ga = self.value(*a).scale(2.0 * g[(0, 0)]);
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let s = g[(0, 0)];
                    let batch = labels.len() as f64;
                    let mut ga = probs.clone();
                    for (j, &label) in labels.iter().enumerate() {
                        ga[(label, j)] -= 1.0;
                    }
                    accumulate(&mut grads, *logits, ga.scale(s / batch))?;
                }
                Op::CausalColSoftmax(a) => {
                    let p = &self.nodes[idx].value;
                    let (n, _) = p.shape();
                    let mut ga = Matrix::zeros(n, n);
                    for j in 0..n {
                        let dot: f64 = (0..=j).map(|i| g[(i, j)] * p[(i, j)]).sum();
                        for i in 0..=j {
                            ga[(i, j)] = p[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_inplace(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Compares an analytic gradient against central finite differences of `f`
/// at `m` and returns the largest relative error, where the per-entry
/// denominator is `max(1e-8, |analytic| + |numeric|)`.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&Matrix) -> Result<f64>,
    m: &Matrix,
    analytic: &Matrix,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid_argument(format!("h must be positive, got {h}")));
    }
    if m.shape() != analytic.shape() {
        return Err(Error::invalid_argument(format!(
            "analytic gradient shape {:?} does not match input shape {:?}",
            analytic.shape(),
            m.shape()
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let mut plus = m.clone();
            plus[(i, j)] += h;
            let mut minus = m.clone();
            minus[(i, j)] -= h;
            let numeric = (f(&plus)? - f(&minus)?) / (2.0 * h);
            let a = analytic[(i, j)];
            let denom = (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, Rng};

    /// Gradcheck helper: every entry of every differentiable leaf is
    /// perturbed and compared against the tape's analytic adjoint.
    fn check_leaves(
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
        leaves: &[Matrix],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();

        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(ids[li]).expect("leaf reached by backward");
            let mut f = |m: &Matrix| -> crate::error::Result<f64> {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = leaves
                    .iter()
                    .enumerate()
                    .map(|(i, orig)| t.leaf(if i == li { m.clone() } else { orig.clone() }, false))
                    .collect();
                let out = build(&mut t, &ids);
                Ok(t.value(out)[(0, 0)])
            };
            let err = finite_difference_check(&mut f, leaf, analytic, 1e-5).unwrap();
            assert!(err < tol, "leaf {li}: max relative error {err}");
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let m = tape.leaf(gaussian_matrix(2, 3, 1.0, &mut Rng::new(1)).unwrap(), true);
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(m).unwrap();
        assert_eq!(g.shape(), (2, 3));
        assert!(g.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn frobenius_of_product_matches_finite_differences() {
        let mut rng = Rng::new(17);
        let a = gaussian_matrix(3, 2, 1.0, &mut rng).unwrap();
        let b = gaussian_matrix(2, 4, 1.0, &mut rng).unwrap();
        check_leaves(
            |t, ids| {
                let ab = t.matmul(ids[0], ids[1]).unwrap();
                t.frob_sq(ab)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_at_zero_logits_has_closed_form() {
        let classes = 4;
        let batch = 3;
        let labels = vec![0usize, 2, 3];
        let mut tape = Tape::new();
        let logits = tape.leaf(Matrix::zeros(classes, batch), true);
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        assert!((tape.value(loss)[(0, 0)] - (classes as f64).ln()).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap();
        for j in 0..batch {
            for i in 0..classes {
                let onehot = if i == labels[j] { 1.0 } else { 0.0 };
                let expect = (1.0 / classes as f64 - onehot) / batch as f64;
                assert!((g[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_primitive_passes_gradcheck() {
        let mut rng = Rng::new(31);
        let a33 = gaussian_matrix(3, 3, 1.0, &mut rng).unwrap();
        let b33 = gaussian_matrix(3, 3, 1.0, &mut rng).unwrap();
        let a34 = gaussian_matrix(3, 4, 1.0, &mut rng).unwrap();
        let mask = {
            let mut m = Matrix::zeros(3, 4);
            for (i, x) in m.data_mut().iter_mut().enumerate() {
                *x = if i % 3 == 0 { 0.0 } else { 2.0 };
            }
            m
        };

        check_leaves(|t, ids| { let x = t.matmul(ids[0], ids[1]).unwrap(); t.frob_sq(x) }, &[a33.clone(), b33.clone()], 1e-6);
        check_leaves(|t, ids| { let x = t.add(ids[0], ids[1]).unwrap(); t.frob_sq(x) }, &[a33.clone(), b33.clone()], 1e-6);
        check_leaves(|t, ids| { let x = t.sub(ids[0], ids[1]).unwrap(); t.frob_sq(x) }, &[a33.clone(), b33.clone()], 1e-6);
        check_leaves(|t, ids| { let x = t.scale(ids[0], -1.7); t.frob_sq(x) }, &[a34.clone()], 1e-6);
        check_leaves(|t, ids| { let x = t.transpose(ids[0]); t.frob_sq(x) }, &[a34.clone()], 1e-6);
        check_leaves(|t, ids| { let x = t.relu(ids[0]); t.frob_sq(x) }, &[a34.clone()], 1e-6);
        let mask2 = mask.clone();
        check_leaves(move |t, ids| { let x = t.mask_mul(ids[0], mask2.clone()).unwrap(); t.frob_sq(x) }, &[a34.clone()], 1e-6);
        check_leaves(|t, ids| t.sum(ids[0]), &[a34.clone()], 1e-6);
        check_leaves(|t, ids| t.frob_sq(ids[0]), &[a34.clone()], 1e-6);
        check_leaves(|t, ids| { let x = t.cols(ids[0], 1, 3).unwrap(); t.frob_sq(x) }, &[a34.clone()], 1e-6);
        check_leaves(|t, ids| t.softmax_cross_entropy(ids[0], &[1, 0, 2, 1]).unwrap(), &[a34.clone()], 1e-6);
        // Weighted sum downstream of the softmax so every entry matters.
        let weights = b33.clone();
        check_leaves(
            move |t, ids| {
                let p = t.causal_col_softmax(ids[0]).unwrap();
                let x = t.mask_mul(p, weights.clone()).unwrap();
                t.sum(x)
            },
            &[a33.clone()],
            1e-6,
        );
    }

    #[test]
    fn reused_node_accumulates_both_paths() {
        // loss = |M + M|_F² = 4|M|_F², so grad must be 8M.
        let m = gaussian_matrix(2, 2, 1.0, &mut Rng::new(5)).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(m.clone(), true);
        let s = tape.add(id, id).unwrap();
        let loss = tape.frob_sq(s);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(id).unwrap();
        assert!(g.max_abs_diff(&m.scale(8.0)) < 1e-12);
    }

    #[test]
    fn backward_leaves_forward_values_untouched() {
        let mut rng = Rng::new(12);
        let a = gaussian_matrix(3, 2, 1.0, &mut rng).unwrap();
        let b = gaussian_matrix(2, 3, 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ia = tape.leaf(a, true);
        let ib = tape.leaf(b, true);
        let prod = tape.matmul(ia, ib).unwrap();
        let loss = tape.frob_sq(prod);
        let before: Vec<Matrix> = (0..=loss.0).map(|i| tape.value(NodeId(i)).clone()).collect();
        tape.backward(loss).unwrap();
        for (i, snap) in before.iter().enumerate() {
            assert_eq!(tape.value(NodeId(i)), snap, "node {i} mutated by backward");
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let m = tape.leaf(Matrix::zeros(2, 2), true);
        assert!(tape.backward(m).is_err());
    }

    #[test]
    fn constant_function_checks_clean() {
        let m = Matrix::zeros(3, 3);
        let mut f = |_: &Matrix| Ok(7.0);
        let err = finite_difference_check(&mut f, &m, &Matrix::zeros(3, 3), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::identity(2), false);
        let b = tape.leaf(Matrix::identity(2), true);
        let p = tape.matmul(a, b).unwrap();
        let loss = tape.frob_sq(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn causal_softmax_columns_are_masked_distributions() {
        let mut tape = Tape::new();
        let s = tape.leaf(gaussian_matrix(4, 4, 1.0, &mut Rng::new(3)).unwrap(), false);
        let p = tape.causal_col_softmax(s).unwrap();
        let v = tape.value(p);
        for j in 0..4 {
            let col_sum: f64 = (0..4).map(|i| v[(i, j)]).sum();
            assert!((col_sum - 1.0).abs() < 1e-12);
            for i in (j + 1)..4 {
                assert_eq!(v[(i, j)], 0.0, "masked entry ({i},{j}) leaked");
            }
        }
        // First column attends only to position 0.
        assert_eq!(v[(0, 0)], 1.0);
    }
}
