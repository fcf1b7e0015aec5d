//! Dense-tensor algebra with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it executes (dynamic tape). Values
//! are 64-bit floats in row-major order. [`Tape::backward`] walks the record
//! in reverse, accumulating gradients additively at fan-out points.
//!
//! Shapes are either `[n]` (vector) or `[n, m]` (matrix); scalars are `[1]`.

use crate::error::{Error, Result};
use std::cell::RefCell;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Debug)]
pub struct Tensor {
    pub id: usize,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1 && self.shape.len() == 1
    }
}

enum Op {
    Leaf,
    /// `[n,k] x [k,m] -> [n,m]`
    MatMul(usize, usize),
    /// `[n,k] x [m,k]^T -> [n,m]`
    MatMulNt(usize, usize),
    /// `[n,k] x [k] -> [n]`
    MatVec(usize, usize),
    /// `[n,m] + [m]` broadcast over rows
    AddRowVec(usize, usize),
    Add(usize, usize),
    ScaleConst(usize, f64),
    AddConst(usize),
    /// elementwise multiply by a scalar tensor
    MulScalar(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    SoftmaxRows(usize),
    ConcatCols(usize, usize),
    RowMean(usize),
    MeanVec(usize),
    /// row-wise dot product of two `[n,m]` tensors -> `[n]`
    RowDot(usize, usize),
    /// row-wise cosine similarity of two `[n,m]` tensors -> `[n]`
    CosineRows(usize, usize),
    /// fused asymmetric loss over probabilities -> scalar
    AslLoss {
        probs: usize,
        targets: Vec<f64>,
        gamma_pos: f64,
        gamma_neg: f64,
        eps: f64,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

/// Record of executed operations; grows monotonically, so node ids are
/// already a topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
///
/// Calling [`Tape::backward_into`] repeatedly with the same `Grads`
/// accumulates (gradients add up); use a fresh `Grads` to reset.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, shape: shape.clone(), values, requires_grad });
        Tensor { id: nodes.len() - 1, shape }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Copy of a node's current values.
    pub fn values(&self, t: &Tensor) -> Vec<f64> {
        self.nodes.borrow()[t.id].values.clone()
    }

    pub fn scalar_value(&self, t: &Tensor) -> f64 {
        self.nodes.borrow()[t.id].values[0]
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        self.push(Op::Leaf, shape, values, false)
    }

    /// Differentiable leaf (parameter or traced input).
    pub fn leaf(&self, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        self.push(Op::Leaf, shape, values, true)
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::Dimension(format!(
                "matmul: {:?} x {:?}",
                a.shape, b.shape
            )));
        }
        let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
        let (av, bv) = {
            let nodes = self.nodes.borrow();
            (nodes[a.id].values.clone(), nodes[b.id].values.clone())
        };
        let out = matmul_raw(&av, &bv, n, k, m);
        let rg = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::MatMul(a.id, b.id), vec![n, m], out, rg))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
            return Err(Error::Dimension(format!(
                "matmul_nt: {:?} x {:?}^T",
                a.shape, b.shape
            )));
        }
        let (n, k, m) = (a.shape[0], a.shape[1], b.shape[0]);
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.id].values, &nodes[b.id].values);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += av[i * k + t] * bv[j * k + t];
                }
                out[i * m + j] = s;
            }
        }
        drop(nodes);
        let rg = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::MatMulNt(a.id, b.id), vec![n, m], out, rg))
    }

    pub fn matvec(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || v.shape.len() != 1 || a.shape[1] != v.shape[0] {
            return Err(Error::Dimension(format!(
                "matvec: {:?} x {:?}",
                a.shape, v.shape
            )));
        }
        let (n, k) = (a.shape[0], a.shape[1]);
        let nodes = self.nodes.borrow();
        let (av, vv) = (&nodes[a.id].values, &nodes[v.id].values);
        let out: Vec<f64> = (0..n)
            .map(|i| (0..k).map(|j| av[i * k + j] * vv[j]).sum())
            .collect();
        drop(nodes);
        let rg = self.requires(a.id) || self.requires(v.id);
        Ok(self.push(Op::MatVec(a.id, v.id), vec![n], out, rg))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let nodes = self.nodes.borrow();
        let out: Vec<f64> = nodes[a.id]
            .values
            .iter()
            .zip(&nodes[b.id].values)
            .map(|(x, y)| x + y)
            .collect();
        drop(nodes);
        let rg = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::Add(a.id, b.id), a.shape.clone(), out, rg))
    }

    pub fn add_row_vec(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || v.shape.len() != 1 || a.shape[1] != v.shape[0] {
            return Err(Error::Dimension(format!(
                "add_row_vec: {:?} + {:?}",
                a.shape, v.shape
            )));
        }
        let (n, m) = (a.shape[0], a.shape[1]);
        let nodes = self.nodes.borrow();
        let (av, vv) = (&nodes[a.id].values, &nodes[v.id].values);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(av[i * m + j] + vv[j]);
            }
        }
        drop(nodes);
        let rg = self.requires(a.id) || self.requires(v.id);
        Ok(self.push(Op::AddRowVec(a.id, v.id), vec![n, m], out, rg))
    }

    /// `x W (+ b)`.
    pub fn linear(&self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_vec(&y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        let out: Vec<f64> = self.nodes.borrow()[a.id].values.iter().map(|x| x * c).collect();
        let rg = self.requires(a.id);
        self.push(Op::ScaleConst(a.id, c), a.shape.clone(), out, rg)
    }

    pub fn add_const(&self, a: &Tensor, c: f64) -> Tensor {
        let out: Vec<f64> = self.nodes.borrow()[a.id].values.iter().map(|x| x + c).collect();
        let rg = self.requires(a.id);
        self.push(Op::AddConst(a.id), a.shape.clone(), out, rg)
    }

    pub fn mul_scalar(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if !s.is_scalar() {
            return Err(Error::Contract(format!(
                "mul_scalar: multiplier must be scalar, got {:?}",
                s.shape
            )));
        }
        let nodes = self.nodes.borrow();
        let sv = nodes[s.id].values[0];
        let out: Vec<f64> = nodes[a.id].values.iter().map(|x| x * sv).collect();
        drop(nodes);
        let rg = self.requires(a.id) || self.requires(s.id);
        Ok(self.push(Op::MulScalar(a.id, s.id), a.shape.clone(), out, rg))
    }

    pub fn sigmoid(&self, a: &Tensor) -> Tensor {
        let out: Vec<f64> = self.nodes.borrow()[a.id]
            .values
            .iter()
            .map(|&x| sigmoid_scalar(x))
            .collect();
        let rg = self.requires(a.id);
        self.push(Op::Sigmoid(a.id), a.shape.clone(), out, rg)
    }

    pub fn tanh(&self, a: &Tensor) -> Tensor {
        let out: Vec<f64> = self.nodes.borrow()[a.id].values.iter().map(|x| x.tanh()).collect();
        let rg = self.requires(a.id);
        self.push(Op::Tanh(a.id), a.shape.clone(), out, rg)
    }

    pub fn relu(&self, a: &Tensor) -> Tensor {
        let out: Vec<f64> = self.nodes.borrow()[a.id].values.iter().map(|x| x.max(0.0)).collect();
        let rg = self.requires(a.id);
        self.push(Op::Relu(a.id), a.shape.clone(), out, rg)
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || a.shape[1] == 0 {
            return Err(Error::Dimension(format!(
                "softmax_rows: need [n,m] with m >= 1, got {:?}",
                a.shape
            )));
        }
        let (n, m) = (a.shape[0], a.shape[1]);
        let nodes = self.nodes.borrow();
        let av = &nodes[a.id].values;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                out[i * m + j] /= sum;
            }
        }
        drop(nodes);
        let rg = self.requires(a.id);
        Ok(self.push(Op::SoftmaxRows(a.id), vec![n, m], out, rg))
    }

    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
            return Err(Error::Dimension(format!(
                "concat_cols: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let (n, p, q) = (a.shape[0], a.shape[1], b.shape[1]);
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.id].values, &nodes[b.id].values);
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        drop(nodes);
        let rg = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::ConcatCols(a.id, b.id), vec![n, p + q], out, rg))
    }

    pub fn row_mean(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || a.shape[0] == 0 {
            return Err(Error::EmptyInput(format!(
                "row_mean: need [n,m] with n >= 1, got {:?}",
                a.shape
            )));
        }
        let (n, m) = (a.shape[0], a.shape[1]);
        let nodes = self.nodes.borrow();
        let av = &nodes[a.id].values;
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += av[i * m + j];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        drop(nodes);
        let rg = self.requires(a.id);
        Ok(self.push(Op::RowMean(a.id), vec![m], out, rg))
    }

    pub fn mean_vec(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 1 || a.shape[0] == 0 {
            return Err(Error::EmptyInput(format!(
                "mean_vec: need nonempty vector, got {:?}",
                a.shape
            )));
        }
        let nodes = self.nodes.borrow();
        let av = &nodes[a.id].values;
        let mean = av.iter().sum::<f64>() / av.len() as f64;
        drop(nodes);
        let rg = self.requires(a.id);
        Ok(self.push(Op::MeanVec(a.id), vec![1], vec![mean], rg))
    }

    pub fn row_dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape || a.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "row_dot: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let (n, m) = (a.shape[0], a.shape[1]);
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.id].values, &nodes[b.id].values);
        let out: Vec<f64> = (0..n)
            .map(|i| (0..m).map(|j| av[i * m + j] * bv[i * m + j]).sum())
            .collect();
        drop(nodes);
        let rg = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::RowDot(a.id, b.id), vec![n], out, rg))
    }

    /// Cosine similarity of corresponding rows; rejects rows with norm
    /// below 1e-12.
    pub fn cosine_rows(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape || a.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "cosine_rows: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let (n, m) = (a.shape[0], a.shape[1]);
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.id].values, &nodes[b.id].values);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let ar = &av[i * m..(i + 1) * m];
            let br = &bv[i * m..(i + 1) * m];
            let na = norm(ar);
            let nb = norm(br);
            if na < 1e-12 || nb < 1e-12 {
                return Err(Error::Degenerate(format!(
                    "cosine_rows: row {i} has near-zero norm ({na:.3e}, {nb:.3e})"
                )));
            }
            let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            out.push(dot / (na * nb));
        }
        drop(nodes);
        let rg = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::CosineRows(a.id, b.id), vec![n], out, rg))
    }

    /// Asymmetric loss (mean over labels) with separate focusing exponents
    /// for positives and negatives; log arguments are clamped to `>= eps`.
    pub fn asl_loss(
        &self,
        probs: &Tensor,
        targets: &[f64],
        gamma_pos: f64,
        gamma_neg: f64,
        eps: f64,
    ) -> Result<Tensor> {
        if probs.shape.len() != 1 || probs.shape[0] != targets.len() {
            return Err(Error::Dimension(format!(
                "asl_loss: probs {:?} vs {} targets",
                probs.shape,
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Label(format!(
                "asl_loss: target entry {bad} outside {{0,1}}"
            )));
        }
        let nodes = self.nodes.borrow();
        let pv = &nodes[probs.id].values;
        let c = targets.len() as f64;
        let mut loss = 0.0;
        for (p, y) in pv.iter().zip(targets) {
            loss += asl_term(*p, *y, gamma_pos, gamma_neg, eps);
        }
        loss = -loss / c;
        drop(nodes);
        let rg = self.requires(probs.id);
        Ok(self.push(
            Op::AslLoss {
                probs: probs.id,
                targets: targets.to_vec(),
                gamma_pos,
                gamma_neg,
                eps,
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    /// Reverse pass from a scalar loss; returns fresh gradient buffers.
    pub fn backward(&self, loss: &Tensor) -> Result<Grads> {
        let mut grads = Grads { grads: vec![None; self.nodes.borrow().len()] };
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Reverse pass accumulating into existing buffers.
    pub fn backward_into(&self, loss: &Tensor, grads: &mut Grads) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape
            )));
        }
        let nodes = self.nodes.borrow();
        if grads.grads.len() < nodes.len() {
            grads.grads.resize(nodes.len(), None);
        }
        let seed = grads.grads[loss.id].get_or_insert_with(|| vec![0.0; 1]);
        seed[0] += 1.0;
        // Node ids are a topological order of the recorded graph; visiting
        // in reverse id order visits each node after all its consumers.
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(&nodes, id, &g, grads);
            grads.grads[id] = Some(g);
        }
        Ok(())
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&self, nodes: &[Node], id: usize, g: &[f64], grads: &mut Grads) {
        let mut accum = |tid: usize, delta: Vec<f64>| {
            if !nodes[tid].requires_grad {
                return;
            }
            let buf = grads.grads[tid].get_or_insert_with(|| vec![0.0; nodes[tid].values.len()]);
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let m = nodes[*b].shape[1];
                let (av, bv) = (&nodes[*a].values, &nodes[*b].values);
                // dA = G B^T
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for t in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[i * m + j] * bv[t * m + j];
                        }
                        da[i * k + t] = s;
                    }
                }
                accum(*a, da);
                // dB = A^T G
                let mut db = vec![0.0; k * m];
                for t in 0..k {
                    for j in 0..m {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += av[i * k + t] * g[i * m + j];
                        }
                        db[t * m + j] = s;
                    }
                }
                accum(*b, db);
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let m = nodes[*b].shape[0];
                let (av, bv) = (&nodes[*a].values, &nodes[*b].values);
                // out = A B^T ; dA = G B ; dB = G^T A
                let da = matmul_raw(g, bv, n, m, k);
                accum(*a, da);
                let mut db = vec![0.0; m * k];
                for j in 0..m {
                    for t in 0..k {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += g[i * m + j] * av[i * k + t];
                        }
                        db[j * k + t] = s;
                    }
                }
                accum(*b, db);
            }
            Op::MatVec(a, v) => {
                let (n, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let (av, vv) = (&nodes[*a].values, &nodes[*v].values);
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..k {
                        da[i * k + j] = g[i] * vv[j];
                    }
                }
                accum(*a, da);
                let mut dv = vec![0.0; k];
                for i in 0..n {
                    for j in 0..k {
                        dv[j] += g[i] * av[i * k + j];
                    }
                }
                accum(*v, dv);
            }
            Op::AddRowVec(a, v) => {
                let (n, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                accum(*a, g.to_vec());
                let mut dv = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        dv[j] += g[i * m + j];
                    }
                }
                accum(*v, dv);
            }
            Op::Add(a, b) => {
                accum(*a, g.to_vec());
                accum(*b, g.to_vec());
            }
            Op::ScaleConst(a, c) => {
                accum(*a, g.iter().map(|x| x * c).collect());
            }
            Op::AddConst(a) => {
                accum(*a, g.to_vec());
            }
            Op::MulScalar(a, s) => {
                let sv = nodes[*s].values[0];
                accum(*a, g.iter().map(|x| x * sv).collect());
                let ds: f64 = g.iter().zip(&nodes[*a].values).map(|(x, y)| x * y).sum();
                accum(*s, vec![ds]);
            }
            Op::Sigmoid(a) => {
                let y = &nodes[id].values;
                accum(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect());
            }
            Op::Tanh(a) => {
                let y = &nodes[id].values;
                accum(*a, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect());
            }
            Op::Relu(a) => {
                let x = &nodes[*a].values;
                // subgradient at 0 is 0
                accum(*a, g.iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect());
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = (nodes[id].shape[0], nodes[id].shape[1]);
                let y = &nodes[id].values;
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    let gy: f64 = (0..m).map(|j| g[i * m + j] * y[i * m + j]).sum();
                    for j in 0..m {
                        da[i * m + j] = y[i * m + j] * (g[i * m + j] - gy);
                    }
                }
                accum(*a, da);
            }
            Op::ConcatCols(a, b) => {
                let (n, p) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let q = nodes[*b].shape[1];
                let mut da = vec![0.0; n * p];
                let mut db = vec![0.0; n * q];
                for i in 0..n {
                    da[i * p..(i + 1) * p].copy_from_slice(&g[i * (p + q)..i * (p + q) + p]);
                    db[i * q..(i + 1) * q].copy_from_slice(&g[i * (p + q) + p..(i + 1) * (p + q)]);
                }
                accum(*a, da);
                accum(*b, db);
            }
            Op::RowMean(a) => {
                let (n, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let inv = 1.0 / n as f64;
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] = g[j] * inv;
                    }
                }
                accum(*a, da);
            }
            Op::MeanVec(a) => {
                let n = nodes[*a].shape[0];
                let inv = g[0] / n as f64;
                accum(*a, vec![inv; n]);
            }
            Op::RowDot(a, b) => {
                let (n, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let (av, bv) = (&nodes[*a].values, &nodes[*b].values);
                let mut da = vec![0.0; n * m];
                let mut db = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] = g[i] * bv[i * m + j];
                        db[i * m + j] = g[i] * av[i * m + j];
                    }
                }
                accum(*a, da);
                accum(*b, db);
            }
            Op::CosineRows(a, b) => {
                let (n, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let (av, bv) = (&nodes[*a].values, &nodes[*b].values);
                let cosv = &nodes[id].values;
                let mut da = vec![0.0; n * m];
                let mut db = vec![0.0; n * m];
                for i in 0..n {
                    let ar = &av[i * m..(i + 1) * m];
                    let br = &bv[i * m..(i + 1) * m];
                    let na = norm(ar);
                    let nb = norm(br);
                    let c = cosv[i];
                    for j in 0..m {
                        da[i * m + j] = g[i] * (br[j] / (na * nb) - c * ar[j] / (na * na));
                        db[i * m + j] = g[i] * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                    }
                }
                accum(*a, da);
                accum(*b, db);
            }
            Op::AslLoss { probs, targets, gamma_pos, gamma_neg, eps } => {
                let pv = &nodes[*probs].values;
                let c = targets.len() as f64;
                let mut dp = vec![0.0; pv.len()];
                for (j, (p, y)) in pv.iter().zip(targets).enumerate() {
                    dp[j] = -g[0] / c * asl_term_dp(*p, *y, *gamma_pos, *gamma_neg, *eps);
                }
                accum(*probs, dp);
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += av * b[t * m + j];
            }
        }
    }
    out
}

/// One (un-negated, un-averaged) term of the asymmetric loss.
fn asl_term(p: f64, y: f64, gamma_pos: f64, gamma_neg: f64, eps: f64) -> f64 {
    if y == 1.0 {
        (1.0 - p).powf(gamma_pos) * p.max(eps).ln()
    } else {
        p.powf(gamma_neg) * (1.0 - p).max(eps).ln()
    }
}

/// Derivative of [`asl_term`] w.r.t. `p`.
fn asl_term_dp(p: f64, y: f64, gamma_pos: f64, gamma_neg: f64, eps: f64) -> f64 {
    if y == 1.0 {
        let pow = (1.0 - p).powf(gamma_pos);
        let dlog = if p > eps { pow / p } else { 0.0 };
        let dpow = if gamma_pos == 0.0 {
            0.0
        } else {
            -gamma_pos * (1.0 - p).powf(gamma_pos - 1.0) * p.max(eps).ln()
        };
        dlog + dpow
    } else {
        let pow = p.powf(gamma_neg);
        let dlog = if 1.0 - p > eps { -pow / (1.0 - p) } else { 0.0 };
        let dpow = if gamma_neg == 0.0 {
            0.0
        } else {
            gamma_neg * p.powf(gamma_neg - 1.0) * (1.0 - p).max(eps).ln()
        };
        dlog + dpow
    }
}

/// Per-parameter result of a central-difference gradient comparison.
#[derive(Debug)]
pub struct FiniteDiffReport {
    /// `(name, max relative error over entries)`
    pub per_param: Vec<(String, f64)>,
}

impl FiniteDiffReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Compares autodiff gradients against a five-point finite-difference
/// stencil.
///
/// `f` evaluates the scalar objective at the given parameter values;
/// `grads[i]` must hold the autodiff gradient for `params[i]`. The step for
/// entry `t` is `h_scale * max(1, |t|)`. The fourth-order stencil
/// `(f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h` keeps truncation error below
/// roundoff at moderate step sizes, which a plain central difference cannot
/// do on objectives with steep third derivatives. `f` is evaluated twice at
/// the baseline first; if the two values differ, the function is not
/// deterministic and an error is returned.
pub fn finite_diff_check<F>(
    f: F,
    params: &mut [(String, Vec<f64>)],
    grads: &[Vec<f64>],
    h_scale: f64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&[(String, Vec<f64>)]) -> Result<f64>,
{
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "finite_diff_check: {} grads for {} params",
            grads.len(),
            params.len()
        )));
    }
    let base1 = f(params)?;
    let base2 = f(params)?;
    if base1 != base2 {
        return Err(Error::Determinism(format!(
            "finite_diff_check: baseline evaluations differ ({base1} vs {base2})"
        )));
    }
    let mut per_param = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut max_err: f64 = 0.0;
        for t in 0..params[i].1.len() {
            let orig = params[i].1[t];
            let h = h_scale * orig.abs().max(1.0);
            let mut eval_at = |v: f64| -> Result<f64> {
                params[i].1[t] = v;
                let out = f(params);
                params[i].1[t] = orig;
                out
            };
            let fp1 = eval_at(orig + h)?;
            let fm1 = eval_at(orig - h)?;
            let fp2 = eval_at(orig + 2.0 * h)?;
            let fm2 = eval_at(orig - 2.0 * h)?;
            let numeric = (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * h);
            let analytic = grads[i][t];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            max_err = max_err.max(rel);
        }
        per_param.push((params[i].0.clone(), max_err));
    }
    Ok(FiniteDiffReport { per_param })
}
