//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its output value, the ids of its inputs and
//! whatever activations its backward rule needs. `backward` walks the list in
//! exact reverse order and accumulates (`+=`) into input gradients, so a leaf
//! used at several timesteps receives the sum of all its contributions.

use super::gemm::{gemm, View, ViewMut};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    LnClamped(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Concat(Vec<Var>),
    Slice { x: Var, lo: usize },
    MeanRows(Var),
    Sum(Var),
    Select(Var, usize),
    Attention { qkv: Var, heads: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::OneMinus(..) => "one_minus",
            Op::LnClamped(..) => "ln_clamped",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat(..) => "concat_tokens",
            Op::Slice { .. } => "slice_tokens",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::Select(..) => "select",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Activations kept for the backward rule (normalized rows, attention
    /// probabilities, ...).
    saved: Vec<f64>,
}

/// Ordered record of executed ops. Inputs always precede their consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when the loss does
    /// not depend on it or it was registered without `requires_grad`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Registers an input tensor. Trainable parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Copies the current value of `var` into a fresh constant leaf, cutting
    /// the gradient path.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    /// Attention probabilities saved by an [`attention`](Tape::attention) node,
    /// laid out as `heads x n x n`.
    pub fn attention_probs(&self, var: Var) -> Option<(usize, usize, &[f64])> {
        let node = &self.nodes[var.0];
        match node.op {
            Op::Attention { heads, .. } => Some((heads, node.value.rows(), &node.saved)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, saved: Vec<f64>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(op.name().to_string()));
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::OneMinus(x)
            | Op::LnClamped(x, _)
            | Op::Gelu(x)
            | Op::SoftmaxRows(x)
            | Op::Slice { x, .. }
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::Select(x, _) => vec![*x],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Concat(parts) => parts.clone(),
            Op::Attention { qkv, .. } => vec![*qkv],
        }
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(var);
        if t.shape().len() != 2 {
            return Err(Error::contract(format!(
                "{op} expects a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    // ---- forward ops -------------------------------------------------------

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::rowmajor(self.value(a).data(), k),
            View::rowmajor(self.value(b).data(), n),
            0.0,
            ViewMut::rowmajor(&mut out, n),
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), Vec::new())
    }

    /// Adds a row vector `b` (length `cols`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if bv.numel() != xv.cols() || bv.rows() != 1 {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                for (o, &bias) in row.iter_mut().zip(bv.data()) {
                    *o += bias;
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddBias(x, b), Vec::new())
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), Vec::new())
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b), Vec::new())
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), Vec::new())
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| 1.0 - v);
        self.push(value, Op::OneMinus(x), Vec::new())
    }

    /// `ln(max(x, floor))` elementwise; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(floor).ln());
        self.push(value, Op::LnClamped(x, floor), Vec::new())
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu_scalar);
        self.push(value, Op::Gelu(x), Vec::new())
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::SoftmaxRows(x), Vec::new())
    }

    /// Row-wise layer normalization followed by `* gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm requires eps > 0"));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        // saved: normalized rows followed by one reciprocal std per row
        let mut saved = vec![0.0; rows * d + rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            saved[rows * d + r] = rstd;
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                saved[r * d + j] = xhat;
                out[r * d + j] = xhat * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::LayerNorm { x, gamma, beta }, saved)
    }

    /// Stacks matrices of equal width along the row axis.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_tokens needs at least one part"))?;
        let (_, d) = self.matrix_dims(first, "concat_tokens")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_tokens")?;
            if c != d {
                return Err(Error::Dimension {
                    op: "concat_tokens",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, d, data)?;
        self.push(value, Op::Concat(parts.to_vec()), Vec::new())
    }

    /// Rows `lo..hi` of a matrix.
    pub fn slice_tokens(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "slice_tokens")?;
        if lo > hi || hi > n {
            return Err(Error::Index {
                op: "slice_tokens",
                detail: format!("rows {lo}..{hi} of {n}"),
            });
        }
        let data = self.value(x).data()[lo * d..hi * d].to_vec();
        let value = Tensor::matrix(hi - lo, d, data)?;
        self.push(value, Op::Slice { x, lo }, Vec::new())
    }

    /// Mean over rows, producing a `1 x d` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "mean_rows")?;
        if n == 0 {
            return Err(Error::contract("mean_rows over zero rows"));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::matrix(1, d, out)?, Op::MeanRows(x), Vec::new())
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), Vec::new())
    }

    /// One element (flat row-major index) as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let v = *xv.data().get(index).ok_or_else(|| Error::Index {
            op: "select",
            detail: format!("element {index} of {:?}", xv.shape()),
        })?;
        self.push(Tensor::scalar(v), Op::Select(x, index), Vec::new())
    }

    /// Multi-head scaled dot-product self-attention without masking.
    ///
    /// `qkv` is `n x 3D` with queries, keys and values side by side; head `h`
    /// owns columns `h*D/heads..(h+1)*D/heads` of each block. Returns `n x D`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (n, w) = self.matrix_dims(qkv, "attention")?;
        if heads == 0 || w % 3 != 0 || (w / 3) % heads != 0 {
            return Err(Error::contract(format!(
                "attention: width {w} is not 3 * heads({heads}) * head_dim"
            )));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            gemm(
                n,
                dh,
                n,
                scale,
                View::at(src, h * dh, w, 1),
                View::at(src, d + h * dh, 1, w),
                0.0,
                ViewMut::rowmajor(p, n),
            );
            for row in p.chunks_mut(n) {
                softmax_in_place(row);
            }
            gemm(
                n,
                n,
                dh,
                1.0,
                View::rowmajor(p, n),
                View::at(src, 2 * d + h * dh, w, 1),
                0.0,
                ViewMut::at(&mut out, h * dh, d, 1),
            );
        }
        let value = Tensor::matrix(n, d, out)?;
        self.push(value, Op::Attention { qkv, heads }, probs)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::rowmajor(g, n),
                        View::transposed(bv.data(), n),
                        0.0,
                        ViewMut::rowmajor(&mut da, k),
                    );
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::transposed(av.data(), k),
                        View::rowmajor(g, n),
                        0.0,
                        ViewMut::rowmajor(&mut db, n),
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*b) {
                    let cols = self.value(*b).numel();
                    let mut db = vec![0.0; cols];
                    if cols > 0 {
                        for row in g.chunks(cols) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.iter().map(|v| v * f).collect()),
            Op::OneMinus(x) => accumulate(grads, *x, g.iter().map(|v| -v).collect()),
            Op::LnClamped(x, floor) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect();
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                if cols > 0 {
                    for ((dxr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        softmax_backward_row(yr, gr, dxr);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let xhat = &node.saved[..rows * d];
                let rstd = &node.saved[rows * d..];
                let gv = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xr[j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    accumulate(grads, *beta, db);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Slice { x, lo } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                dx[lo * d..lo * d + g.len()].copy_from_slice(g);
                accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (n, d) = (xv.rows(), xv.cols());
                let inv = 1.0 / n as f64;
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..d {
                        dx[r * d + j] = g[j] * inv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Select(x, index) => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                dx[*index] = g[0];
                accumulate(grads, *x, dx);
            }
            Op::Attention { qkv, heads } => {
                let dq = self.attention_backward(*qkv, *heads, &node.saved, g);
                accumulate(grads, *qkv, dq);
            }
        }
    }

    fn attention_backward(&self, qkv: Var, heads: usize, probs: &[f64], g: &[f64]) -> Vec<f64> {
        let src = self.value(qkv);
        let (n, w) = (src.rows(), src.cols());
        let src = src.data();
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = vec![0.0; n * w];
        let mut dp = vec![0.0; n * n];
        for h in 0..heads {
            let p = &probs[h * n * n..(h + 1) * n * n];
            // dP = dO * V^T
            gemm(
                n,
                dh,
                n,
                1.0,
                View::at(g, h * dh, d, 1),
                View::at(src, 2 * d + h * dh, 1, w),
                0.0,
                ViewMut::rowmajor(&mut dp, n),
            );
            // dV = P^T * dO
            gemm(
                n,
                n,
                dh,
                1.0,
                View::transposed(p, n),
                View::at(g, h * dh, d, 1),
                0.0,
                ViewMut::at(&mut dqkv, 2 * d + h * dh, w, 1),
            );
            // dS = P .* (dP - rowsum(dP .* P)), then the 1/sqrt(dh) scale
            for (dpr, pr) in dp.chunks_mut(n).zip(p.chunks(n)) {
                let dot: f64 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, &pv) in dpr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            // dQ = dS * K ; dK = dS^T * Q
            gemm(
                n,
                n,
                dh,
                1.0,
                View::rowmajor(&dp, n),
                View::at(src, d + h * dh, w, 1),
                0.0,
                ViewMut::at(&mut dqkv, h * dh, w, 1),
            );
            gemm(
                n,
                n,
                dh,
                1.0,
                View::transposed(&dp, n),
                View::at(src, h * dh, w, 1),
                0.0,
                ViewMut::at(&mut dqkv, d + h * dh, w, 1),
            );
        }
        dqkv
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn softmax_backward_row(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
        *d = yv * (gv - dot);
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}
