//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive in evaluation order, so the node list
//! is already topologically sorted and backward is a single reverse sweep.
//! Leaves created with [`Graph::param`] receive gradients; leaves created
//! with [`Graph::constant`] (frozen weights, teacher logits, noise) do not,
//! and no backward work is done on paths that never reach a parameter.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::rope::RopeTable;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Silu,
    Gelu,
    Tanh,
    Exp,
    Log,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: f32 },
    Offset { a: Var },
    Unary { a: Var, kind: Unary },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    SumCols { a: Var },
    MeanRows { a: Var },
    MaxAll { a: Var, argmax: usize },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    RepeatCols { a: Var, times: usize },
    Reshape { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, w: Var, eps: f32 },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f32 },
    Rope { a: Var, table: Arc<RopeTable> },
    UnionRows { a: Var },
    StraightThrough { soft: Var },
    Gather { a: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`], returned from [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

/// `b` broadcasts onto `a` when it is a scalar or a trailing suffix of `a`.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let b = strip_leading_ones(b);
    if b.iter().product::<usize>() == 1 {
        return true;
    }
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * INV_SQRT2))
}

const INV_SQRT2: f32 = std::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

impl Unary {
    fn forward(self, x: f32) -> f32 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => silu(x),
            Unary::Gelu => gelu(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Gelu => {
                0.5 * (1.0 + libm::erff(x * INV_SQRT2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant leaf sharing storage with an existing tensor (frozen weights).
    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = Arc::clone(&self.nodes[v.0].value);
        self.constant_shared(t)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), b_strides, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    // ---- elementwise ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcastable(av.shape(), bv.shape()) {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let bn = bv.numel();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bn]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, k }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::Offset { a }, rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = self.value(a).map(|x| kind.forward(x));
        let rg = self.rg(a);
        self.push(t, Op::Unary { a, kind }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    // ---- softmax family (last axis) ----

    pub fn softmax(&mut self, a: Var) -> Var {
        let t = softmax_rows(self.value(a), false);
        let rg = self.rg(a);
        self.push(t, Op::Softmax { a }, rg)
    }

    /// Softmax over keys `j ≤ i` for each query row `i`; masked entries are 0.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rows() > v.cols() {
            return Err(Error::shape("causal_softmax", v.shape(), &[v.rows(), v.rows()]));
        }
        let t = softmax_rows(v, true);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { a }, rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(c) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&x| ((x - m) as f64).exp()).sum::<f64>().ln() as f32 + m;
            out.extend(row.iter().map(|&x| x - lse));
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax { a }, rg)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&x| x as f64).sum::<f64>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().map(|&x| x as f64).sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::MeanAll { a }, rg)
    }

    /// Sum over the trailing axis: `[r × c] → [r]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let out = v
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|&x| x as f64).sum::<f64>() as f32)
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(out), Op::SumCols { a }, rg)
    }

    /// Mean over rows: `[r × c] → [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (r, c) = (v.rows(), v.cols());
        let mut acc = vec![0.0f64; c];
        for row in v.data().chunks(c) {
            for (s, &x) in acc.iter_mut().zip(row) {
                *s += x as f64;
            }
        }
        let out = acc.into_iter().map(|s| (s / r as f64) as f32).collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(out), Op::MeanRows { a }, rg)
    }

    /// Maximum element; the gradient goes to the first maximal index.
    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::invalid("max_all", "empty tensor"));
        }
        let mut argmax = 0;
        for (i, &x) in v.data().iter().enumerate() {
            if x > v.data()[argmax] {
                argmax = i;
            }
        }
        let m = v.data()[argmax];
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::MaxAll { a, argmax }, rg))
    }

    // ---- structural ----

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let c = v.cols();
        if start + len > c {
            return Err(Error::shape("slice_cols", v.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(v.rows() * len);
        for row in v.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(vec![v.rows(), len], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceCols { a, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let c = v.cols();
        if start + len > v.rows() {
            return Err(Error::shape("slice_rows", v.shape(), &[start, len]));
        }
        let t = Tensor::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows { a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), v.shape()));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Tile the trailing axis: `[r × c] → [r × (c·times)]`.
    pub fn repeat_cols(&mut self, a: Var, times: usize) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = Vec::with_capacity(v.numel() * times);
        for row in v.data().chunks(c) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let t = Tensor::new(vec![v.rows(), c * times], out).expect("tile");
        let rg = self.rg(a);
        self.push(t, Op::RepeatCols { a, times }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = (*self.value(a)).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid(
                    "embedding",
                    format!("token id {id} out of range for vocabulary {vocab}"),
                ));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Row-wise `x / rms(x) ⊙ w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f32) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let c = xv.cols();
        if wv.numel() != c {
            return Err(Error::shape("rms_norm", xv.shape(), wv.shape()));
        }
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let inv = rms_inv(row, eps);
            out.extend(row.iter().zip(wv.data()).map(|(&v, &g)| v * inv * g));
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::RmsNorm { x, w, eps }, rg))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let (mu, inv) = mean_inv_std(row, eps);
            out.extend(
                row.iter()
                    .zip(gv.data().iter().zip(bv.data()))
                    .map(|(&v, (&g, &b))| (v - mu) * inv * g + b),
            );
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    /// Rotary embedding over each block of `2·table.half()` columns; row `t`
    /// is position `t`.
    pub fn rope(&mut self, a: Var, table: Arc<RopeTable>) -> Result<Var> {
        let v = self.value(a);
        let block = 2 * table.half();
        if block == 0 || v.cols() % block != 0 {
            return Err(Error::shape("rope", v.shape(), &[block]));
        }
        let mut data = v.data().to_vec();
        table.rotate(&mut data, v.cols(), false);
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Rope { a, table }, rg))
    }

    /// Soft union of binary rows: `1 − ∏ᵣ (1 − a[r, ·])`, `[r × c] → [c]`.
    pub fn union_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut prod = vec![1.0f32; c];
        for row in v.data().chunks(c) {
            for (p, &x) in prod.iter_mut().zip(row) {
                *p *= 1.0 - x;
            }
        }
        let out = prod.into_iter().map(|p| 1.0 - p).collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(out), Op::UnionRows { a }, rg)
    }

    /// Forward value `hard`; backward passes the cotangent to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", self.shape(soft), hard.shape()));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough { soft }, rg))
    }

    /// `out[r] = a[r, idx[r]]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if idx.len() != v.rows() {
            return Err(Error::shape("gather", v.shape(), &[idx.len()]));
        }
        let c = v.cols();
        let mut out = Vec::with_capacity(idx.len());
        for (r, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::invalid("gather", format!("index {j} out of range {c}")));
            }
            out.push(v.data()[r * c + j]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Gather { a, idx: idx.to_vec() }, rg))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduce a full-shape cotangent onto a broadcast operand's shape.
    fn reduce_to(&self, g: Vec<f32>, target: Var) -> Tensor {
        let shape = self.shape(target).to_vec();
        let n: usize = shape.iter().product();
        if n == g.len() {
            return Tensor::new(shape, g).expect("same size");
        }
        let mut out = vec![0.0f32; n];
        for (i, x) in g.into_iter().enumerate() {
            out[i % n] += x;
        }
        Tensor::new(shape, out).expect("reduced")
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                if self.rg(a) {
                    // da = g · op(b)ᵀ
                    let mut da = vec![0.0; m * k];
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    gemm(m, n, k, gd, (n, 1), bv.data(), bs, &mut da, false);
                    self.accumulate(grads, a, Tensor::new(vec![m, k], da)?);
                }
                if self.rg(b) {
                    if trans_b {
                        // b is n×k: db = gᵀ · a
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, gd, (1, n), av.data(), (k, 1), &mut db, false);
                        self.accumulate(grads, b, Tensor::new(vec![n, k], db)?);
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), (1, k), gd, (n, 1), &mut db, false);
                        self.accumulate(grads, b, Tensor::new(vec![k, n], db)?);
                    }
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g.clone());
                if self.rg(b) {
                    let t = self.reduce_to(gd.to_vec(), b);
                    self.accumulate(grads, b, t);
                }
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, g.clone());
                if self.rg(b) {
                    let t = self.reduce_to(gd.iter().map(|x| -x).collect(), b);
                    self.accumulate(grads, b, t);
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let bn = bv.numel();
                if self.rg(a) {
                    let da = gd.iter().enumerate().map(|(j, &x)| x * bv.data()[j % bn]).collect();
                    self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.rg(b) {
                    let db = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    let t = self.reduce_to(db, b);
                    self.accumulate(grads, b, t);
                }
            }
            &Op::Scale { a, k } => {
                self.accumulate(grads, a, g.map(|x| x * k));
            }
            &Op::Offset { a } | &Op::Reshape { a } | &Op::StraightThrough { soft: a } => {
                let t = Tensor::new(self.shape(a).to_vec(), gd.to_vec())?;
                self.accumulate(grads, a, t);
            }
            &Op::Unary { a, kind } => {
                let xv = self.value(a);
                let da = gd
                    .iter()
                    .zip(xv.data().iter().zip(out.data()))
                    .map(|(&gg, (&x, &y))| gg * kind.derivative(x, y))
                    .collect();
                self.accumulate(grads, a, Tensor::new(xv.shape().to_vec(), da)?);
            }
            &Op::Softmax { a } => {
                let c = out.cols();
                let mut da = Vec::with_capacity(out.numel());
                for (y, gg) in out.data().chunks(c).zip(gd.chunks(c)) {
                    let dot: f64 = y.iter().zip(gg).map(|(&p, &q)| (p * q) as f64).sum();
                    let dot = dot as f32;
                    da.extend(y.iter().zip(gg).map(|(&p, &q)| p * (q - dot)));
                }
                self.accumulate(grads, a, Tensor::new(out.shape().to_vec(), da)?);
            }
            &Op::LogSoftmax { a } => {
                let c = out.cols();
                let mut da = Vec::with_capacity(out.numel());
                for (y, gg) in out.data().chunks(c).zip(gd.chunks(c)) {
                    let s: f64 = gg.iter().map(|&x| x as f64).sum();
                    let s = s as f32;
                    da.extend(y.iter().zip(gg).map(|(&ly, &q)| q - ly.exp() * s));
                }
                self.accumulate(grads, a, Tensor::new(out.shape().to_vec(), da)?);
            }
            &Op::SumAll { a } => {
                let s = self.shape(a).to_vec();
                self.accumulate(grads, a, Tensor::full(&s, gd[0]));
            }
            &Op::MeanAll { a } => {
                let s = self.shape(a).to_vec();
                let n = self.value(a).numel().max(1) as f32;
                self.accumulate(grads, a, Tensor::full(&s, gd[0] / n));
            }
            &Op::SumCols { a } => {
                let av = self.value(a);
                let c = av.cols();
                let mut da = Vec::with_capacity(av.numel());
                for &x in gd {
                    da.extend(std::iter::repeat_n(x, c));
                }
                self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
            }
            &Op::MeanRows { a } => {
                let av = self.value(a);
                let r = av.rows() as f32;
                let mut da = Vec::with_capacity(av.numel());
                for _ in 0..av.rows() {
                    da.extend(gd.iter().map(|&x| x / r));
                }
                self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
            }
            &Op::MaxAll { a, argmax } => {
                let mut t = Tensor::zeros(self.shape(a));
                t.data_mut()[argmax] = gd[0];
                self.accumulate(grads, a, t);
            }
            &Op::SliceCols { a, start } => {
                let av = self.value(a);
                let c = av.cols();
                let len = out.cols();
                let mut da = vec![0.0; av.numel()];
                for (r, gg) in gd.chunks(len).enumerate() {
                    da[r * c + start..r * c + start + len].copy_from_slice(gg);
                }
                self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
            }
            &Op::SliceRows { a, start } => {
                let av = self.value(a);
                let c = av.cols();
                let mut da = vec![0.0; av.numel()];
                da[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
            }
            Op::ConcatCols { parts } => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(pv.numel());
                        for row in gd.chunks(total) {
                            dp.extend_from_slice(&row[off..off + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), dp)?);
                    }
                    off += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.numel();
                    if self.rg(p) {
                        let t = Tensor::new(pv.shape().to_vec(), gd[off..off + n].to_vec())?;
                        self.accumulate(grads, p, t);
                    }
                    off += n;
                }
            }
            &Op::RepeatCols { a, times } => {
                let av = self.value(a);
                let c = av.cols();
                let mut da = vec![0.0; av.numel()];
                for (r, row) in gd.chunks(c * times).enumerate() {
                    for rep in row.chunks(c) {
                        for (d, &x) in da[r * c..(r + 1) * c].iter_mut().zip(rep) {
                            *d += x;
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (x, &y) in dt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), dt)?);
            }
            &Op::RmsNorm { x, w, eps } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let c = xv.cols();
                let mut dx = Vec::with_capacity(xv.numel());
                let mut dw = vec![0.0f32; c];
                for (row, gg) in xv.data().chunks(c).zip(gd.chunks(c)) {
                    let inv = rms_inv(row, eps);
                    let mut dot = 0.0f64;
                    for j in 0..c {
                        let xh = row[j] * inv;
                        dw[j] += gg[j] * xh;
                        dot += (gg[j] * wv.data()[j] * xh) as f64;
                    }
                    let dot = (dot / c as f64) as f32;
                    for j in 0..c {
                        let xh = row[j] * inv;
                        dx.push((gg[j] * wv.data()[j] - xh * dot) * inv);
                    }
                }
                if self.rg(x) {
                    self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.rg(w) {
                    self.accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let (xv, gv) = (self.value(x), self.value(gamma));
                let c = xv.cols();
                let mut dx = Vec::with_capacity(xv.numel());
                let mut dg = vec![0.0f32; c];
                let mut db = vec![0.0f32; c];
                for (row, gg) in xv.data().chunks(c).zip(gd.chunks(c)) {
                    let (mu, inv) = mean_inv_std(row, eps);
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..c {
                        let xh = (row[j] - mu) * inv;
                        let dxh = gg[j] * gv.data()[j];
                        dg[j] += gg[j] * xh;
                        db[j] += gg[j];
                        s1 += dxh as f64;
                        s2 += (dxh * xh) as f64;
                    }
                    let m1 = (s1 / c as f64) as f32;
                    let m2 = (s2 / c as f64) as f32;
                    for j in 0..c {
                        let xh = (row[j] - mu) * inv;
                        let dxh = gg[j] * gv.data()[j];
                        dx.push((dxh - m1 - xh * m2) * inv);
                    }
                }
                if self.rg(x) {
                    self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.rg(gamma) {
                    self.accumulate(grads, gamma, Tensor::new(gv.shape().to_vec(), dg)?);
                }
                if self.rg(beta) {
                    let bs = self.shape(beta).to_vec();
                    self.accumulate(grads, beta, Tensor::new(bs, db)?);
                }
            }
            Op::Rope { a, table } => {
                let mut da = gd.to_vec();
                table.rotate(&mut da, out.cols(), true);
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
            }
            &Op::UnionRows { a } => {
                let av = self.value(a);
                let (r, c) = (av.rows(), av.cols());
                let d = av.data();
                let mut da = vec![0.0f32; av.numel()];
                // ∂u/∂a[r] = ∏_{j≠r} (1 − a[j]) via prefix/suffix products.
                for col in 0..c {
                    let mut prefix = 1.0f32;
                    let mut pre = vec![1.0f32; r];
                    for row in 0..r {
                        pre[row] = prefix;
                        prefix *= 1.0 - d[row * c + col];
                    }
                    let mut suffix = 1.0f32;
                    for row in (0..r).rev() {
                        da[row * c + col] = gd[col] * pre[row] * suffix;
                        suffix *= 1.0 - d[row * c + col];
                    }
                }
                self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
            }
            Op::Gather { a, idx } => {
                let av = self.value(*a);
                let c = av.cols();
                let mut da = vec![0.0; av.numel()];
                for (r, &j) in idx.iter().enumerate() {
                    da[r * c + j] += gd[r];
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows(v: &Tensor, causal: bool) -> Tensor {
    let c = v.cols();
    let mut out = Vec::with_capacity(v.numel());
    for (i, row) in v.data().chunks(c).enumerate() {
        let lim = if causal { i + 1 } else { c };
        let m = row[..lim].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let start = out.len();
        let mut s = 0.0f64;
        for &x in &row[..lim] {
            let e = (x - m).exp();
            s += e as f64;
            out.push(e);
        }
        let inv = (1.0 / s) as f32;
        out[start..].iter_mut().for_each(|e| *e *= inv);
        out.extend(std::iter::repeat_n(0.0, c - lim));
    }
    Tensor::new(v.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn rms_inv(row: &[f32], eps: f32) -> f32 {
    let ms = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / row.len() as f64;
    (1.0 / (ms + eps as f64).sqrt()) as f32
}

pub(crate) fn mean_inv_std(row: &[f32], eps: f32) -> (f32, f32) {
    let n = row.len() as f64;
    let mu = row.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = row.iter().map(|&x| (x as f64 - mu).powi(2)).sum::<f64>() / n;
    (mu as f32, (1.0 / (var + eps as f64).sqrt()) as f32)
}
