use std::borrow::Cow;

use super::{Scalar, Strides, Tensor};
use crate::error::{LsptError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is repeated to the left's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[n]` or `[1×n]` repeated over every row.
    Rows,
    Scalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Attention {
        qkv: Var,
        heads: usize,
        /// `[heads × T × T]` post-softmax weights.
        probs: Vec<T>,
    },
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Gelu {
        x: Var,
        /// `tanh(√(2/π)·(x + 0.044715·x³))` per element.
        t: Vec<T>,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MeanRows(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are appended in evaluation order, so the append order is a
/// topological order. Leaves may borrow their values (frozen weights are
/// never copied into the graph). A graph supports exactly one
/// [`Graph::backward`]; a second call is rejected, so gradients can never be
/// accumulated twice from the same saved activations.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gelu tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
const GELU_COEF: f64 = 0.044715;

fn gelu_sqrt_2_over_pi<T: Scalar>() -> T {
    T::lit((2.0 / std::f64::consts::PI).sqrt())
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    /// Frozen leaf borrowing its value.
    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(Broadcast::Same);
        }
        if tb.numel() == 1 {
            return Ok(Broadcast::Scalar);
        }
        let row_like = tb.shape().len() == 1 || (tb.shape().len() == 2 && tb.shape()[0] == 1);
        if row_like && tb.numel() == ta.cols() {
            return Ok(Broadcast::Rows);
        }
        Err(LsptError::dim(op, ta.shape(), tb.shape()))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bcast_at(bd, bc, i, cols)))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op(a, b, bc), &[a, b]))
    }

    /// `a + b`, with `b` a same-shape tensor, a row vector, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    /// Gelu, tanh approximation (constants √(2/π) ≈ 0.7978845608 and 0.044715).
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = gelu_sqrt_2_over_pi::<T>();
        let k = T::lit(GELU_COEF);
        let half = T::lit(0.5);
        let xv = self.value(x);
        let t: Vec<T> = xv.data().iter().map(|&v| (c * (v + k * v * v * v)).tanh()).collect();
        let data = xv.data().iter().zip(&t).map(|(&v, &t)| half * v * (T::one() + t)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu { x, t }, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(LsptError::dim("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.data(), false, tb.data(), false, T::zero(), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` with `b` a row vector of width `w.cols()`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.shape().len() != 2 || tw.shape().len() != 2 || tx.shape()[1] != tw.shape()[0] {
            return Err(LsptError::dim("linear", tx.shape(), tw.shape()));
        }
        let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        let row_like = tb.shape().len() == 1 || (tb.shape().len() == 2 && tb.shape()[0] == 1);
        if !row_like || tb.numel() != n {
            return Err(LsptError::dim("linear bias", tw.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        T::gemm(m, k, n, tx.data(), false, tw.data(), false, T::one(), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::Linear(x, w, b), &[x, w, b]))
    }

    /// Multi-head scaled dot-product self-attention over a fused `[T × 3D]`
    /// projection laid out as `[Q | K | V]`, each split into `heads` column
    /// blocks. Returns the merged `[T × D]` head outputs and a constant node
    /// holding the `[heads × T × T]` attention weights.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<(Var, Var)> {
        let t = self.value(qkv);
        if t.shape().len() != 2 || heads == 0 || !t.cols().is_multiple_of(3 * heads) {
            return Err(LsptError::dim("attention", t.shape(), &[heads]));
        }
        let (rows, d3) = (t.rows(), t.cols());
        let d = d3 / 3;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let q = t.data();
        let mut probs = vec![T::zero(); heads * rows * rows];
        let mut out = vec![T::zero(); rows * d];
        let sq = Strides { row: d3, col: 1 };
        let dense = Strides::dense(rows, rows, false);
        for h in (0..heads).filter(|_| rows > 0) {
            let a = &mut probs[h * rows * rows..(h + 1) * rows * rows];
            // S = Q_h · K_hᵀ
            T::gemm_strided(
                rows,
                dh,
                rows,
                &q[h * dh..],
                sq,
                &q[d + h * dh..],
                Strides { row: 1, col: d3 },
                T::zero(),
                a,
                dense,
            );
            if a.iter().any(|v| v.is_nan()) {
                return Err(LsptError::Numeric("NaN attention score".into()));
            }
            if rows > 0 {
                for row in a.chunks_mut(rows) {
                    row.iter_mut().for_each(|v| *v *= scale);
                    softmax_in_place(row);
                }
            }
            // O_h = A · V_h
            T::gemm_strided(
                rows,
                rows,
                dh,
                a,
                dense,
                &q[2 * d + h * dh..],
                sq,
                T::zero(),
                &mut out[h * dh..],
                Strides { row: d, col: 1 },
            );
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let weights = Tensor::new(vec![heads, rows, rows], probs.clone())?;
        let y = self.push(out, Op::Attention { qkv, heads, probs }, &[qkv]);
        let w = self.constant(weights);
        Ok((y, w))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(LsptError::dim("transpose", t.shape(), &[2]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(LsptError::Numeric("NaN input to softmax".into()));
        }
        let cols = t.cols();
        let mut out = t.data().to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if d == 0 {
            return Err(LsptError::EmptyInput("layernorm"));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != d || b.numel() != d {
            return Err(LsptError::dim("layernorm", t.shape(), g.shape()));
        }
        let dn = T::lit(d as f64);
        let rows = t.rows();
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out.push(xh * g.data()[j] + b.data()[j]);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// `[N×D] → [1×D]` average, accumulated top to bottom.
    pub fn mean_over_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(LsptError::dim("mean_over_rows", t.shape(), &[2]));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        if n == 0 {
            return Err(LsptError::EmptyInput("mean_over_rows"));
        }
        let mut acc = vec![T::zero(); d];
        for i in 0..n {
            for (a, &v) in acc.iter_mut().zip(t.row(i)) {
                *a += v;
            }
        }
        let nn = T::lit(n as f64);
        acc.iter_mut().for_each(|a| *a /= nn);
        let out = Tensor::new(vec![1, d], acc)?;
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |s, &v| s + v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Stacks 2-D tensors along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(LsptError::EmptyInput("concat_rows"))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != d {
                return Err(LsptError::dim("concat_rows", self.shape(*first), t.shape()));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || start + len > t.shape()[0] {
            return Err(LsptError::dim("slice_rows", t.shape(), &[start, len]));
        }
        let d = t.cols();
        let out = Tensor::new(vec![len, d], t.data()[start * d..(start + len) * d].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Inverse of [`Graph::concat_rows`] given the segment lengths.
    pub fn split_rows(&mut self, x: Var, lens: &[usize]) -> Result<Vec<Var>> {
        let total: usize = lens.iter().sum();
        if self.shape(x).len() != 2 || total != self.shape(x)[0] {
            return Err(LsptError::dim("split_rows", self.shape(x), lens));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(lens.len());
        for &len in lens {
            out.push(self.slice_rows(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Joins 2-D tensors side by side (feature axis).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(LsptError::EmptyInput("concat_cols"))?;
        let r = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.shape()[0] != r {
                return Err(LsptError::dim("concat_cols", self.shape(*first), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || start + len > t.cols() {
            return Err(LsptError::dim("slice_cols", t.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![t.rows(), len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(LsptError::dim("cross_entropy", t.shape(), &[labels.len()]));
        }
        let (b, k) = (t.shape()[0], t.shape()[1]);
        if b == 0 {
            return Err(LsptError::EmptyInput("cross_entropy"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(LsptError::Label {
                label: bad,
                classes: k,
            });
        }
        if t.has_non_finite() {
            return Err(LsptError::Numeric("non-finite logits".into()));
        }
        let mut probs = t.data().to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln();
            loss += lse - row[labels[i]];
            softmax_in_place(row);
        }
        let loss = loss / T::lit(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable leaf receives a gradient of its own shape, zeros when
    /// the loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(LsptError::contract(
                "backward already ran on this graph; rebuild it with a fresh forward",
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(LsptError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op<T>,
        y: &Tensor<T>,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let g = gy.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    accumulate_gemm(grads, *a, ta.shape(), (m, n, k), (g, false), (tb.data(), true));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    accumulate_gemm(grads, *b, tb.shape(), (k, m, n), (ta.data(), true), (g, false));
                }
            }
            Op::Linear(x, w, b) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                if self.wants(*x) {
                    accumulate_gemm(grads, *x, tx.shape(), (m, n, k), (g, false), (tw.data(), true));
                }
                if self.wants(*w) {
                    accumulate_gemm(grads, *w, tw.shape(), (k, m, n), (tx.data(), true), (g, false));
                }
                if self.wants(*b) {
                    accumulate_region(grads, *b, self.shape(*b), |db| {
                        for row in g.chunks(n.max(1)) {
                            for (o, &v) in db.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let tq = self.value(*qkv);
                let (rows, d3) = (tq.rows(), tq.cols());
                let d = d3 / 3;
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let q = tq.data();
                let mut ds = vec![T::zero(); rows * rows];
                let sq = Strides { row: d3, col: 1 };
                let sg = Strides { row: d, col: 1 };
                let dense = Strides::dense(rows, rows, false);
                let dense_t = Strides::dense(rows, rows, true);
                accumulate_region(grads, *qkv, tq.shape(), |dq| {
                    for h in (0..*heads).filter(|_| rows > 0) {
                        let a = &probs[h * rows * rows..(h + 1) * rows * rows];
                        // dA = dO_h · V_hᵀ
                        T::gemm_strided(
                            rows,
                            dh,
                            rows,
                            &g[h * dh..],
                            sg,
                            &q[2 * d + h * dh..],
                            Strides { row: 1, col: d3 },
                            T::zero(),
                            &mut ds,
                            dense,
                        );
                        if rows > 0 {
                            for (dr, ar) in ds.chunks_mut(rows).zip(a.chunks(rows)) {
                                let dot = dr.iter().zip(ar).fold(T::zero(), |s, (&x, &y)| s + x * y);
                                for (v, &p) in dr.iter_mut().zip(ar) {
                                    *v = p * (*v - dot) * scale;
                                }
                            }
                        }
                        // dQ_h = dS · K_h, dK_h = dSᵀ · Q_h, dV_h = Aᵀ · dO_h
                        let one = T::one();
                        T::gemm_strided(rows, rows, dh, &ds, dense, &q[d + h * dh..], sq, one, &mut dq[h * dh..], sq);
                        T::gemm_strided(rows, rows, dh, &ds, dense_t, &q[h * dh..], sq, one, &mut dq[d + h * dh..], sq);
                        T::gemm_strided(rows, rows, dh, a, dense_t, &g[h * dh..], sg, one, &mut dq[2 * d + h * dh..], sq);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (gy.shape()[0], gy.shape()[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.wants(*a) {
                    accumulate(grads, *a, self.shape(*a), g.to_vec());
                }
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let db = reduce_broadcast(g.iter().map(|&v| v * sign), *bc, tb.numel(), gy.cols());
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols();
                if self.wants(*a) {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * bcast_at(tb.data(), *bc, i, cols))
                        .collect();
                    accumulate(grads, *a, ta.shape(), da);
                }
                if self.wants(*b) {
                    let prod = g.iter().zip(ta.data()).map(|(&v, &x)| v * x);
                    let db = reduce_broadcast(prod, *bc, tb.numel(), cols);
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, y.shape(), g.iter().map(|&v| v * *c).collect());
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(y.data())
                    .map(|(&v, &s)| v * s * (T::one() - s))
                    .collect();
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::Tanh(x) => {
                let dx = g
                    .iter()
                    .zip(y.data())
                    .map(|(&v, &t)| v * (T::one() - t * t))
                    .collect();
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::Gelu { x, t } => {
                let c = gelu_sqrt_2_over_pi::<T>();
                let k = T::lit(GELU_COEF);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .zip(t)
                    .map(|((&v, &u), &t)| {
                        let du = half * (T::one() + t)
                            + half * u * (T::one() - t * t) * c * (T::one() + three * k * u * u);
                        v * du
                    })
                    .collect();
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::SoftmaxRows(x) => {
                let cols = y.cols();
                let mut dx = Vec::with_capacity(y.numel());
                if cols > 0 {
                    for (gr, yr) in g.chunks(cols).zip(y.data().chunks(cols)) {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        dx.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - dot)));
                    }
                }
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = y.cols();
                let dn = T::lit(d as f64);
                let gv = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(y.numel());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh /= dn;
                        mean_dxh_xh /= dn;
                        dx.extend(
                            (0..d).map(|j| rs * (gr[j] * gv[j] - mean_dxh - xr[j] * mean_dxh_xh)),
                        );
                    }
                    accumulate(grads, *x, y.shape(), dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += gi * xh;
                    }
                    accumulate(grads, *gamma, self.shape(*gamma), dg);
                }
                if self.wants(*beta) {
                    let db = reduce_broadcast(g.iter().copied(), Broadcast::Rows, d, d);
                    accumulate(grads, *beta, self.shape(*beta), db);
                }
            }
            Op::MeanRows(x) => {
                let shape = self.shape(*x);
                let n = T::lit(shape[0] as f64);
                let dx = (0..shape[0]).flat_map(|_| g.iter().map(|&v| v / n)).collect();
                accumulate(grads, *x, shape, dx);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x);
                let n = shape.iter().product();
                accumulate(grads, *x, shape, vec![g[0]; n]);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        accumulate(grads, p, self.shape(p), g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let d = y.cols();
                accumulate_region(grads, *x, self.shape(*x), |dx| {
                    for (o, &v) in dx[start * d..start * d + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let dp = (0..y.rows())
                            .flat_map(|i| g[i * total + offset..i * total + offset + w].iter().copied())
                            .collect();
                        accumulate(grads, p, self.shape(p), dp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let shape = self.shape(*x);
                let (total, w) = (shape[1], y.cols());
                accumulate_region(grads, *x, shape, |dx| {
                    for i in 0..y.rows() {
                        let dst = &mut dx[i * total + start..i * total + start + w];
                        for (o, &v) in dst.iter_mut().zip(&g[i * w..(i + 1) * w]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let shape = self.shape(*logits);
                let k = shape[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= scale;
                }
                accumulate(grads, *logits, shape, dx);
            }
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn bcast_at<T: Copy>(b: &[T], bc: Broadcast, i: usize, cols: usize) -> T {
    match bc {
        Broadcast::Same => b[i],
        Broadcast::Rows => b[i % cols],
        Broadcast::Scalar => b[0],
    }
}

fn reduce_broadcast<T: Scalar>(
    g: impl Iterator<Item = T>,
    bc: Broadcast,
    numel: usize,
    cols: usize,
) -> Vec<T> {
    match bc {
        Broadcast::Same => g.collect(),
        Broadcast::Rows => {
            let mut out = vec![T::zero(); numel];
            for (i, v) in g.enumerate() {
                out[i % cols] += v;
            }
            out
        }
        Broadcast::Scalar => vec![g.fold(T::zero(), |s, v| s + v)],
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    let t = Tensor::new(shape.to_vec(), data).expect("gradient shape mirrors its value");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Adds into the gradient of `v` in place, creating it as zeros first.
fn accumulate_region<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
    f: impl FnOnce(&mut [T]),
) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

/// `grad(v) += op(a) · op(b)` for an `m × k · k × n` product, written
/// straight into the gradient buffer.
fn accumulate_gemm<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
    (m, k, n): (usize, usize, usize),
    (a, a_t): (&[T], bool),
    (b, b_t): (&[T], bool),
) {
    match &mut grads[v.0] {
        Some(existing) => T::gemm(m, k, n, a, a_t, b, b_t, T::one(), existing.data_mut()),
        slot @ None => {
            let mut data = vec![T::zero(); m * n];
            T::gemm(m, k, n, a, a_t, b, b_t, T::zero(), &mut data);
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape mirrors its value"));
        }
    }
}

/// Result of [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for nodes that do not depend on any trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
