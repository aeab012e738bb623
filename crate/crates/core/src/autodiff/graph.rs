//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation as a node in creation order, which is a
//! topological order. [`Graph::backward`] walks that list in reverse exactly
//! once. All reductions run sequentially over indices so gradients are
//! bitwise reproducible.

use std::collections::HashMap;
use std::ops::Range;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{ensure, MolfError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Square,
    Sqrt,
    Relu,
    Silu,
    Tanh,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op is broadcast against the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var, Bcast),
    Unary(UnaryOp, Var),
    Scale(Var, T),
    AddScalar(Var),
    Clamp(Var, T, T),
    SumAll(Var),
    ColSums(Var),
    RowSums(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    RepeatRows(Var),
    MeanPool(Var, usize),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_seg: Vec<Range<usize>>,
        kv_seg: Vec<Range<usize>>,
        probs: Vec<T>,
    },
    TopkRenorm {
        probs: Var,
        selected: Vec<Vec<usize>>,
        sums: Vec<T>,
    },
    Pick(Var, Vec<(usize, usize)>),
    WhereRows(Var, Var, Vec<bool>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::Binary(BinaryOp::Div, ..) => "div",
            Op::Unary(UnaryOp::Exp, _) => "exp",
            Op::Unary(UnaryOp::Log, _) => "log",
            Op::Unary(UnaryOp::Square, _) => "square",
            Op::Unary(UnaryOp::Sqrt, _) => "sqrt",
            Op::Unary(UnaryOp::Relu, _) => "relu",
            Op::Unary(UnaryOp::Silu, _) => "silu",
            Op::Unary(UnaryOp::Tanh, _) => "tanh",
            Op::Unary(UnaryOp::Neg, _) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Clamp(..) => "clamp",
            Op::SumAll(_) => "sum",
            Op::ColSums(_) => "col_sums",
            Op::RowSums(_) => "row_sums",
            Op::Reshape(_) => "reshape",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::RepeatRows(_) => "repeat_rows",
            Op::MeanPool(..) => "mean_pool",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::TopkRenorm { .. } => "topk_renorm",
            Op::Pick(..) => "pick",
            Op::WhereRows(..) => "where_rows",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recorder. One graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<(u64, usize), Var>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    node_grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<(u64, usize), Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not participate.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.node_grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradient for one parameter of `store`; zeros if it was never used.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        match self.params.get(&(store.uid(), id.0)) {
            Some(&v) => self.wrt(v),
            None => Tensor::zeros(store.value(id).shape()),
        }
    }

    /// Gradients for every parameter of `store`, in store order.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store.ids().map(|id| self.param(store, id)).collect()
    }
}

fn bcast_kind(a: &[usize], b: &[usize]) -> Option<Bcast> {
    let (m, n) = (a[0], a[1]);
    match (b[0], b[1]) {
        (r, c) if r == m && c == n => Some(Bcast::Same),
        (1, 1) => Some(Bcast::Scalar),
        (1, c) if c == n => Some(Bcast::Row),
        (r, 1) if r == m => Some(Bcast::Col),
        _ => None,
    }
}

#[inline]
fn bidx(kind: Bcast, i: usize, j: usize, n: usize) -> usize {
    match kind {
        Bcast::Same => i * n + j,
        Bcast::Row => j,
        Bcast::Col => i,
        Bcast::Scalar => 0,
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input. Receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let t = as_matrix(t);
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let t = as_matrix(t);
        self.push(t, Op::Leaf, true)
    }

    /// Insert a parameter. Repeated calls return the same node. Parameters of a
    /// frozen store become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(
            as_matrix(store.value(id).clone()),
            Op::Leaf,
            !store.is_frozen(),
        );
        self.params.insert(key, v);
        v
    }

    /// Attention weights saved by an attention node, laid out per segment then
    /// per head as row-major `[queries, keys]` blocks.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        ensure!(k == k2, "matmul: [{m}, {k}] @ [{k2}, {n}]");
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let kind = bcast_kind(&sa, &sb)
            .ok_or_else(|| MolfError::Contract(format!("cannot broadcast {sb:?} onto {sa:?}")))?;
        let (m, n) = (sa[0], sa[1]);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let x = av[i * n + j];
                let y = bv[bidx(kind, i, j, n)];
                out.push(match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::Binary(op, a, b, kind),
            rg,
        ))
    }

    /// `a + b`; `b` may be `[m, n]`, `[1, n]`, `[m, 1]` or `[1, 1]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let f: fn(T) -> T = match op {
            UnaryOp::Exp => T::exp,
            UnaryOp::Log => T::ln,
            UnaryOp::Square => |x| x * x,
            UnaryOp::Sqrt => T::sqrt,
            UnaryOp::Relu => |x| if x > T::zero() { x } else { T::zero() },
            UnaryOp::Silu => |x| x * sigmoid(x),
            UnaryOp::Tanh => T::tanh,
            UnaryOp::Neg => |x| -x,
        };
        let out = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(out, Op::Unary(op, a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.nodes[a.0].value.map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Element-wise clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.nodes[a.0].value.map(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Sum over rows: `[m, n] -> [1, n]`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let (m, n) = self.shape2(a);
        let d = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] = out[j] + d[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::row(out), Op::ColSums(a), rg)
    }

    /// Sum over columns: `[m, n] -> [m, 1]`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let (m, n) = self.shape2(a);
        let d = self.nodes[a.0].value.data();
        let out: Vec<T> = (0..m)
            .map(|i| d[i * n..(i + 1) * n].iter().copied().fold(T::zero(), |x, y| x + y))
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(m, 1, out).unwrap(), Op::RowSums(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshaped(vec![rows, cols])?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.shape2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape2(p).1).collect();
        for &p in parts {
            ensure!(self.shape2(p).0 == m, "concat_cols: row counts differ");
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape2(a);
        ensure!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(m, end - start, out)?,
            Op::SliceCols(a, start),
            rg,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape2(a);
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            ensure!(r < m, "gather_rows index {r} >= {m}");
            out.extend_from_slice(&d[r * n..(r + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(idx.len(), n, out)?,
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// `out[idx[j]] += a[j]` into a zero `[rows, n]` matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = self.shape2(a);
        ensure!(idx.len() == m, "scatter_rows: {} indices for {} rows", idx.len(), m);
        let d = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); rows * n];
        for (j, &r) in idx.iter().enumerate() {
            ensure!(r < rows, "scatter_rows index {r} >= {rows}");
            for c in 0..n {
                out[r * n + c] = out[r * n + c] + d[j * n + c];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(rows, n, out)?,
            Op::ScatterRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Tile `[r, n]` to `[r * times, n]`; output row `i` is input row `i % r`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (r, n) = self.shape2(a);
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(r * n * times);
        for _ in 0..times {
            out.extend_from_slice(d);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::matrix(r * times, n, out).unwrap(),
            Op::RepeatRows(a),
            rg,
        )
    }

    /// Mean of consecutive row groups: `[b * group, n] -> [b, n]`.
    pub fn mean_pool(&mut self, a: Var, group: usize) -> Result<Var> {
        let (m, n) = self.shape2(a);
        ensure!(group > 0 && m % group == 0, "mean_pool: {m} rows in groups of {group}");
        let b = m / group;
        let d = self.nodes[a.0].value.data();
        let inv = T::one() / T::from_usize(group).unwrap();
        let mut out = vec![T::zero(); b * n];
        for i in 0..m {
            let o = (i / group) * n;
            for j in 0..n {
                out[o + j] = out[o + j] + d[i * n + j];
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(b, n, out)?,
            Op::MeanPool(a, group),
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape2(a);
        let mut out = self.nodes[a.0].value.data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::matrix(m, n, out).unwrap(),
            Op::SoftmaxRows(a),
            rg,
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1, n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.shape2(x);
        ensure!(
            self.shape2(gamma) == (1, n) && self.shape2(beta) == (1, n),
            "layer_norm affine shape"
        );
        let xd = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let nf = T::from_usize(n).unwrap();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().copied().fold(T::zero(), |a, b| a + b) / nf;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` is `[mq, d]`, `k` and `v` are `[mk, d]`. Query rows in `q_seg[s]`
    /// attend only to key rows in `kv_seg[s]`. Query rows outside every segment
    /// produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_seg: &[Range<usize>],
        kv_seg: &[Range<usize>],
    ) -> Result<Var> {
        let (mq, d) = self.shape2(q);
        let (mk, dk) = self.shape2(k);
        ensure!(self.shape2(v) == (mk, dk), "attention: key/value shapes differ");
        ensure!(d == dk, "attention: query width {d} vs key width {dk}");
        ensure!(heads > 0 && d % heads == 0, "attention: width {d} not divisible by {heads} heads");
        ensure!(q_seg.len() == kv_seg.len(), "attention: segment lists differ in length");
        for (qs, ks) in q_seg.iter().zip(kv_seg) {
            ensure!(qs.end <= mq && qs.start <= qs.end, "attention: query segment out of range");
            ensure!(ks.end <= mk && ks.start < ks.end, "attention: empty or out-of-range context");
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let mut out = vec![T::zero(); mq * d];
        let total: usize = q_seg.iter().zip(kv_seg).map(|(a, b)| a.len() * b.len()).sum();
        let mut probs = vec![T::zero(); total * heads];
        let mut off = 0;
        let ds = d as isize;
        for (qs, ks) in q_seg.iter().zip(kv_seg) {
            let (nq, nk) = (qs.len(), ks.len());
            if nq == 0 {
                continue;
            }
            for h in 0..heads {
                let p = &mut probs[off..off + nq * nk];
                T::gemm(
                    nq,
                    dh,
                    nk,
                    scale,
                    &qd[qs.start * d + h * dh..],
                    ds,
                    1,
                    &kd[ks.start * d + h * dh..],
                    1,
                    ds,
                    T::zero(),
                    p,
                    nk as isize,
                    1,
                );
                for r in 0..nq {
                    softmax_in_place(&mut p[r * nk..(r + 1) * nk]);
                }
                T::gemm(
                    nq,
                    nk,
                    dh,
                    T::one(),
                    p,
                    nk as isize,
                    1,
                    &vd[ks.start * d + h * dh..],
                    ds,
                    1,
                    T::zero(),
                    &mut out[qs.start * d + h * dh..],
                    ds,
                    1,
                );
                off += nq * nk;
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(mq, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_seg: q_seg.to_vec(),
                kv_seg: kv_seg.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gather `probs[b, selected[b][j]]` into `[B, k]` and renormalize each row to sum to 1.
    pub fn topk_renorm(&mut self, probs: Var, selected: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = self.shape2(probs);
        ensure!(selected.len() == m, "topk_renorm: {} selections for {} rows", selected.len(), m);
        let k = selected.first().map_or(0, |s| s.len());
        ensure!(k > 0, "topk_renorm: empty selection");
        let p = self.nodes[probs.0].value.data();
        let mut out = Vec::with_capacity(m * k);
        let mut sums = Vec::with_capacity(m);
        for (b, sel) in selected.iter().enumerate() {
            ensure!(sel.len() == k, "topk_renorm: ragged selection");
            let mut s = T::zero();
            for &i in sel {
                ensure!(i < n, "topk_renorm: index {i} >= {n}");
                s = s + p[b * n + i];
            }
            sums.push(s);
            for &i in sel {
                out.push(p[b * n + i] / s);
            }
        }
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::matrix(m, k, out)?,
            Op::TopkRenorm {
                probs,
                selected: selected.to_vec(),
                sums,
            },
            rg,
        ))
    }

    /// Collect single elements into a `[len, 1]` column.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.shape2(a);
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(at.len());
        for &(r, c) in at {
            ensure!(r < m && c < n, "pick ({r}, {c}) outside [{m}, {n}]");
            out.push(d[r * n + c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(at.len(), 1, out)?,
            Op::Pick(a, at.to_vec()),
            rg,
        ))
    }

    /// Row `i` of the output is `alt` (a `[1, n]` row) where `mask[i]`, else `a[i]`.
    pub fn where_rows(&mut self, a: Var, alt: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.shape2(a);
        ensure!(self.shape2(alt) == (1, n), "where_rows: replacement must be [1, {n}]");
        ensure!(mask.len() == m, "where_rows: mask length {} vs {} rows", mask.len(), m);
        let ad = self.nodes[a.0].value.data();
        let alt_d = self.nodes[alt.0].value.data();
        let mut out = Vec::with_capacity(m * n);
        for (i, &flag) in mask.iter().enumerate() {
            if flag {
                out.extend_from_slice(alt_d);
            } else {
                out.extend_from_slice(&ad[i * n..(i + 1) * n]);
            }
        }
        let rg = self.rg(a) || self.rg(alt);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::WhereRows(a, alt, mask.to_vec()),
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        ensure!(
            lv.is_scalar(),
            "backward needs a scalar loss, got shape {:?}",
            lv.shape()
        );
        if !lv.all_finite() {
            let first = (0..=loss.0)
                .find(|&i| !self.nodes[i].value.all_finite())
                .unwrap_or(loss.0);
            return Err(MolfError::Numeric(format!(
                "non-finite value produced by node {} `{}`",
                first,
                self.nodes[first].op.name()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(MolfError::Numeric(format!(
                    "non-finite gradient at node {} `{}`",
                    i,
                    node.op.name()
                )));
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            node_grads: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.shape2(a);
                let n = self.shape2(b).1;
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                if self.rg(a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        n as isize,
                        1,
                        bd,
                        1,
                        n as isize,
                        T::zero(),
                        da.data_mut(),
                        k as isize,
                        1,
                    );
                    self.accumulate(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        ad,
                        1,
                        k as isize,
                        gd,
                        n as isize,
                        1,
                        T::zero(),
                        db.data_mut(),
                        n as isize,
                        1,
                    );
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Binary(op, a, b, kind) => {
                let (m, n) = self.shape2(a);
                let ad = self.nodes[a.0].value.data();
                let bv = &self.nodes[b.0].value;
                let bd = bv.data();
                if self.rg(a) {
                    let mut da = Vec::with_capacity(m * n);
                    for r in 0..m {
                        for c in 0..n {
                            let gv = gd[r * n + c];
                            let y = bd[bidx(kind, r, c, n)];
                            da.push(match op {
                                BinaryOp::Add | BinaryOp::Sub => gv,
                                BinaryOp::Mul => gv * y,
                                BinaryOp::Div => gv / y,
                            });
                        }
                    }
                    self.accumulate(grads, a, Tensor::matrix(m, n, da)?);
                }
                if self.rg(b) {
                    let mut db = Tensor::zeros(bv.shape());
                    let dbd = db.data_mut();
                    for r in 0..m {
                        for c in 0..n {
                            let gv = gd[r * n + c];
                            let x = ad[r * n + c];
                            let j = bidx(kind, r, c, n);
                            let y = bd[j];
                            let contrib = match op {
                                BinaryOp::Add => gv,
                                BinaryOp::Sub => -gv,
                                BinaryOp::Mul => gv * x,
                                BinaryOp::Div => -gv * x / (y * y),
                            };
                            dbd[j] = dbd[j] + contrib;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Unary(op, a) => {
                let x = self.nodes[a.0].value.data();
                let y = node.value.data();
                let two = T::one() + T::one();
                let da: Vec<T> = (0..x.len())
                    .map(|j| {
                        let gv = gd[j];
                        match op {
                            UnaryOp::Exp => gv * y[j],
                            UnaryOp::Log => gv / x[j],
                            UnaryOp::Square => gv * two * x[j],
                            UnaryOp::Sqrt => gv / (two * y[j]),
                            UnaryOp::Relu => {
                                if x[j] > T::zero() {
                                    gv
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Silu => {
                                let s = sigmoid(x[j]);
                                gv * s * (T::one() + x[j] * (T::one() - s))
                            }
                            UnaryOp::Tanh => gv * (T::one() - y[j] * y[j]),
                            UnaryOp::Neg => -gv,
                        }
                    })
                    .collect();
                let shape = node.value.shape().to_vec();
                self.accumulate(grads, a, Tensor::new(shape, da)?);
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|v| v * s)),
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accumulate(grads, a, g.clone().reshaped(shape)?);
            }
            &Op::Clamp(a, lo, hi) => {
                let x = self.nodes[a.0].value.data();
                let da: Vec<T> = x
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv >= lo && xv <= hi { gv } else { T::zero() })
                    .collect();
                let shape = node.value.shape().to_vec();
                self.accumulate(grads, a, Tensor::new(shape, da)?);
            }
            &Op::SumAll(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accumulate(grads, a, Tensor::full(&shape, gd[0]));
            }
            &Op::ColSums(a) => {
                let (m, n) = self.shape2(a);
                let mut da = Vec::with_capacity(m * n);
                for _ in 0..m {
                    da.extend_from_slice(gd);
                }
                self.accumulate(grads, a, Tensor::matrix(m, n, da)?);
            }
            &Op::RowSums(a) => {
                let (m, n) = self.shape2(a);
                let mut da = Vec::with_capacity(m * n);
                for &gv in gd.iter().take(m) {
                    da.extend(std::iter::repeat_n(gv, n));
                }
                self.accumulate(grads, a, Tensor::matrix(m, n, da)?);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape2(p).1;
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&gd[r * n + off..r * n + off + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(m, w, dp)?);
                    }
                    off += w;
                }
            }
            &Op::SliceCols(a, start) => {
                let (m, n) = self.shape2(a);
                let w = node.value.cols();
                let mut da = vec![T::zero(); m * n];
                for r in 0..m {
                    da[r * n + start..r * n + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, a, Tensor::matrix(m, n, da)?);
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.shape2(*a);
                let mut da = vec![T::zero(); m * n];
                for (j, &r) in idx.iter().enumerate() {
                    for c in 0..n {
                        da[r * n + c] = da[r * n + c] + gd[j * n + c];
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, da)?);
            }
            Op::ScatterRows(a, idx) => {
                let (m, n) = self.shape2(*a);
                let mut da = Vec::with_capacity(m * n);
                for &r in idx {
                    da.extend_from_slice(&gd[r * n..(r + 1) * n]);
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, da)?);
            }
            &Op::RepeatRows(a) => {
                let (r, n) = self.shape2(a);
                let mut da = vec![T::zero(); r * n];
                for (i, chunk) in gd.chunks(n).enumerate() {
                    let o = (i % r) * n;
                    for c in 0..n {
                        da[o + c] = da[o + c] + chunk[c];
                    }
                }
                self.accumulate(grads, a, Tensor::matrix(r, n, da)?);
            }
            &Op::MeanPool(a, group) => {
                let (m, n) = self.shape2(a);
                let inv = T::one() / T::from_usize(group).unwrap();
                let mut da = Vec::with_capacity(m * n);
                for r in 0..m {
                    let o = (r / group) * n;
                    da.extend(gd[o..o + n].iter().map(|&v| v * inv));
                }
                self.accumulate(grads, a, Tensor::matrix(m, n, da)?);
            }
            &Op::SoftmaxRows(a) => {
                let (m, n) = self.shape2(a);
                let y = node.value.data();
                let mut da = Vec::with_capacity(m * n);
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    da.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, a, Tensor::matrix(m, n, da)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.shape2(*x);
                let gam = self.nodes[gamma.0].value.data();
                let nf = T::from_usize(n).unwrap();
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(m * n);
                    for r in 0..m {
                        let gr = &gd[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            mean_d = mean_d + dh;
                            mean_dh = mean_dh + dh * hr[j];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            dx.push(inv_std[r] * (dh - mean_d - hr[j] * mean_dh));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(m, n, dx)?);
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] = dg[j] + gd[r * n + j] * xhat[r * n + j];
                            db[j] = db[j] + gd[r * n + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::row(dg));
                    self.accumulate(grads, *beta, Tensor::row(db));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_seg,
                kv_seg,
                probs,
            } => self.backprop_attention(g, *q, *k, *v, *heads, q_seg, kv_seg, probs, grads)?,
            Op::TopkRenorm {
                probs,
                selected,
                sums,
            } => {
                let (m, n) = self.shape2(*probs);
                let w = node.value.data();
                let kk = node.value.cols();
                let mut dp = vec![T::zero(); m * n];
                for (b, sel) in selected.iter().enumerate() {
                    let gr = &gd[b * kk..(b + 1) * kk];
                    let wr = &w[b * kk..(b + 1) * kk];
                    let dot = gr.iter().zip(wr).fold(T::zero(), |s, (&a, &c)| s + a * c);
                    for (j, &e) in sel.iter().enumerate() {
                        dp[b * n + e] = dp[b * n + e] + (gr[j] - dot) / sums[b];
                    }
                }
                self.accumulate(grads, *probs, Tensor::matrix(m, n, dp)?);
            }
            Op::Pick(a, at) => {
                let (m, n) = self.shape2(*a);
                let mut da = vec![T::zero(); m * n];
                for (j, &(r, c)) in at.iter().enumerate() {
                    da[r * n + c] = da[r * n + c] + gd[j];
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, da)?);
            }
            Op::WhereRows(a, alt, mask) => {
                let (m, n) = self.shape2(*a);
                let mut da = vec![T::zero(); m * n];
                let mut dalt = vec![T::zero(); n];
                for (r, &flag) in mask.iter().enumerate() {
                    let gr = &gd[r * n..(r + 1) * n];
                    if flag {
                        for c in 0..n {
                            dalt[c] = dalt[c] + gr[c];
                        }
                    } else {
                        da[r * n..(r + 1) * n].copy_from_slice(gr);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, da)?);
                self.accumulate(grads, *alt, Tensor::row(dalt));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        g: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_seg: &[Range<usize>],
        kv_seg: &[Range<usize>],
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (mq, d) = self.shape2(q);
        let mk = self.shape2(k).0;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let gd = g.data();
        let mut dq = vec![T::zero(); mq * d];
        let mut dk = vec![T::zero(); mk * d];
        let mut dv = vec![T::zero(); mk * d];
        let ds = d as isize;
        let mut off = 0;
        for (qs, ks) in q_seg.iter().zip(kv_seg) {
            let (nq, nk) = (qs.len(), ks.len());
            if nq == 0 {
                continue;
            }
            let nks = nk as isize;
            for h in 0..heads {
                let p = &probs[off..off + nq * nk];
                let go = &gd[qs.start * d + h * dh..];
                // dP = dO V^T
                let mut dp = vec![T::zero(); nq * nk];
                T::gemm(
                    nq,
                    dh,
                    nk,
                    T::one(),
                    go,
                    ds,
                    1,
                    &vd[ks.start * d + h * dh..],
                    1,
                    ds,
                    T::zero(),
                    &mut dp,
                    nks,
                    1,
                );
                // dV += P^T dO
                T::gemm(
                    nk,
                    nq,
                    dh,
                    T::one(),
                    p,
                    1,
                    nks,
                    go,
                    ds,
                    1,
                    T::one(),
                    &mut dv[ks.start * d + h * dh..],
                    ds,
                    1,
                );
                // dS = P * (dP - rowsum(dP * P))
                for r in 0..nq {
                    let pr = &p[r * nk..(r + 1) * nk];
                    let dr = &mut dp[r * nk..(r + 1) * nk];
                    let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for (dv_, &pv) in dr.iter_mut().zip(pr) {
                        *dv_ = pv * (*dv_ - dot);
                    }
                }
                T::gemm(
                    nq,
                    nk,
                    dh,
                    scale,
                    &dp,
                    nks,
                    1,
                    &kd[ks.start * d + h * dh..],
                    ds,
                    1,
                    T::one(),
                    &mut dq[qs.start * d + h * dh..],
                    ds,
                    1,
                );
                T::gemm(
                    nk,
                    nq,
                    dh,
                    scale,
                    &dp,
                    1,
                    nks,
                    &qd[qs.start * d + h * dh..],
                    ds,
                    1,
                    T::one(),
                    &mut dk[ks.start * d + h * dh..],
                    ds,
                    1,
                );
                off += nq * nk;
            }
        }
        self.accumulate(grads, q, Tensor::matrix(mq, d, dq)?);
        self.accumulate(grads, k, Tensor::matrix(mk, d, dk)?);
        self.accumulate(grads, v, Tensor::matrix(mk, d, dv)?);
        Ok(())
    }
}

fn as_matrix<T: Real>(t: Tensor<T>) -> Tensor<T> {
    if t.shape().len() == 2 {
        return t;
    }
    let (r, c) = (t.rows(), t.cols());
    t.reshaped(vec![r, c]).expect("same element count")
}
