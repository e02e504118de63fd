use std::collections::HashMap;

use super::kernels::{self, MatMut, MatRef};
use super::{NumericsError, Tensor};
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var, Vec<T>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    Mse { pred: Var, target: Vec<T> },
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Gelu(a, _) | Op::Softmax(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::SliceRows { a, .. } => vec![*a],
            Op::Mse { pred, .. } => vec![*pred],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Gather { .. } => "gather",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Mse { .. } => "mse",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation, replayed in reverse by
/// [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so every input index is smaller
/// than its consumer's. Gradients live on the tape until
/// [`Tape::reset_grads`] is called; a second `backward` before that is an
/// error.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn all_finite<T: Scalar>(data: &[T]) -> bool {
    // x - x is NaN exactly for non-finite x; lane-wise sums keep this vectorizable.
    let mut acc = [T::zero(); 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] = acc[i] + (c[i] - c[i]);
        }
    }
    acc.iter().all(|a| *a == T::zero()) && tail.iter().all(|x| x.is_finite())
}

fn ensure_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<(), NumericsError> {
    if all_finite(data) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false, params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var, NumericsError> {
        ensure_finite(op.name(), value.data())?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var, NumericsError> {
        ensure_finite("leaf", value.data())?;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, NumericsError> {
        self.leaf(value, false)
    }

    /// Records a parameter leaf once per tape; later lookups of the same `id`
    /// return the same node so that gradients accumulate in one place.
    pub fn param(&mut self, id: usize, value: &Tensor<T>, requires_grad: bool) -> Result<Var, NumericsError> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.leaf(value.clone(), requires_grad)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(mismatch("matmul", format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ` with `b` stored row-major as `n × k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.shape2(a);
        let (n, k2) = self.shape2(b);
        if k != k2 {
            return Err(mismatch("matmul_nt", format!("{:?} x {:?}ᵀ", self.value(a).shape(), self.value(b).shape())));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch("add", format!("{:?} + {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch("mul", format!("{:?} * {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let cols = self.value(a).cols();
        if self.value(bias).numel() != cols {
            return Err(mismatch("add_row", format!("{:?} + row {:?}", self.value(a).shape(), self.value(bias).shape())));
        }
        let mut out = self.value(a).clone();
        kernels::add_row_inplace(out.data_mut(), self.value(bias).data());
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let t: Vec<T> = x.data().iter().map(|&v| kernels::gelu_inner(v)).collect();
        let half = T::lit(0.5);
        let data = x.data().iter().zip(&t).map(|(&v, &ti)| half * v * (T::one() + ti)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Gelu(a, t))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, NumericsError> {
        let d = self.value(x).cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d || d == 0 {
            return Err(mismatch("layer_norm", format!("x {:?}, gamma/beta width {}", self.value(x).shape(), self.value(gamma).numel())));
        }
        let rows = self.value(x).rows();
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        kernels::layer_norm_rows(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            &mut out,
            Some((&mut xhat, &mut rstd)),
        );
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let n = t.cols();
        if n == 0 {
            return Err(mismatch("softmax", "empty last dimension".into()));
        }
        let mut out = vec![T::zero(); t.numel()];
        for (row, orow) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_into(row, orow);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(a))
    }

    /// Multi-head attention over already projected queries, keys and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var, NumericsError> {
        let (nq, d) = self.shape2(q);
        let (nk, dk) = self.shape2(k);
        let (nv, dv) = self.shape2(v);
        if d != dk || d != dv || nk != nv || heads == 0 || d % heads != 0 || (causal && nk < nq) {
            return Err(mismatch("attention", format!("q {nq}×{d}, k {nk}×{dk}, v {nv}×{dv}, heads {heads}")));
        }
        let mut out = vec![T::zero(); nq * d];
        let mut probs = vec![T::zero(); heads * nq * nk];
        kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            nq,
            nk,
            d,
            heads,
            causal,
            &mut out,
            &mut probs,
        );
        self.push(Tensor::matrix(nq, d, out)?, Op::Attention { q, k, v, heads, probs })
    }

    /// Attention weights (`heads × nq × nk`) recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let (t, vocab) = self.shape2(logits);
        if targets.len() != t || t == 0 {
            return Err(mismatch("cross_entropy", format!("{t} logit rows, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= vocab) {
            return Err(NumericsError::TargetOutOfRange { id: bad, vocab });
        }
        let mut probs = vec![T::zero(); t * vocab];
        let mut loss = T::zero();
        for (r, &target) in targets.iter().enumerate() {
            let row = self.value(logits).row(r);
            kernels::softmax_into(row, &mut probs[r * vocab..(r + 1) * vocab]);
            loss = loss - kernels::log_softmax_at(row, target);
        }
        loss = loss / T::from_usize(t).unwrap();
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (rows, cols) = self.shape2(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange { index: id, bound: rows });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        self.push(Tensor::matrix(ids.len(), cols, out)?, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", format!("width {} vs {}", t.cols(), cols)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(mismatch("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let out = self.value(a).slice_rows(start, len)?;
        self.push(out, Op::SliceRows { a, start })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, NumericsError> {
        let p = self.value(pred);
        if p.numel() != target.numel() || p.numel() == 0 {
            return Err(mismatch("mse", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        let n = T::from_usize(p.numel()).unwrap();
        let loss = p.data().iter().zip(target.data()).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>() / n;
        self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.data().to_vec() })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel().max(1)).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// `x · w + b` for a `d_in × d_out` weight and `d_out` bias.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ---- reverse pass ----

    /// Populates gradients of `loss` for every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::BackwardAlreadyRun);
        }
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NotScalar { shape: self.value(loss).shape().to_vec() });
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.inputs().iter().any(|v| v.0 >= i) {
                return Err(NumericsError::Cycle { node: i });
            }
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            Backprop { nodes: &self.nodes, grads: &mut self.grads }.node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.value(v).shape().to_vec(), g.clone()).expect("gradient shape"))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// `(param id, gradient)` for every recorded parameter that received one.
    pub fn param_grads(&self) -> Vec<(usize, &[T])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad_slice(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

}

/// Borrow split used by the reverse pass: node values are read while
/// gradient buffers are written.
struct Backprop<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> Backprop<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn acc(&mut self, v: Var) -> &mut [T] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn node(&mut self, i: usize, g: &[T]) {
        let nodes = self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape2(*a);
                let n = self.value(*b).cols();
                if self.wants(*a) {
                    let bv = nodes[b.0].value.data();
                    let ga = self.acc(*a);
                    kernels::gemm(T::one(), MatRef::new(g, m, n), MatRef::new(bv, k, n).t(), T::one(), MatMut::new(ga, m, k));
                }
                if self.wants(*b) {
                    let av = nodes[a.0].value.data();
                    let gb = self.acc(*b);
                    kernels::gemm(T::one(), MatRef::new(av, m, k).t(), MatRef::new(g, m, n), T::one(), MatMut::new(gb, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.shape2(*a);
                let n = self.value(*b).rows();
                if self.wants(*a) {
                    let bv = nodes[b.0].value.data();
                    let ga = self.acc(*a);
                    kernels::gemm(T::one(), MatRef::new(g, m, n), MatRef::new(bv, n, k), T::one(), MatMut::new(ga, m, k));
                }
                if self.wants(*b) {
                    let av = nodes[a.0].value.data();
                    let gb = self.acc(*b);
                    kernels::gemm(T::one(), MatRef::new(g, m, n).t(), MatRef::new(av, m, k), T::one(), MatMut::new(gb, n, k));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        for (x, y) in self.acc(v).iter_mut().zip(g) {
                            *x = *x + *y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let bv = nodes[b.0].value.data();
                    for ((x, y), z) in self.acc(a).iter_mut().zip(g).zip(bv) {
                        *x = *x + *y * *z;
                    }
                }
                if self.wants(b) {
                    let av = nodes[a.0].value.data();
                    for ((x, y), z) in self.acc(b).iter_mut().zip(g).zip(av) {
                        *x = *x + *y * *z;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    for (x, y) in self.acc(*a).iter_mut().zip(g) {
                        *x = *x + *y;
                    }
                }
                if self.wants(*bias) {
                    let cols = self.value(*bias).numel();
                    let gb = self.acc(*bias);
                    for row in g.chunks(cols) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x = *x + *y;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let c = *c;
                    for (x, y) in self.acc(*a).iter_mut().zip(g) {
                        *x = *x + *y * c;
                    }
                }
            }
            Op::Gelu(a, t) => {
                if self.wants(*a) {
                    let av = nodes[a.0].value.data();
                    for (((x, y), z), ti) in self.acc(*a).iter_mut().zip(g).zip(av).zip(t) {
                        *x = *x + *y * kernels::gelu_grad_from(*z, *ti);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gam = nodes[gamma.0].value.data();
                if self.wants(*gamma) {
                    let gg = self.acc(*gamma);
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + grow[j] * xrow[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = self.acc(*beta);
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            gb[j] = gb[j] + grow[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let inv_d = T::one() / T::from_usize(d).unwrap();
                    let gx = self.acc(*x);
                    let mut dxh = vec![T::zero(); d];
                    for (r, (grow, xrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..d {
                            dxh[j] = grow[j] * gam[j];
                            mean_d = mean_d + dxh[j];
                            mean_dx = mean_dx + dxh[j] * xrow[j];
                        }
                        mean_d = mean_d * inv_d;
                        mean_dx = mean_dx * inv_d;
                        for j in 0..d {
                            let v = &mut gx[r * d + j];
                            *v = *v + rstd[r] * (dxh[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = nodes[i].value.data();
                    let n = nodes[i].value.cols();
                    let ga = self.acc(*a);
                    for ((grow, yrow), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for j in 0..n {
                            out[j] = out[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let vocab = self.value(*logits).cols();
                    let scale = g[0] / T::from_usize(targets.len()).unwrap();
                    let gl = self.acc(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            let x = &mut gl[r * vocab + j];
                            *x = *x + (probs[r * vocab + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let cols = self.value(*table).cols();
                    let gt = self.acc(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[id * cols + j] = gt[id * cols + j] + g[r * cols + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        for (x, y) in self.acc(p).iter_mut().zip(&g[offset..offset + n]) {
                            *x = *x + *y;
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let gp = self.acc(p);
                        for (r, grow) in g.chunks(total).enumerate() {
                            for j in 0..w {
                                gp[r * w + j] = gp[r * w + j] + grow[col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { a, start } => {
                if self.wants(*a) {
                    let cols = self.value(*a).cols();
                    let off = start * cols;
                    let ga = self.acc(*a);
                    for (x, y) in ga[off..off + g.len()].iter_mut().zip(g) {
                        *x = *x + *y;
                    }
                }
            }
            Op::Mse { pred, target } => {
                if self.wants(*pred) {
                    let p = nodes[pred.0].value.data();
                    let scale = T::lit(2.0) * g[0] / T::from_usize(p.len()).unwrap();
                    for ((x, a), b) in self.acc(*pred).iter_mut().zip(p).zip(target) {
                        *x = *x + (*a - *b) * scale;
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    for x in self.acc(*a).iter_mut() {
                        *x = *x + g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = T::from_usize(self.value(*a).numel().max(1)).unwrap();
                    for x in self.acc(*a).iter_mut() {
                        *x = *x + g[0] / n;
                    }
                }
            }
        }
    }

    fn attention_backward(&mut self, q: Var, k: Var, v: Var, heads: usize, probs: &[T], g: &[T]) {
        let (nq, d) = self.shape2(q);
        let nk = self.value(k).rows();
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let nodes = self.nodes;
        let qv = nodes[q.0].value.data();
        let kv = nodes[k.0].value.data();
        let vv = nodes[v.0].value.data();
        let mut gq = vec![T::zero(); nq * d];
        let mut gk = vec![T::zero(); nk * d];
        let mut gv = vec![T::zero(); nk * d];
        let mut dp = vec![T::zero(); nq * nk];
        for h in 0..heads {
            let ph = &probs[h * nq * nk..(h + 1) * nq * nk];
            let goh = MatRef::strided(&g[h * dh..], nq, dh, d, 1);
            // dV = Pᵀ dO
            kernels::gemm(
                T::one(),
                MatRef::new(ph, nq, nk).t(),
                goh,
                T::zero(),
                MatMut::strided(&mut gv[h * dh..], nk, dh, d, 1),
            );
            // dP = dO Vᵀ
            let vh = MatRef::strided(&vv[h * dh..], nk, dh, d, 1);
            kernels::gemm(T::one(), goh, vh.t(), T::zero(), MatMut::new(&mut dp, nq, nk));
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then the 1/sqrt(dh) factor
            for r in 0..nq {
                let prow = &ph[r * nk..(r + 1) * nk];
                let drow = &mut dp[r * nk..(r + 1) * nk];
                let dot: T = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum();
                for j in 0..nk {
                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                }
            }
            let kh = MatRef::strided(&kv[h * dh..], nk, dh, d, 1);
            let qh = MatRef::strided(&qv[h * dh..], nq, dh, d, 1);
            kernels::gemm(T::one(), MatRef::new(&dp, nq, nk), kh, T::zero(), MatMut::strided(&mut gq[h * dh..], nq, dh, d, 1));
            kernels::gemm(T::one(), MatRef::new(&dp, nq, nk).t(), qh, T::zero(), MatMut::strided(&mut gk[h * dh..], nk, dh, d, 1));
        }
        for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
            if self.wants(var) {
                for (x, y) in self.acc(var).iter_mut().zip(&grad) {
                    *x = *x + *y;
                }
            }
        }
    }
}
