//! Slice-level kernels shared by the autodiff tape and the cached inference
//! path. Both routes call exactly these functions so that their results agree
//! bit for bit.

use crate::Scalar;

/// Tanh-approximation GELU constant sqrt(2/pi).
pub const GELU_C: f64 = 0.7978845608;
const GELU_K: f64 = 0.044715;

/// Strided read-only matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view exceeds buffer");
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let v = Self { data, rows, cols, rs, cs };
        v.check();
        v
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    /// Columns `start..start + width`.
    pub fn cols_range(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        let v = Self {
            data: &self.data[(start * self.cs).min(self.data.len())..],
            rows: self.rows,
            cols: width,
            rs: self.rs,
            cs: self.cs,
        };
        v.check();
        v
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// Strided mutable matrix view.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view exceeds buffer");
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a mut [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * rs + (cols - 1) * cs < data.len(), "strided view out of bounds");
        }
        Self { data, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let x = &mut c.data[i * c.rs + j * c.cs];
                *x = if beta == T::zero() { T::zero() } else { beta * *x };
            }
        }
        return;
    }
    // SAFETY: every view has been bounds-checked against its backing slice.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row-major `a (m×k) · b (k×n)` into a fresh buffer.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), MatRef::new(a, m, k), MatRef::new(b, k, n), T::zero(), MatMut::new(&mut out, m, n));
    out
}

/// Row-major `a (m×k) · bᵀ` where `b` is stored `n×k`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), MatRef::new(a, m, k), MatRef::new(b, n, k).t(), T::zero(), MatMut::new(&mut out, m, n));
    out
}

pub fn add_row_inplace<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = *v + *b;
        }
    }
}

/// `tanh(c·(x + k·x³))`, the inner term of the tanh-form GELU, written via
/// a single `exp` (cheaper than a library `tanh`, saturates cleanly).
pub fn gelu_inner<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    let two = T::lit(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

pub fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + gelu_inner(x))
}

/// Derivative of [`gelu`] given the precomputed inner tanh `t`.
pub fn gelu_grad_from<T: Scalar>(x: T, t: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_grad_from(x, gelu_inner(x))
}

/// Layer norm over each row of width `gamma.len()`. Optionally records the
/// normalized values and reciprocal standard deviations for backward.
pub fn layer_norm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    mut saved: Option<(&mut [T], &mut [T])>,
) {
    let d = gamma.len();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for (r, (row, orow)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            orow[j] = xh * gamma[j] + beta[j];
            if let Some((xhat, _)) = saved.as_mut() {
                xhat[r * d + j] = xh;
            }
        }
        if let Some((_, rstds)) = saved.as_mut() {
            rstds[r] = rstd;
        }
    }
}

/// Max-subtracted softmax of `x` into `out` (same length).
pub fn softmax_into<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `nq × d`, `k`/`v` are `nk × d`, all row-major. With `causal`, query
/// row `r` sees key rows `0..=nk - nq + r`; masked probabilities are exactly
/// zero. `probs` receives `heads × nq × nk` attention weights.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    causal: bool,
    out: &mut [T],
    probs: &mut [T],
) {
    assert!(d % heads == 0);
    assert!(!causal || nk >= nq);
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let offset = nk - nq.min(nk);
    let mut scores = vec![T::zero(); nq * nk];
    for h in 0..heads {
        let qh = MatRef::strided(&q[h * dh..], nq, dh, d, 1);
        let kh = MatRef::strided(&k[h * dh..], nk, dh, d, 1);
        let vh = MatRef::strided(&v[h * dh..], nk, dh, d, 1);
        gemm(scale, qh, kh.t(), T::zero(), MatMut::new(&mut scores, nq, nk));
        let ph = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        for r in 0..nq {
            let visible = if causal { offset + r + 1 } else { nk };
            let srow = &scores[r * nk..r * nk + visible];
            let prow = &mut ph[r * nk..(r + 1) * nk];
            softmax_into(srow, &mut prow[..visible]);
            for p in &mut prow[visible..] {
                *p = T::zero();
            }
        }
        let outh = MatMut::strided(&mut out[h * dh..], nq, dh, d, 1);
        gemm(T::one(), MatRef::new(ph, nq, nk), vh, T::zero(), outh);
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// `log softmax(row)[index]`.
pub fn log_softmax_at<T: Scalar>(row: &[T], index: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row[index] - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_gemm_matches_naive() {
        let a: Vec<f64> = (0..12).map(|x| x as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..8).map(|x| (x as f64).sin()).collect();
        // a: 3×4, b stored 2×4 and used transposed.
        let c = matmul_nt(&a, &b, 3, 4, 2);
        for i in 0..3 {
            for j in 0..2 {
                let naive: f64 = (0..4).map(|t| a[i * 4 + t] * b[j * 4 + t]).sum();
                assert!((c[i * 2 + j] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_attention_masks_future_exactly() {
        let d = 4;
        let q: Vec<f64> = (0..12).map(|x| (x as f64 * 0.37).cos()).collect();
        let mut out = vec![0.0; 12];
        let mut probs = vec![0.0; 2 * 9];
        attention(&q, &q, &q, 3, 3, d, 2, true, &mut out, &mut probs);
        assert_eq!(probs[1], 0.0);
        assert_eq!(probs[2], 0.0);
        assert_eq!(probs[0], 1.0);
        for r in 0..3 {
            let s: f64 = probs[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f64; 5]), 0);
    }
}
