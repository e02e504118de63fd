//! Shaped arrays, a reverse-mode autodiff tape, and a central-difference
//! gradient oracle.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("target id {id} outside vocabulary of {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardAlreadyRun,
    #[error("recorded computation has a cycle at node {node}")]
    Cycle { node: usize },
}

/// Central differences `(f(x + e·eᵢ) − f(x − e·eᵢ)) / 2e` for every coordinate.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, epsilon: T) -> Result<Tensor<T>, NumericsError>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T, NumericsError>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let two_eps = epsilon + epsilon;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / two_eps;
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// dominating the comparison.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    fn scalar_of(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut tape = Tape::<f64>::new();
        let a = T64::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let i = tape.constant(T64::identity(3)).unwrap();
        let av = tape.constant(a.clone()).unwrap();
        let p = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(p), &a);

        let x = tape.constant(T64::from_rows(&[&[1.0, 2.0]])).unwrap();
        let y = tape.constant(T64::from_rows(&[&[3.0], &[4.0]])).unwrap();
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(NumericsError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_analytic_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(T64::from_rows(&[&[0.0, 0.0, 0.0]])).unwrap();
        let s = tape.softmax_lastdim(x).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(T64::from_rows(&[&[0.0, 2f64.ln()]])).unwrap();
        let s = tape.softmax_lastdim(x).unwrap();
        assert!((tape.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(T64::from_rows(&[&[3.0, 3.0, 3.0, 3.0]])).unwrap();
        let g = tape.constant(T64::full(vec![4], 1.0)).unwrap();
        let b0 = tape.constant(T64::zeros(vec![4])).unwrap();
        let b = tape.constant(T64::full(vec![4], 0.7)).unwrap();
        let y = tape.layer_norm(x, g, b0, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn gelu_zero_and_asymptote() {
        assert_eq!(kernels::gelu(0.0f64), 0.0);
        assert!((kernels::gelu(10.0f64) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(T64::zeros(vec![3, 4])).unwrap();
        let ce = tape.cross_entropy(l, &[0, 3, 2]).unwrap();
        assert!((scalar_of(&tape, ce) - 4f64.ln()).abs() < 1e-12);

        let mut logits = T64::zeros(vec![1, 4]);
        logits.data_mut()[2] = 100.0;
        let l = tape.constant(logits).unwrap();
        let ce = tape.cross_entropy(l, &[2]).unwrap();
        assert!(scalar_of(&tape, ce) < 1e-30);
        assert!(matches!(tape.cross_entropy(l, &[4]), Err(NumericsError::TargetOutOfRange { id: 4, vocab: 4 })));
    }

    #[test]
    fn backward_simple_derivatives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true).unwrap();
        let y = tape.leaf(Tensor::scalar(5.0), true).unwrap();
        let z = tape.mul(x, y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
        assert_eq!(tape.grad(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_twice_without_reset_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y), Err(NumericsError::BackwardAlreadyRun));
        tape.reset_grads();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(NumericsError::NotScalar { .. })));
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![1, 2], 3e38)).unwrap();
        assert_eq!(tape.add(x, x), Err(NumericsError::NonFinite { op: "add" }));
        assert!(tape.leaf(Tensor::full(vec![1], f32::NAN), false).is_err());
    }

    #[test]
    fn finite_diff_analytic_cases() {
        let x = T64::from_rows(&[&[0.3, -1.2, 4.0]]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
        let x = T64::from_rows(&[&[1.0, 2.0]]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }
}
