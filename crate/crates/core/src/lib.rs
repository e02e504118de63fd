//! Glance-then-refine image captioning on a synthetic shapes world.
//!
//! The crate bundles everything needed to train and run a two-pass captioner
//! end to end on a single CPU core: a reverse-mode autodiff tape, a toy vision
//! transformer, the MLP and DeepLens connectors, a decoder-only language model
//! with a KV cache, the staged training recipe, caption metrics, and the
//! attention / reconstruction probes.
//!
//! All model math is generic over [`Scalar`] (`f32` for training and
//! inference, `f64` for gradient verification). The aliases at the bottom of
//! this file pin the common instantiations.

pub mod checkpoint;
pub mod config;
pub mod connector;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lm;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod probes;
pub mod train;
pub mod vision;
pub mod workflow;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type the model math is written against.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Name stored in checkpoint tensor indices.
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// Every strided access implied by the dimensions must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits scalar")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

pub use error::{Error, Result};
pub use model::{ModelBundle, ModelConfig};
pub use numerics::{NumericsError, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;


pub type Model = ModelBundle<f32>;
pub type Model64 = ModelBundle<f64>;
