//! Layers shared by the encoder, the connectors, the language model and the
//! reconstruction decoder. Each layer has a taped forward (training, probes)
//! and a plain-tensor forward (cached inference) built from the same kernels.

use rand_chacha::ChaCha8Rng;

use crate::numerics::kernels;
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::params::{normal, Bind, ParamGroup, ParamId, ParamStore};
use crate::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight `d_in × d_out` drawn from N(0, gain² / d_in), zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = gain / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), group, normal(vec![d_in, d_out], std, rng));
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(vec![d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Bind<'_, T>, x: Var) -> Result<Var, NumericsError> {
        let w = bind.var(tape, self.w)?;
        let b = bind.var(tape, self.b)?;
        tape.affine(x, w, b)
    }

    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let mut y = kernels::matmul(x, store.get(self.w).data(), rows, self.d_in, self.d_out);
        kernels::add_row_inplace(&mut y, store.get(self.b).data());
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::full(vec![d], T::one()));
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(vec![d]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Bind<'_, T>, x: Var) -> Result<Var, NumericsError> {
        let g = bind.var(tape, self.gamma)?;
        let b = bind.var(tape, self.beta)?;
        tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }

    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        kernels::layer_norm_rows(
            x,
            store.get(self.gamma).data(),
            store.get(self.beta).data(),
            T::lit(LN_EPS),
            &mut out,
            None,
        );
        out
    }
}

/// Appended keys and values of one attention layer.
#[derive(Clone, Debug, Default)]
pub struct LayerKv<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub len: usize,
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub causal: bool,
    pub width: usize,
}

/// Output of a taped block forward.
#[derive(Clone, Copy, Debug)]
pub struct BlockOut {
    pub out: Var,
    pub attn: Var,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        width: usize,
        heads: usize,
        causal: bool,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let resid_gain = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, width),
            q: Linear::new(store, &format!("{name}.attn.q"), group, width, width, 1.0, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), group, width, width, 1.0, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), group, width, width, 1.0, rng),
            o: Linear::new(store, &format!("{name}.attn.o"), group, width, width, resid_gain, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, width),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), group, width, 4 * width, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), group, 4 * width, width, resid_gain, rng),
            heads,
            causal,
            width,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Bind<'_, T>, x: Var) -> Result<BlockOut, NumericsError> {
        let h = self.ln1.forward(tape, bind, x)?;
        let q = self.q.forward(tape, bind, h)?;
        let k = self.k.forward(tape, bind, h)?;
        let v = self.v.forward(tape, bind, h)?;
        let attn = tape.attention(q, k, v, self.heads, self.causal)?;
        let a = self.o.forward(tape, bind, attn)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, bind, x)?;
        let h = self.fc1.forward(tape, bind, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, bind, h)?;
        let out = tape.add(x, h)?;
        Ok(BlockOut { out, attn })
    }

    /// Runs `rows` new positions, attending over everything already in `cache`
    /// plus themselves. With an empty cache this is a plain full forward.
    /// Returns the block output and the attention weights
    /// (`heads × rows × total`).
    pub fn forward_cached<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        rows: usize,
        cache: &mut LayerKv<T>,
    ) -> (Vec<T>, Vec<T>) {
        let d = self.width;
        let h = self.ln1.infer(store, x);
        let q = self.q.infer(store, &h, rows);
        let k = self.k.infer(store, &h, rows);
        let v = self.v.infer(store, &h, rows);
        cache.k.extend_from_slice(&k);
        cache.v.extend_from_slice(&v);
        cache.len += rows;
        let total = cache.len;
        let mut attn = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); self.heads * rows * total];
        kernels::attention(&q, &cache.k, &cache.v, rows, total, d, self.heads, self.causal, &mut attn, &mut probs);
        let a = self.o.infer(store, &attn, rows);
        let x1: Vec<T> = x.iter().zip(&a).map(|(p, q)| *p + *q).collect();
        let h = self.ln2.infer(store, &x1);
        let mut h = self.fc1.infer(store, &h, rows);
        for e in h.iter_mut() {
            *e = kernels::gelu(*e);
        }
        let h = self.fc2.infer(store, &h, rows);
        let out = x1.iter().zip(&h).map(|(p, q)| *p + *q).collect();
        (out, probs)
    }
}
