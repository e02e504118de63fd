//! Multimodal connectors: the MLP projector used for the first glance and
//! DeepLens, which fuses several encoder depths with the previous caption.

use num_rational::Ratio;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, LayerKv, LayerNorm, Linear};
use crate::numerics::{kernels, Tape, Tensor, Var};
use crate::params::{normal, Bind, ParamGroup, ParamId, ParamStore};
use crate::vision::{canonical_taps, default_tap_fractions, select_taps, VisionFeatureSet};
use crate::Scalar;

pub const MLP_LAYERS: usize = 4;

/// Four affine layers with GELU in between, applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpConnector {
    pub layers: Vec<Linear>,
}

impl MlpConnector {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, d_v: usize, d_lm: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..MLP_LAYERS)
            .map(|i| {
                let d_in = if i == 0 { d_v } else { d_lm };
                Linear::new(store, &format!("mlp.fc{}", i + 1), ParamGroup::MlpConnector, d_in, d_lm, 1.0, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Bind<'_, T>, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.d_in() {
            return Err(width_mismatch("mlp connector", self.d_in(), tape.value(x).cols()));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bind, h)?;
            if i + 1 < self.layers.len() {
                h = tape.gelu(h)?;
            }
        }
        Ok(h)
    }

    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
        if features.cols() != self.d_in() {
            return Err(width_mismatch("mlp connector", self.d_in(), features.cols()));
        }
        let rows = features.rows();
        let mut h = features.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(store, &h, rows);
            if i + 1 < self.layers.len() {
                h.iter_mut().for_each(|e| *e = kernels::gelu(*e));
            }
        }
        let d = self.layers.last().unwrap().d_out;
        Ok(Tensor::matrix(rows, d, h)?)
    }
}

fn width_mismatch(op: &'static str, expected: usize, got: usize) -> Error {
    crate::NumericsError::ShapeMismatch { op, detail: format!("expected width {expected}, got {got}") }.into()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepLensConfig {
    /// Tap depths as `[numerator, denominator]` fractions of encoder depth.
    pub tap_fractions: Vec<[u32; 2]>,
    pub fusion_blocks: usize,
    /// Longest caption (in tokens) DeepLens accepts.
    pub t_max: usize,
}

impl Default for DeepLensConfig {
    fn default() -> Self {
        Self {
            tap_fractions: default_tap_fractions().iter().map(|r| [*r.numer(), *r.denom()]).collect(),
            fusion_blocks: 2,
            t_max: 20,
        }
    }
}

impl DeepLensConfig {
    pub fn fractions(&self) -> Result<Vec<Ratio<u32>>> {
        self.tap_fractions
            .iter()
            .map(|[n, d]| {
                if *d == 0 {
                    Err(Error::Taps("zero denominator".into()))
                } else {
                    Ok(Ratio::new(*n, *d))
                }
            })
            .collect()
    }

    pub fn taps(&self, layers: usize) -> Result<Vec<usize>> {
        select_taps(layers, &self.fractions()?)
    }
}

const SEG_VISUAL: usize = 0;
const SEG_TEXT: usize = 1;

/// Channel-concatenated multi-depth features, projected to the LM width and
/// fused with caption embeddings by bidirectional encoder blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepLens {
    pub taps: Vec<usize>,
    pub proj: Linear,
    pub pos: ParamId,
    pub seg: ParamId,
    pub emb_ln: LayerNorm,
    pub blocks: Vec<Block>,
    pub n_v: usize,
    pub d_v: usize,
    pub t_max: usize,
}

impl DeepLens {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        taps: &[usize],
        layers: usize,
        n_v: usize,
        d_v: usize,
        d_lm: usize,
        heads: usize,
        cfg: &DeepLensConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let taps = canonical_taps(taps, layers)?;
        let g = ParamGroup::DeepLens;
        let proj = Linear::new(store, "deeplens.proj", g, taps.len() * d_v, d_lm, 1.0, rng);
        let pos = store.add("deeplens.pos", g, normal(vec![n_v + cfg.t_max, d_lm], 0.02, rng));
        let seg = store.add("deeplens.seg", g, normal(vec![2, d_lm], 0.02, rng));
        let emb_ln = LayerNorm::new(store, "deeplens.emb_ln", g, d_lm);
        let blocks = (0..cfg.fusion_blocks)
            .map(|i| Block::new(store, &format!("deeplens.block{}", i + 1), g, d_lm, heads, false, cfg.fusion_blocks, rng))
            .collect();
        Ok(Self { taps, proj, pos, seg, emb_ln, blocks, n_v, d_v, t_max: cfg.t_max })
    }

    fn check_caption_len(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::CaptionTooLong { len: t, max: self.t_max });
        }
        Ok(())
    }

    fn segment_ids(&self, t: usize) -> Vec<usize> {
        let mut ids = vec![SEG_VISUAL; self.n_v];
        ids.resize(self.n_v + t, SEG_TEXT);
        ids
    }

    /// Taped forward. `tapped` holds the tapped block outputs in ascending
    /// tap order; `caption` is a `T × d_lm` embedding matrix, if any.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Bind<'_, T>,
        tapped: &[Var],
        caption: Option<Var>,
    ) -> Result<Var> {
        if tapped.len() != self.taps.len() {
            return Err(Error::Taps(format!("expected {} tapped matrices, got {}", self.taps.len(), tapped.len())));
        }
        let t = caption.map_or(0, |c| tape.value(c).rows());
        self.check_caption_len(t)?;
        let cat = if tapped.len() == 1 { tapped[0] } else { tape.concat_cols(tapped)? };
        let mut x = self.proj.forward(tape, bind, cat)?;
        if let Some(c) = caption.filter(|_| t > 0) {
            x = tape.concat_rows(&[x, c])?;
        }
        let pos = bind.var(tape, self.pos)?;
        let pos = tape.slice_rows(pos, 0, self.n_v + t)?;
        x = tape.add(x, pos)?;
        let seg = bind.var(tape, self.seg)?;
        let seg = tape.gather(seg, &self.segment_ids(t))?;
        x = tape.add(x, seg)?;
        x = self.emb_ln.forward(tape, bind, x)?;
        for block in &self.blocks {
            x = block.forward(tape, bind, x)?.out;
        }
        Ok(tape.slice_rows(x, 0, self.n_v)?)
    }

    /// Taped forward straight from a feature set (features enter as constants).
    pub fn forward_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Bind<'_, T>,
        features: &VisionFeatureSet<T>,
        caption: Option<Var>,
    ) -> Result<Var> {
        let tapped = self
            .taps
            .iter()
            .map(|&i| tape.constant(features.block(i).clone()))
            .collect::<Result<Vec<_>, _>>()?;
        self.forward(tape, bind, &tapped, caption)
    }

    /// Inference forward; `caption` is `T × d_lm` row-major.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &VisionFeatureSet<T>,
        caption: &[T],
        d_lm: usize,
    ) -> Result<Tensor<T>> {
        if features.layers() < *self.taps.last().unwrap() {
            return Err(Error::Taps(format!("feature set has {} blocks, taps need {:?}", features.layers(), self.taps)));
        }
        let t = caption.len() / d_lm;
        self.check_caption_len(t)?;
        let m = self.taps.len();
        let mut cat = vec![T::zero(); self.n_v * m * self.d_v];
        for (j, &tap) in self.taps.iter().enumerate() {
            let f = features.block(tap);
            for r in 0..self.n_v {
                cat[r * m * self.d_v + j * self.d_v..][..self.d_v].copy_from_slice(f.row(r));
            }
        }
        let mut x = self.proj.infer(store, &cat, self.n_v);
        x.extend_from_slice(caption);
        let rows = self.n_v + t;
        let pos = store.get(self.pos).data();
        let seg = store.get(self.seg);
        let ids = self.segment_ids(t);
        for (r, &sid) in ids.iter().enumerate() {
            let row = &mut x[r * d_lm..(r + 1) * d_lm];
            for (c, e) in row.iter_mut().enumerate() {
                *e = *e + pos[r * d_lm + c];
            }
            for (e, s) in row.iter_mut().zip(seg.row(sid)) {
                *e = *e + *s;
            }
        }
        let mut x = self.emb_ln.infer(store, &x);
        for block in &self.blocks {
            x = block.forward_cached(store, &x, rows, &mut LayerKv::default()).0;
        }
        x.truncate(self.n_v * d_lm);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(crate::NumericsError::NonFinite { op: "deeplens" }.into());
        }
        Ok(Tensor::matrix(self.n_v, d_lm, x)?)
    }
}
