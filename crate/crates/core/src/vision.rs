//! Toy ViT encoder that keeps every block's output.

use std::cell::Cell;

use num_rational::Ratio;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, LayerKv, Linear};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{normal, Bind, ParamGroup, ParamId, ParamStore};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self { image_size: 32, patch_size: 4, d_v: 64, layers: 8, heads: 4 }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.d_v % self.heads != 0 {
            return Err(Error::Config(format!("d_v {} is not divisible by {} heads", self.d_v, self.heads)));
        }
        if self.layers == 0 {
            return Err(Error::Config("vision encoder needs at least one block".into()));
        }
        Ok(())
    }

    /// Patch tokens per image.
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Default tap depths, as fractions of encoder depth.
pub fn default_tap_fractions() -> Vec<Ratio<u32>> {
    vec![Ratio::new(13, 24), Ratio::new(18, 24), Ratio::new(23, 24)]
}

/// Maps depth fractions to 1-indexed block indices `ceil(layers · f)`,
/// sorted with duplicates removed.
pub fn select_taps(layers: usize, fractions: &[Ratio<u32>]) -> Result<Vec<usize>> {
    let mut taps = Vec::with_capacity(fractions.len());
    for f in fractions {
        if *f.numer() == 0 || f > &Ratio::from_integer(1) {
            return Err(Error::Taps(format!("fraction {f} outside (0, 1]")));
        }
        let l = Ratio::from_integer(layers as u64) * Ratio::new(*f.numer() as u64, *f.denom() as u64);
        taps.push(l.ceil().to_integer() as usize);
    }
    taps.sort_unstable();
    taps.dedup();
    if taps.is_empty() || taps[0] == 0 {
        return Err(Error::Taps("no blocks selected".into()));
    }
    Ok(taps)
}

/// Checks an explicit tap set against the encoder depth and canonicalizes it.
pub fn canonical_taps(taps: &[usize], layers: usize) -> Result<Vec<usize>> {
    let mut t = taps.to_vec();
    t.sort_unstable();
    t.dedup();
    if t.is_empty() {
        return Err(Error::Taps("empty tap set".into()));
    }
    if t[0] == 0 || *t.last().unwrap() > layers {
        return Err(Error::Taps(format!("taps {t:?} outside 1..={layers}")));
    }
    Ok(t)
}

/// Splits an `image_size × image_size × 3` channel-last image into raster
/// ordered patches, each flattened channel-last.
pub fn patchify<T: Scalar>(pixels: &[f32], cfg: &VisionConfig) -> Result<Tensor<T>> {
    let s = cfg.image_size;
    if pixels.len() != s * s * 3 {
        return Err(Error::InvalidImage(format!("expected {s}×{s}×3 = {} values, got {}", s * s * 3, pixels.len())));
    }
    if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidImage(format!("pixel value {bad} outside [0, 1]")));
    }
    let p = cfg.patch_size;
    let side = s / p;
    let mut out = Vec::with_capacity(cfg.tokens() * cfg.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for dy in 0..p {
                let row = (py * p + dy) * s + px * p;
                out.extend(pixels[row * 3..(row + p) * 3].iter().map(|&v| T::lit(v as f64)));
            }
        }
    }
    Ok(Tensor::matrix(cfg.tokens(), cfg.patch_dim(), out)?)
}

/// Every block output for one image; the payload of the feature buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionFeatureSet<T> {
    per_block: Vec<Tensor<T>>,
    pub image_id: u64,
}

impl<T: Scalar> VisionFeatureSet<T> {
    pub fn new(per_block: Vec<Tensor<T>>, image_id: u64) -> Self {
        Self { per_block, image_id }
    }

    /// Output of block `index` (1-indexed).
    pub fn block(&self, index: usize) -> &Tensor<T> {
        &self.per_block[index - 1]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.per_block[index - 1]
    }

    pub fn layers(&self) -> usize {
        self.per_block.len()
    }

    pub fn last(&self) -> &Tensor<T> {
        self.per_block.last().expect("at least one block")
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.per_block.iter().enumerate().map(|(i, t)| (i + 1, t))
    }
}

thread_local! {
    static ENCODES: Cell<u64> = const { Cell::new(0) };
    static BLOCK_FORWARDS: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread instrumentation of encoder work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncoderCounters {
    pub encodes: u64,
    pub block_forwards: u64,
}

impl EncoderCounters {
    pub fn read() -> Self {
        Self { encodes: ENCODES.with(Cell::get), block_forwards: BLOCK_FORWARDS.with(Cell::get) }
    }

    pub fn since(self, earlier: Self) -> Self {
        Self { encodes: self.encodes - earlier.encodes, block_forwards: self.block_forwards - earlier.block_forwards }
    }
}

fn bump(cell: &'static std::thread::LocalKey<Cell<u64>>) {
    cell.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub cfg: VisionConfig,
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
}

impl VisionEncoder {
    pub fn new<T: Scalar>(cfg: &VisionConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Vision;
        let patch = Linear::new(store, "vision.patch", g, cfg.patch_dim(), cfg.d_v, 1.0, rng);
        let pos = store.add("vision.pos", g, normal(vec![cfg.tokens(), cfg.d_v], 0.02, rng));
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("vision.block{}", i + 1), g, cfg.d_v, cfg.heads, false, cfg.layers, rng))
            .collect();
        Self { cfg: cfg.clone(), patch, pos, blocks }
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, pixels: &[f32], image_id: u64) -> Result<VisionFeatureSet<T>> {
        let patches = patchify::<T>(pixels, &self.cfg)?;
        self.encode_patches(store, &patches, image_id)
    }

    pub fn encode_patches<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        patches: &Tensor<T>,
        image_id: u64,
    ) -> Result<VisionFeatureSet<T>> {
        bump(&ENCODES);
        let n = self.cfg.tokens();
        let mut x = self.patch.infer(store, patches.data(), n);
        for (a, p) in x.iter_mut().zip(store.get(self.pos).data()) {
            *a = *a + *p;
        }
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            bump(&BLOCK_FORWARDS);
            let (out, _) = block.forward_cached(store, &x, n, &mut LayerKv::default());
            if !out.iter().all(|v| v.is_finite()) {
                return Err(crate::NumericsError::NonFinite { op: "vision block" }.into());
            }
            per_block.push(Tensor::matrix(n, self.cfg.d_v, out.clone())?);
            x = out;
        }
        Ok(VisionFeatureSet::new(per_block, image_id))
    }

    /// Taped forward used while the encoder itself is trained; returns the
    /// output variable of every block.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Bind<'_, T>, patches: &Tensor<T>) -> Result<Vec<Var>> {
        bump(&ENCODES);
        let x = tape.constant(patches.clone())?;
        let x = self.patch.forward(tape, bind, x)?;
        let pos = bind.var(tape, self.pos)?;
        let mut x = tape.add(x, pos)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            bump(&BLOCK_FORWARDS);
            x = block.forward(tape, bind, x)?.out;
            outs.push(x);
        }
        Ok(outs)
    }
}
