//! Diagnostics: attention maps over the visual prefix and the frozen-feature
//! pixel reconstruction probe (last-layer vs multi-layer features).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::{Block, LayerKv, LayerNorm, Linear};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{normal, Bind, Grads, GroupSet, ParamGroup, ParamId, ParamStore};
use crate::pipeline;
use crate::train::{lr_at_with, warmup_steps, AdamConfig, AdamW, LogRecord, StageConfig};
use crate::vision::{canonical_taps, VisionConfig, VisionFeatureSet};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub d_dec: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self { d_dec: 64, blocks: 2, heads: 4 }
    }
}

/// MAE-style pixel decoder: tapped features (channel-concatenated) are
/// projected, given positions, passed through bidirectional blocks and
/// mapped back to patch pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconDecoder {
    pub taps: Vec<usize>,
    pub in_proj: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
    pub out: Linear,
    pub n_v: usize,
}

impl ReconDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &ReconConfig,
        taps: &[usize],
        vision: &VisionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let taps = canonical_taps(taps, vision.layers)?;
        let g = ParamGroup::ReconDecoder;
        let d = cfg.d_dec;
        let in_proj = Linear::new(store, "recon.in_proj", g, taps.len() * vision.d_v, d, 1.0, rng);
        let pos = store.add("recon.pos", g, normal(vec![vision.tokens(), d], 0.02, rng));
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(store, &format!("recon.block{}", i + 1), g, d, cfg.heads, false, cfg.blocks, rng))
            .collect();
        let ln = LayerNorm::new(store, "recon.ln", g, d);
        let out = Linear::new(store, "recon.out", g, d, vision.patch_dim(), 1.0, rng);
        Ok(Self { taps, in_proj, pos, blocks, ln, out, n_v: vision.tokens() })
    }

    /// Taped forward; `tapped` are the tapped block outputs in tap order.
    /// Returns predicted patches (`N_v × patch_dim`).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Bind<'_, T>, tapped: &[Var]) -> Result<Var> {
        let x = if tapped.len() == 1 { tapped[0] } else { tape.concat_cols(tapped)? };
        let x = self.in_proj.forward(tape, bind, x)?;
        let pos = bind.var(tape, self.pos)?;
        let mut x = tape.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(tape, bind, x)?.out;
        }
        let x = self.ln.forward(tape, bind, x)?;
        Ok(self.out.forward(tape, bind, x)?)
    }

    pub fn forward_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Bind<'_, T>,
        features: &VisionFeatureSet<T>,
    ) -> Result<Var> {
        let tapped = self
            .taps
            .iter()
            .map(|&i| tape.constant(features.block(i).clone()))
            .collect::<Result<Vec<_>, _>>()?;
        self.forward(tape, bind, &tapped)
    }

    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, features: &VisionFeatureSet<T>) -> Result<Tensor<T>> {
        let m = self.taps.len();
        let d_v = features.block(self.taps[0]).cols();
        let mut cat = vec![T::zero(); self.n_v * m * d_v];
        for (j, &tap) in self.taps.iter().enumerate() {
            let f = features.block(tap);
            for r in 0..self.n_v {
                cat[(r * m + j) * d_v..][..d_v].copy_from_slice(f.row(r));
            }
        }
        let mut x = self.in_proj.infer(store, &cat, self.n_v);
        for (a, p) in x.iter_mut().zip(store.get(self.pos).data()) {
            *a = *a + *p;
        }
        for b in &self.blocks {
            x = b.forward_cached(store, &x, self.n_v, &mut LayerKv::default()).0;
        }
        let x = self.ln.infer(store, &x);
        let y = self.out.infer(store, &x, self.n_v);
        Ok(Tensor::matrix(self.n_v, self.out.d_out, y)?)
    }
}

/// Which decoding pass an attention map was taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionPass {
    Initial,
    Refine,
}

/// Attention of one generating position over the visual patch grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// Row-major `grid × grid` weights summing to one.
    pub weights: Vec<f64>,
    pub grid: usize,
    pub token_index: usize,
    pub pass: AttentionPass,
}

/// Restricts a head-averaged attention row to the first `n_v` (visual)
/// columns and renormalizes.
pub fn visual_attention<T: Scalar>(row: &[T], n_v: usize) -> Result<Vec<f64>> {
    if row.len() < n_v {
        return Err(Error::Config(format!("attention row has {} columns, need {n_v}", row.len())));
    }
    let w: Vec<f64> = row[..n_v].iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Config(format!("no attention mass on the visual prefix ({total})")));
    }
    Ok(w.into_iter().map(|x| x / total).collect())
}

fn map_from_row<T: Scalar>(row: &[T], n_v: usize, token_index: usize, pass: AttentionPass) -> Result<AttentionMap> {
    let grid = (n_v as f64).sqrt().round() as usize;
    Ok(AttentionMap { weights: visual_attention(row, n_v)?, grid, token_index, pass })
}

/// Teacher-forced map for generating `caption[token_index]`. The refine pass
/// conditions on `initial` (through DeepLens and the text context).
pub fn attention_map<T: Scalar>(
    model: &ModelBundle<T>,
    features: &VisionFeatureSet<T>,
    caption: &[usize],
    token_index: usize,
    pass: AttentionPass,
    initial: &[usize],
) -> Result<AttentionMap> {
    if token_index >= caption.len() {
        return Err(Error::IndexOutOfRange { index: token_index, len: caption.len() });
    }
    let (prefix, mut input) = match pass {
        AttentionPass::Initial => (model.mlp_prefix(features)?, vec![model.vocab.caption_task]),
        AttentionPass::Refine => {
            if initial.is_empty() {
                return Err(Error::EmptyCaption);
            }
            (model.deeplens_prefix(features, initial)?, crate::train::refine_context(&model.vocab, initial))
        }
    };
    let row_index = input.len() - 1 + token_index;
    input.extend_from_slice(&caption[..token_index]);
    let mut cache = model.lm.start(&model.store, &prefix)?;
    let (_, attn) = model.lm.feed(&model.store, &mut cache, &input)?;
    let total = prefix.rows() + input.len();
    map_from_row(&attn[row_index * total..(row_index + 1) * total], prefix.rows(), token_index, pass)
}

/// Maps for every token generated by the glance pass and by one refine pass
/// over its output (EOS steps excluded).
pub fn generation_maps<T: Scalar>(
    model: &ModelBundle<T>,
    features: VisionFeatureSet<T>,
) -> Result<(Vec<usize>, Vec<AttentionMap>, Vec<usize>, Vec<AttentionMap>)> {
    let n_v = model.cfg.vision.tokens();
    let buffer = pipeline::FeatureBuffer::from_features(features);
    let initial = pipeline::glance_features(model, buffer.features().unwrap(), pipeline::GlanceMode::Mlp, true)?;
    let collect = |pass: &pipeline::Pass<T>, which| -> Result<Vec<AttentionMap>> {
        pass.decoded.attention[..pass.ids.len()]
            .iter()
            .enumerate()
            .map(|(j, row)| map_from_row(row, n_v, j, which))
            .collect()
    };
    let initial_maps = collect(&initial, AttentionPass::Initial)?;
    if initial.ids.is_empty() {
        return Ok((initial.ids, initial_maps, Vec::new(), Vec::new()));
    }
    let refined = pipeline::refine_with_attention(model, &buffer, &initial.ids)?;
    let refined_maps = collect(&refined, AttentionPass::Refine)?;
    Ok((initial.ids, initial_maps, refined.ids, refined_maps))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn attention_entropy(map: &AttentionMap) -> f64 {
    entropy(&map.weights)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Binary 8-bit PGM of the map, each grid cell drawn as a `scale × scale`
/// block, brightest cell = 255.
pub fn attention_pgm(map: &AttentionMap, scale: usize) -> Vec<u8> {
    let side = map.grid * scale;
    let max = map.weights.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            let w = map.weights[(y / scale) * map.grid + x / scale];
            out.push(if max > 0.0 { (255.0 * w / max).round() as u8 } else { 0 });
        }
    }
    out
}

/// Line of the attention dump index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionIndexEntry {
    pub file: String,
    pub image_id: u64,
    pub pass: AttentionPass,
    pub token_index: usize,
    pub token: String,
    pub entropy: f64,
}

/// Feature mode of the reconstruction probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    /// Last block only.
    LF,
    /// Default taps, channel-concatenated.
    MF,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconProbeConfig {
    pub decoder: ReconConfig,
    pub optimizer: StageConfig,
    pub train_images: usize,
    pub heldout_images: usize,
}

impl Default for ReconProbeConfig {
    fn default() -> Self {
        let mut optimizer = StageConfig::base(1e-3, 10, 16);
        optimizer.beta2 = 0.95;
        optimizer.weight_decay = 0.05;
        Self { decoder: ReconConfig::default(), optimizer, train_images: 1000, heldout_images: 200 }
    }
}

/// A pixel decoder trained on frozen features; owns its parameters so the
/// captioner's store is never touched.
#[derive(Clone, Debug)]
pub struct ReconProbe<T> {
    pub mode: FeatureMode,
    pub decoder: ReconDecoder,
    pub store: ParamStore<T>,
}

impl<T: Scalar> ReconProbe<T> {
    pub fn new(mode: FeatureMode, cfg: &ReconConfig, vision: &VisionConfig, taps: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let taps = match mode {
            FeatureMode::LF => vec![vision.layers],
            FeatureMode::MF => taps.to_vec(),
        };
        let decoder = ReconDecoder::new(&mut store, cfg, &taps, vision, &mut rng)?;
        Ok(Self { mode, decoder, store })
    }

    pub fn predict(&self, features: &VisionFeatureSet<T>) -> Result<Tensor<T>> {
        self.decoder.infer(&self.store, features)
    }
}

/// Trains a probe on frozen `features` against `targets` (patchified
/// images) by pixel MSE.
pub fn recon_train<T: Scalar>(
    model: &ModelBundle<T>,
    mode: FeatureMode,
    cfg: &ReconProbeConfig,
    seed: u64,
    features: &[VisionFeatureSet<T>],
    targets: &[Tensor<T>],
    log: &mut Vec<LogRecord>,
) -> Result<ReconProbe<T>> {
    let opt_cfg = &cfg.optimizer;
    opt_cfg.validate(0)?;
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::Config("recon probe needs one target per feature set".into()));
    }
    let taps = model.cfg.deeplens.taps(model.cfg.vision.layers)?;
    let mut probe = ReconProbe::new(mode, &cfg.decoder, &model.cfg.vision, &taps, mix_seed(seed, 2000 + mode as u64))?;
    let trainable = GroupSet::of(&[ParamGroup::ReconDecoder]);
    let per_epoch = features.len().div_ceil(opt_cfg.batch_size);
    let total = per_epoch * opt_cfg.epochs;
    let warmup = warmup_steps(total, opt_cfg.warmup_ratio);
    let mut opt = AdamW::new(AdamConfig::from(opt_cfg), probe.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3000 + mode as u64));
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut step = 0;
    for _ in 0..opt_cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opt_cfg.batch_size) {
            let mut grads = Grads::new(probe.store.len());
            let mut loss_sum = 0.0;
            for &i in batch {
                let mut tape = Tape::new();
                let bind = Bind::new(&probe.store, trainable);
                let pred = probe.decoder.forward_features(&mut tape, &bind, &features[i])?;
                let loss = tape.mse(pred, &targets[i])?;
                loss_sum += tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
                tape.backward(loss)?;
                grads.accumulate(&tape);
            }
            grads.scale(T::one() / T::from_usize(batch.len()).unwrap());
            if let Some(clip) = opt_cfg.grad_clip {
                let norm = grads.global_norm();
                if !norm.is_finite() {
                    return Err(Error::Diverged { stage: 0, step, detail: "recon probe: non-finite gradient".into() });
                }
                if norm > clip {
                    grads.scale(T::lit(clip / norm));
                }
            }
            step += 1;
            let lr = lr_at_with(step, total, opt_cfg.learning_rate, warmup);
            opt.step(&mut probe.store, &grads, lr)?;
            let loss = loss_sum / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: 0, step, detail: format!("recon probe loss {loss}") });
            }
            log.push(LogRecord { stage: 0, step, lr, loss, mean_delta: None });
        }
    }
    Ok(probe)
}

/// Mean squared error per pixel value over all images.
pub fn recon_mse<T: Scalar>(probe: &ReconProbe<T>, features: &[VisionFeatureSet<T>], targets: &[Tensor<T>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (f, t) in features.iter().zip(targets) {
        let p = probe.predict(f)?;
        sum += squared_error(p.data(), t.data());
        n += t.numel();
    }
    Ok(sum / n.max(1) as f64)
}

fn squared_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.to_f64().unwrap_or(f64::NAN) - y.to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum()
}

/// Held-out MSE of predicting every image by the per-value mean of the
/// training images (the trivial baseline a probe must beat).
pub fn pixel_mean_mse<T: Scalar>(train: &[Tensor<T>], heldout: &[Tensor<T>]) -> f64 {
    let Some(first) = train.first() else { return f64::NAN };
    let mut mean = vec![0.0; first.numel()];
    for t in train {
        for (m, x) in mean.iter_mut().zip(t.data()) {
            *m += x.to_f64().unwrap_or(f64::NAN);
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut sum = 0.0;
    let mut n = 0;
    for t in heldout {
        for (m, x) in mean.iter().zip(t.data()) {
            let d = m - x.to_f64().unwrap_or(f64::NAN);
            sum += d * d;
        }
        n += t.numel();
    }
    sum / n.max(1) as f64
}
