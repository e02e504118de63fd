//! Two-pass inference: a glance produces the initial caption and fills the
//! feature buffer; refinement passes reuse the buffer and never re-encode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Decoded;
use crate::model::ModelBundle;
use crate::vision::{EncoderCounters, VisionFeatureSet};
use crate::Scalar;

/// Default cap on refinement iterations.
pub const MAX_ITERATIONS: usize = 4;

/// Visual prefix used by the glance pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlanceMode {
    /// MLP connector over the last block.
    #[default]
    Mlp,
    /// DeepLens over the taps with no caption ("single glance" ablation).
    SingleGlanceDeepLens,
}

/// Buffered features of the current image.
#[derive(Clone, Debug)]
pub struct FeatureBuffer<T> {
    features: Option<VisionFeatureSet<T>>,
    pub encoder_forward_count: u64,
}

impl<T: Scalar> Default for FeatureBuffer<T> {
    fn default() -> Self {
        Self { features: None, encoder_forward_count: 0 }
    }
}

impl<T: Scalar> FeatureBuffer<T> {
    pub fn fill(&mut self, model: &ModelBundle<T>, pixels: &[f32], image_id: u64) -> Result<()> {
        self.features = Some(model.encode(pixels, image_id)?);
        self.encoder_forward_count += 1;
        Ok(())
    }

    /// Wraps features computed elsewhere (counts as one encoder forward).
    pub fn from_features(features: VisionFeatureSet<T>) -> Self {
        Self { features: Some(features), encoder_forward_count: 1 }
    }

    pub fn features(&self) -> Option<&VisionFeatureSet<T>> {
        self.features.as_ref()
    }
}

/// Output of one decoding pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Pass<T> {
    /// Caption words (EOS stripped).
    pub ids: Vec<usize>,
    pub decoded: Decoded<T>,
}

impl<T: Scalar> Pass<T> {
    pub fn logprob(&self) -> f64 {
        self.decoded.logprob.to_f64().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub o_initial: String,
    /// One entry per requested iteration.
    pub o_refined: Vec<String>,
    pub initial_logprob: f64,
    pub refined_logprob: Vec<f64>,
    pub encoder_forward_count: u64,
    /// Vision-block forwards executed during the refine passes.
    pub refine_block_forwards: u64,
}

impl CaptionResult {
    /// Last refined caption, or the initial one when no refinement ran.
    pub fn final_caption(&self) -> &str {
        self.o_refined.last().unwrap_or(&self.o_initial)
    }
}

fn strip_eos(ids: &[usize], eos: usize) -> Vec<usize> {
    ids.iter().copied().take_while(|&i| i != eos).collect()
}

fn max_new<T: Scalar>(model: &ModelBundle<T>) -> usize {
    model.cfg.deeplens.t_max
}

/// Glance decode from already-encoded features.
pub fn glance_features<T: Scalar>(
    model: &ModelBundle<T>,
    features: &VisionFeatureSet<T>,
    mode: GlanceMode,
    record_attention: bool,
) -> Result<Pass<T>> {
    let prefix = match mode {
        GlanceMode::Mlp => model.mlp_prefix(features)?,
        GlanceMode::SingleGlanceDeepLens => model.deeplens_prefix(features, &[])?,
    };
    let prompt = [model.vocab.caption_task];
    let decoded = if record_attention {
        model.lm.decode_with_attention(&model.store, &prefix, &prompt, max_new(model), model.vocab.eos)?
    } else {
        model.lm.decode_greedy(&model.store, &prefix, &prompt, max_new(model), model.vocab.eos, true)?
    };
    Ok(Pass { ids: strip_eos(&decoded.ids, model.vocab.eos), decoded })
}

/// Glance caption ids for buffered features (MLP prefix).
pub fn glance_ids<T: Scalar>(model: &ModelBundle<T>, features: &VisionFeatureSet<T>) -> Result<Vec<usize>> {
    Ok(glance_features(model, features, GlanceMode::Mlp, false)?.ids)
}

/// Encodes the image once into a fresh buffer and decodes the initial caption.
pub fn glance<T: Scalar>(
    model: &ModelBundle<T>,
    pixels: &[f32],
    image_id: u64,
    mode: GlanceMode,
) -> Result<(Pass<T>, FeatureBuffer<T>)> {
    let mut buffer = FeatureBuffer::default();
    buffer.fill(model, pixels, image_id)?;
    let pass = glance_features(model, buffer.features().unwrap(), mode, false)?;
    Ok((pass, buffer))
}

/// Refinement pass over the buffered features; the encoder is not run.
pub fn refine<T: Scalar>(model: &ModelBundle<T>, buffer: &FeatureBuffer<T>, caption_in: &[usize]) -> Result<Pass<T>> {
    refine_inner(model, buffer, caption_in, false)
}

pub fn refine_with_attention<T: Scalar>(model: &ModelBundle<T>, buffer: &FeatureBuffer<T>, caption_in: &[usize]) -> Result<Pass<T>> {
    refine_inner(model, buffer, caption_in, true)
}

fn refine_inner<T: Scalar>(model: &ModelBundle<T>, buffer: &FeatureBuffer<T>, caption_in: &[usize], record: bool) -> Result<Pass<T>> {
    let features = buffer
        .features()
        .ok_or_else(|| Error::MissingPrerequisite("refine needs a populated feature buffer".into()))?;
    if caption_in.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let prefix = model.deeplens_prefix(features, caption_in)?;
    let ctx = crate::train::refine_context(&model.vocab, caption_in);
    let decoded = if record {
        model.lm.decode_with_attention(&model.store, &prefix, &ctx, max_new(model), model.vocab.eos)?
    } else {
        model.lm.decode_greedy(&model.store, &prefix, &ctx, max_new(model), model.vocab.eos, true)?
    };
    Ok(Pass { ids: strip_eos(&decoded.ids, model.vocab.eos), decoded })
}

/// Glance once, then refine `iterations` times, feeding each output back.
/// Iteration stops early at a fixed point (or an empty caption); the
/// remaining entries repeat the last caption.
pub fn caption<T: Scalar>(
    model: &ModelBundle<T>,
    pixels: &[f32],
    image_id: u64,
    iterations: usize,
    mode: GlanceMode,
) -> Result<CaptionResult> {
    if iterations > MAX_ITERATIONS {
        return Err(Error::TooManyIterations { requested: iterations, max: MAX_ITERATIONS });
    }
    let (initial, buffer) = glance(model, pixels, image_id, mode)?;
    refine_loop(model, &buffer, initial, iterations)
}

/// The refinement loop of [`caption`] for an already-filled buffer.
pub fn refine_loop<T: Scalar>(
    model: &ModelBundle<T>,
    buffer: &FeatureBuffer<T>,
    initial: Pass<T>,
    iterations: usize,
) -> Result<CaptionResult> {
    let text = |ids: &[usize]| -> Result<String> { Ok(model.vocab.decode(ids)?.join(" ")) };
    let before = EncoderCounters::read();
    let mut result = CaptionResult {
        o_initial: text(&initial.ids)?,
        o_refined: Vec::with_capacity(iterations),
        initial_logprob: initial.logprob(),
        refined_logprob: Vec::with_capacity(iterations),
        encoder_forward_count: 0,
        refine_block_forwards: 0,
    };
    let mut current = initial.ids;
    let mut current_lp = result.initial_logprob;
    let mut settled = false;
    for _ in 0..iterations {
        if !settled && !current.is_empty() {
            let next = refine(model, buffer, &current)?;
            settled = next.ids == current;
            current_lp = next.logprob();
            current = next.ids;
        } else {
            settled = true;
        }
        result.o_refined.push(text(&current)?);
        result.refined_logprob.push(current_lp);
    }
    let delta = EncoderCounters::read().since(before);
    result.refine_block_forwards = delta.block_forwards;
    result.encoder_forward_count = buffer.encoder_forward_count + delta.encodes;
    Ok(result)
}
