//! Staged training: encoder pretraining by reconstruction (stage 0), glance
//! fine-tuning (stage 1) and refinement fine-tuning (stage 2), with AdamW
//! and a warmup + cosine schedule.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::numerics::{kernels, NumericsError, Tape, Tensor, Var};
use crate::params::{Bind, GroupSet, Grads, ParamGroup, ParamStore};
use crate::vision::{patchify, VisionFeatureSet};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl StageConfig {
    pub fn base(learning_rate: f64, epochs: usize, batch_size: usize) -> Self {
        Self {
            learning_rate,
            epochs,
            batch_size,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }

    pub fn validate(&self, stage: u8) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("stage {stage}: {what}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage0: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Use the model's own glance captions as stage-2 inputs instead of the
    /// pseudo-initial captions.
    pub stage2_self_generated: bool,
    /// Training triples (edit count ≥ 1) on which the margin is tracked
    /// after every stage-2 epoch.
    pub margin_probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut stage0 = StageConfig::base(1e-3, 2, 16);
        stage0.beta2 = 0.95;
        stage0.weight_decay = 0.05;
        Self {
            stage0,
            stage1: StageConfig::base(1e-3, 10, 16),
            stage2: StageConfig::base(2e-4, 2, 16),
            stage2_self_generated: false,
            margin_probe_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn stage(&self, stage: u8) -> &StageConfig {
        match stage {
            0 => &self.stage0,
            1 => &self.stage1,
            _ => &self.stage2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..3 {
            self.stage(s).validate(s)?;
        }
        Ok(())
    }
}

/// Groups updated by each stage.
pub fn trainable_groups(stage: u8) -> GroupSet {
    match stage {
        0 => GroupSet::of(&[ParamGroup::Vision, ParamGroup::ReconDecoder]),
        1 => GroupSet::of(&[ParamGroup::MlpConnector, ParamGroup::Lm]),
        2 => GroupSet::of(&[ParamGroup::DeepLens, ParamGroup::Lm]),
        _ => GroupSet::NONE,
    }
}

pub fn warmup_steps(total: usize, ratio: f64) -> usize {
    (ratio * total as f64).round() as usize
}

/// Linear warmup to `peak`, then half-cosine decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64) -> f64 {
    lr_at_with(step, total, peak, warmup_steps(total, 0.03))
}

pub fn lr_at_with(step: usize, total: usize, peak: f64, warmup: usize) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    (peak * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

/// Moment estimates of one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&StageConfig> for AdamConfig {
    fn from(s: &StageConfig) -> Self {
        Self { beta1: s.beta1, beta2: s.beta2, eps: s.eps, weight_decay: s.weight_decay }
    }
}

/// One decoupled-weight-decay Adam update of `param` at 1-based step `t`.
pub fn adamw_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
    t: u64,
) -> Result<()> {
    if grad.len() != param.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "adamw",
            detail: format!("param {} vs grad {}", param.len(), grad.len()),
        }
        .into());
    }
    if state.m.len() != param.len() {
        state.m = vec![T::zero(); param.len()];
        state.v = vec![T::zero(); param.len()];
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let lr_t = T::lit(lr);
    let decay = T::lit(lr * cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    let one = T::one();
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] = param[i] - decay * param[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over a whole parameter store; only parameters with gradients move.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamConfig,
    pub states: Vec<AdamState<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self { cfg, states: vec![AdamState { m: Vec::new(), v: Vec::new() }; n_params], t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        self.t += 1;
        for (id, g) in grads.present() {
            adamw_step(store.get_mut(id).data_mut(), g, &mut self.states[id.0], &self.cfg, lr, self.t)?;
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_delta: Option<f64>,
}

fn diverged(stage: u8, step: usize, e: Error) -> Error {
    match e {
        Error::Numerics(NumericsError::NonFinite { op }) => {
            Error::Diverged { stage, step, detail: format!("non-finite value in {op}") }
        }
        other => other,
    }
}

/// Mini-batch loop shared by all stages. `loss_of(model, tape, bind, i)`
/// records the loss of example `i`; per-example gradients are summed in
/// batch order and averaged. `after_epoch` may report a tracked metric.
#[allow(clippy::too_many_arguments)]
pub fn run_stage<T, L, E>(
    model: &mut ModelBundle<T>,
    stage: u8,
    cfg: &StageConfig,
    seed: u64,
    examples: usize,
    mut loss_of: L,
    mut after_epoch: E,
    log: &mut Vec<LogRecord>,
) -> Result<()>
where
    T: Scalar,
    L: FnMut(&ModelBundle<T>, &mut Tape<T>, &Bind<'_, T>, usize) -> Result<Var>,
    E: FnMut(&ModelBundle<T>, usize) -> Result<Option<f64>>,
{
    cfg.validate(stage)?;
    if examples == 0 {
        return Err(Error::Config(format!("stage {stage}: no training examples")));
    }
    let trainable = trainable_groups(stage);
    let per_epoch = examples.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = warmup_steps(total, cfg.warmup_ratio);
    let mut opt = AdamW::new(AdamConfig::from(cfg), model.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1000 + stage as u64));
    let mut order: Vec<usize> = (0..examples).collect();
    let mut step = 0;
    if let Some(d) = after_epoch(model, 0)? {
        log.push(LogRecord { stage, step: 0, lr: 0.0, loss: f64::NAN, mean_delta: Some(d) });
    }
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads::new(model.store.len());
            let mut loss_sum = 0.0;
            for &i in batch {
                let mut tape = Tape::new();
                let bind = Bind::new(&model.store, trainable);
                let loss = loss_of(model, &mut tape, &bind, i).map_err(|e| diverged(stage, step, e))?;
                loss_sum += tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
                tape.backward(loss)?;
                grads.accumulate(&tape);
            }
            grads.scale(T::one() / T::from_usize(batch.len()).unwrap());
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.global_norm();
                if !norm.is_finite() {
                    return Err(Error::Diverged { stage, step, detail: "non-finite gradient norm".into() });
                }
                if norm > clip {
                    grads.scale(T::lit(clip / norm));
                }
            }
            step += 1;
            let lr = lr_at_with(step, total, cfg.learning_rate, warmup);
            opt.step(&mut model.store, &grads, lr)?;
            let loss = loss_sum / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { stage, step, detail: format!("loss {loss}") });
            }
            log.push(LogRecord { stage, step, lr, loss, mean_delta: None });
        }
        if let Some(d) = after_epoch(model, epoch)? {
            if let Some(last) = log.last_mut() {
                last.mean_delta = Some(d);
            }
        }
    }
    Ok(())
}

/// Stage 0: encoder + reconstruction decoder trained on pixel MSE, then the
/// encoder is frozen.
pub fn stage0_pretrain_vision<T: Scalar>(
    model: &mut ModelBundle<T>,
    cfg: &StageConfig,
    seed: u64,
    images: &[Vec<f32>],
    log: &mut Vec<LogRecord>,
) -> Result<()> {
    let patches: Vec<Tensor<T>> =
        images.iter().map(|im| patchify(im, &model.cfg.vision)).collect::<Result<_>>()?;
    run_stage(
        model,
        0,
        cfg,
        seed,
        images.len(),
        |m, tape, bind, i| recon_loss(m, tape, bind, &patches[i]),
        |_, _| Ok(None),
        log,
    )?;
    model.stages.push(0);
    model.freeze(ParamGroup::Vision);
    Ok(())
}

/// Pixel MSE of the bundle's own decoder on one patchified image.
pub fn recon_loss<T: Scalar>(model: &ModelBundle<T>, tape: &mut Tape<T>, bind: &Bind<'_, T>, patches: &Tensor<T>) -> Result<Var> {
    let outs = model.vision.forward(tape, bind, patches)?;
    let tapped: Vec<Var> = model.recon.taps.iter().map(|&i| outs[i - 1]).collect();
    let pred = model.recon.forward(tape, bind, &tapped)?;
    Ok(tape.mse(pred, patches)?)
}

/// Token ids of a glance example: input `[CAPTION_TASK, c…]`, targets `[c…, EOS]`.
pub fn glance_sequence(model_vocab: &crate::lm::Vocabulary, caption: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = vec![model_vocab.caption_task];
    input.extend_from_slice(caption);
    let mut targets = caption.to_vec();
    targets.push(model_vocab.eos);
    (input, targets)
}

/// Refinement example: input `[REFINE_TASK, ĉ…, SEP, c…]`; the rows from SEP
/// onward predict `[c…, EOS]`. Returns `(input, targets, first target row)`.
pub fn refine_sequence(vocab: &crate::lm::Vocabulary, pseudo: &[usize], truth: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let mut input = refine_context(vocab, pseudo);
    let first = input.len() - 1;
    input.extend_from_slice(truth);
    let mut targets = truth.to_vec();
    targets.push(vocab.eos);
    (input, targets, first)
}

/// `[REFINE_TASK, ĉ…, SEP]`.
pub fn refine_context(vocab: &crate::lm::Vocabulary, caption: &[usize]) -> Vec<usize> {
    let mut ctx = Vec::with_capacity(caption.len() + 2);
    ctx.push(vocab.refine_task);
    ctx.extend_from_slice(caption);
    ctx.push(vocab.sep);
    ctx
}

/// Stage-1 objective: mean token cross-entropy of the caption given the MLP
/// prefix of the last encoder block.
pub fn glance_loss<T: Scalar>(
    model: &ModelBundle<T>,
    tape: &mut Tape<T>,
    bind: &Bind<'_, T>,
    features: &VisionFeatureSet<T>,
    caption: &[usize],
) -> Result<Var> {
    let f = tape.constant(features.last().clone())?;
    let prefix = model.mlp.forward(tape, bind, f)?;
    let (input, targets) = glance_sequence(&model.vocab, caption);
    let out = model.lm.forward(tape, bind, prefix, &input)?;
    Ok(tape.cross_entropy(out.logits, &targets)?)
}

/// Stage-2 objective: mean token cross-entropy of `truth` given the DeepLens
/// prefix (conditioned on `pseudo`) and the pseudo caption as text context.
pub fn refinement_loss<T: Scalar>(
    model: &ModelBundle<T>,
    tape: &mut Tape<T>,
    bind: &Bind<'_, T>,
    features: &VisionFeatureSet<T>,
    pseudo: &[usize],
    truth: &[usize],
) -> Result<Var> {
    let (logits, targets) = refinement_logits(model, tape, bind, features, pseudo, truth)?;
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Teacher-forced logits of the refine continuation and their targets.
pub fn refinement_logits<T: Scalar>(
    model: &ModelBundle<T>,
    tape: &mut Tape<T>,
    bind: &Bind<'_, T>,
    features: &VisionFeatureSet<T>,
    pseudo: &[usize],
    truth: &[usize],
) -> Result<(Var, Vec<usize>)> {
    let emb = if pseudo.is_empty() { None } else { Some(model.lm.embed_var(tape, bind, pseudo)?) };
    let prefix = model.deeplens.forward_features(tape, bind, features, emb)?;
    let (input, targets, first) = refine_sequence(&model.vocab, pseudo, truth);
    let out = model.lm.forward(tape, bind, prefix, &input)?;
    let logits = tape.slice_rows(out.logits, first, targets.len())?;
    Ok((logits, targets))
}

/// `log π(c | i, ĉ) − log π(ĉ | i, ĉ)`, both continuations ending in EOS.
pub fn margin_delta<T: Scalar>(model: &ModelBundle<T>, features: &VisionFeatureSet<T>, pseudo: &[usize], truth: &[usize]) -> Result<T> {
    if pseudo == truth {
        return Ok(T::zero());
    }
    let prefix = model.deeplens_prefix(features, pseudo)?;
    let ctx = refine_context(&model.vocab, pseudo);
    let with_eos = |c: &[usize]| {
        let mut v = c.to_vec();
        v.push(model.vocab.eos);
        v
    };
    let good = model.lm.sequence_logprob(&model.store, &prefix, &ctx, &with_eos(truth))?;
    let bad = model.lm.sequence_logprob(&model.store, &prefix, &ctx, &with_eos(pseudo))?;
    Ok(good - bad)
}

/// Features of one training image plus its captions as token ids.
#[derive(Clone, Debug)]
pub struct TrainItem<T> {
    pub features: VisionFeatureSet<T>,
    pub caption: Vec<usize>,
    /// Pseudo-initial captions (token ids) with their edit counts.
    pub pseudo: Vec<(Vec<usize>, usize)>,
}

/// Stage 1: MLP connector + LM on glance sequences.
pub fn stage1_finetune<T: Scalar>(
    model: &mut ModelBundle<T>,
    cfg: &StageConfig,
    seed: u64,
    items: &[TrainItem<T>],
    log: &mut Vec<LogRecord>,
) -> Result<()> {
    require_stage(model, 0, 1)?;
    run_stage(
        model,
        1,
        cfg,
        seed,
        items.len(),
        |m, tape, bind, i| glance_loss(m, tape, bind, &items[i].features, &items[i].caption),
        |_, _| Ok(None),
        log,
    )?;
    model.stages.push(1);
    model.freeze(ParamGroup::MlpConnector);
    model.check_frozen()
}

/// Stage 2: DeepLens + LM on refinement triples (every pseudo-initial of
/// every item, or the model's own glance captions when `self_generated`).
pub fn stage2_finetune<T: Scalar>(
    model: &mut ModelBundle<T>,
    cfg: &TrainConfig,
    seed: u64,
    items: &[TrainItem<T>],
    log: &mut Vec<LogRecord>,
) -> Result<()> {
    require_stage(model, 1, 2)?;
    let triples: Vec<(usize, Vec<usize>)> = if cfg.stage2_self_generated {
        let mut t = Vec::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            let initial = crate::pipeline::glance_ids(model, &it.features)?;
            t.push((i, if initial.is_empty() { it.caption.clone() } else { initial }));
        }
        t
    } else {
        items.iter().enumerate().flat_map(|(i, it)| it.pseudo.iter().map(move |(p, _)| (i, p.clone()))).collect()
    };
    let probe: Vec<(usize, Vec<usize>)> = items
        .iter()
        .enumerate()
        .flat_map(|(i, it)| it.pseudo.iter().filter(|(_, e)| *e >= 1).map(move |(p, _)| (i, p.clone())))
        .take(cfg.margin_probe_size)
        .collect();
    run_stage(
        model,
        2,
        &cfg.stage2,
        seed,
        triples.len(),
        |m, tape, bind, k| {
            let (i, pseudo) = &triples[k];
            refinement_loss(m, tape, bind, &items[*i].features, pseudo, &items[*i].caption)
        },
        |m, _| {
            if probe.is_empty() {
                return Ok(None);
            }
            let mut sum = 0.0;
            for (i, p) in &probe {
                sum += margin_delta(m, &items[*i].features, p, &items[*i].caption)?.to_f64().unwrap_or(f64::NAN);
            }
            Ok(Some(sum / probe.len() as f64))
        },
        log,
    )?;
    model.stages.push(2);
    model.check_frozen()
}

fn require_stage<T: Scalar>(model: &ModelBundle<T>, needed: u8, running: u8) -> Result<()> {
    if !model.stages.contains(&needed) {
        return Err(Error::MissingPrerequisite(format!("stage {running} needs a stage-{needed} model")));
    }
    Ok(())
}

/// Mean per-position gradient norm of the refinement loss with respect to
/// the logits, split into positions inside and outside the edit set
/// (positions index the truth caption; the trailing EOS counts as outside).
pub fn edit_gradient_split<T: Scalar>(
    model: &ModelBundle<T>,
    features: &VisionFeatureSet<T>,
    pseudo: &[usize],
    truth: &[usize],
    edits: &[usize],
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let bind = Bind::frozen(&model.store);
    let (logits, targets) = refinement_logits(model, &mut tape, &bind, features, pseudo, truth)?;
    let lv = tape.value(logits).clone();
    let leaf = tape.leaf(lv, true)?;
    let loss = tape.cross_entropy(leaf, &targets)?;
    tape.backward(loss)?;
    let g = tape.grad(leaf).expect("logit gradient");
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
    for r in 0..targets.len() {
        let norm = g.row(r).iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        if edits.contains(&r) {
            inside += norm;
            n_in += 1;
        } else {
            outside += norm;
            n_out += 1;
        }
    }
    Ok((inside / n_in.max(1) as f64, outside / n_out.max(1) as f64))
}

/// Mean next-token probability mass the model assigns to the truth, used by
/// quick sanity checks.
pub fn mean_target_prob<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| kernels::log_softmax_at(logits.row(r), t).to_f64().unwrap().exp())
        .sum::<f64>()
        / targets.len() as f64
}
