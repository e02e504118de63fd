//! End-to-end plumbing shared by the command line and the experiment
//! harness: dataset splits, feature caching and the three training stages.

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{DatasetFile, DatasetRecord};
use crate::error::Result;
use crate::eval::{self, EvalMode, EvalReport};
use crate::model::ModelBundle;
use crate::pipeline::{self, CaptionResult, FeatureBuffer, GlanceMode};
use crate::train::{self, LogRecord, TrainItem};
use crate::vision::VisionFeatureSet;
use crate::Scalar;

pub fn train_split(cfg: &RunConfig) -> DatasetFile {
    DatasetFile::generate(cfg.data.train_scenes, 0, cfg.train_data_seed())
}

pub fn heldout_split(cfg: &RunConfig) -> DatasetFile {
    DatasetFile::generate(cfg.data.heldout_scenes, cfg.data.heldout_start_id, cfg.heldout_data_seed())
}

pub fn encode_all<T: Scalar>(model: &ModelBundle<T>, records: &[DatasetRecord]) -> Result<Vec<VisionFeatureSet<T>>> {
    records.iter().map(|r| model.encode(&r.image().pixels, r.scene.id)).collect()
}

/// Token ids of every record's caption and pseudo-initials, paired with
/// its cached features.
pub fn train_items<T: Scalar>(
    model: &ModelBundle<T>,
    records: &[DatasetRecord],
    features: Vec<VisionFeatureSet<T>>,
) -> Result<Vec<TrainItem<T>>> {
    records
        .iter()
        .zip(features)
        .map(|(r, features)| {
            let caption = model.vocab.encode(&r.caption.tokens)?;
            let pseudo = r
                .pseudo_initials
                .iter()
                .map(|p| Ok((model.vocab.encode(&p.tokens)?, p.edit_positions.len())))
                .collect::<Result<_>>()?;
            Ok(TrainItem { features, caption, pseudo })
        })
        .collect()
}

pub fn stage0<T: Scalar>(model: &mut ModelBundle<T>, cfg: &RunConfig, records: &[DatasetRecord], log: &mut Vec<LogRecord>) -> Result<()> {
    let n = cfg.data.stage0_images.min(records.len());
    let images: Vec<Vec<f32>> = records[..n].iter().map(|r| r.image().pixels).collect();
    train::stage0_pretrain_vision(model, &cfg.train.stage0, cfg.seed, &images, log)
}

pub fn stage1<T: Scalar>(model: &mut ModelBundle<T>, cfg: &RunConfig, items: &[TrainItem<T>], log: &mut Vec<LogRecord>) -> Result<()> {
    train::stage1_finetune(model, &cfg.train.stage1, cfg.seed, items, log)
}

pub fn stage2<T: Scalar>(model: &mut ModelBundle<T>, cfg: &RunConfig, items: &[TrainItem<T>], log: &mut Vec<LogRecord>) -> Result<()> {
    train::stage2_finetune(model, &cfg.train, cfg.seed, items, log)
}

/// Stages 0–2 from scratch on the configured training split.
pub fn train_all(cfg: &RunConfig, log: &mut Vec<LogRecord>) -> Result<ModelBundle<f32>> {
    let mut model = ModelBundle::<f32>::new(&cfg.model, cfg.seed)?;
    let data = train_split(cfg);
    stage0(&mut model, cfg, &data.records, log)?;
    let features = encode_all(&model, &data.records)?;
    let items = train_items(&model, &data.records, features)?;
    stage1(&mut model, cfg, &items, log)?;
    stage2(&mut model, cfg, &items, log)?;
    Ok(model)
}

/// Initial and refined evaluation from one glance per image, so that both
/// modes score exactly the same initial captions.
#[derive(Clone, Debug)]
pub struct PairedEval {
    pub initial: EvalReport,
    pub refined: EvalReport,
    pub results: Vec<CaptionResult>,
}

impl PairedEval {
    pub fn cider_gain(&self) -> f64 {
        self.refined.summary.cider - self.initial.summary.cider
    }

    /// Overall slot-accuracy gain in percentage points.
    pub fn slot_gain_points(&self) -> f64 {
        100.0 * (self.refined.summary.slots.overall - self.initial.summary.slots.overall)
    }
}

pub fn paired_eval<T: Scalar>(model: &ModelBundle<T>, records: &[DatasetRecord], iterations: usize) -> Result<PairedEval> {
    let results = eval::caption_records(model, records, GlanceMode::Mlp, iterations)?;
    let scenes: Vec<_> = records.iter().map(|r| &r.scene).collect();
    let initial: Vec<String> = results.iter().map(|r| r.o_initial.clone()).collect();
    let refined: Vec<String> = results.iter().map(|r| r.final_caption().to_string()).collect();
    Ok(PairedEval {
        initial: EvalReport::score(&scenes, &initial, EvalMode::Initial, 0)?,
        refined: EvalReport::score(&scenes, &refined, EvalMode::Refined, iterations)?,
        results,
    })
}

/// Mean margin over held-out triples with at least one edit.
pub fn heldout_margin<T: Scalar>(model: &ModelBundle<T>, records: &[DatasetRecord]) -> Result<MarginSummary> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut positive = 0usize;
    for r in records {
        let buffer = {
            let mut b = FeatureBuffer::default();
            b.fill(model, &r.image().pixels, r.scene.id)?;
            b
        };
        let truth = model.vocab.encode(&r.caption.tokens)?;
        for p in r.pseudo_initials.iter().filter(|p| !p.edit_positions.is_empty()) {
            let pseudo = model.vocab.encode(&p.tokens)?;
            let d = train::margin_delta(model, buffer.features().unwrap(), &pseudo, &truth)?
                .to_f64()
                .unwrap_or(f64::NAN);
            sum += d;
            n += 1;
            positive += usize::from(d > 0.0);
        }
    }
    Ok(MarginSummary { triples: n, mean_delta: sum / n.max(1) as f64, positive_fraction: positive as f64 / n.max(1) as f64 })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MarginSummary {
    pub triples: usize,
    pub mean_delta: f64,
    pub positive_fraction: f64,
}

/// Encoder forwards of a `caption()` call, for the buffer contract.
pub fn caption_counts<T: Scalar>(model: &ModelBundle<T>, record: &DatasetRecord, iterations: usize) -> Result<(u64, u64)> {
    let r = pipeline::caption(model, &record.image().pixels, record.scene.id, iterations, GlanceMode::Mlp)?;
    Ok((r.encoder_forward_count, r.refine_block_forwards))
}
