use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use secr::checkpoint;
use secr::config::RunConfig;
use secr::data::{mix_seed, DatasetFile, DatasetRecord, Image, Lexicon, IMAGE_SIZE};
use secr::eval::{self, EvalMode};
use secr::pipeline::{self, GlanceMode};
use secr::probes::{self, AttentionIndexEntry, FeatureMode};
use secr::train::LogRecord;
use secr::vision::patchify;
use secr::workflow;
use secr::{Error, Model, Result};

#[derive(Parser, Debug)]
#[command(name = "secr", version, about = "Glance-then-refine captioning on a synthetic shapes world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration (defaults apply to omitted keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Heldout,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset split as line-delimited JSON.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        /// Overrides the configured number of scenes.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
        stage: u8,
        /// Training dataset (from gen-data).
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint of the previous stage (required for stages 1 and 2).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training log (line-delimited); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption one image.
    Caption {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG or PNM image of the configured size.
        #[arg(long, conflicts_with = "scene_id", required_unless_present = "scene_id")]
        image: Option<PathBuf>,
        /// Scene to render (looked up in --dataset, or regenerated).
        #[arg(long)]
        scene_id: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        #[arg(long)]
        single_glance: bool,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "refined")]
        mode: EvalMode,
        /// Refinement iterations (defaults to the configured value).
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnostics.
    Probe {
        #[command(subcommand)]
        probe: Probe,
    },
}

#[derive(Subcommand, Debug)]
enum Probe {
    /// Attention maps of generated tokens over the patch grid (PGM dumps).
    Attention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Last-layer vs multi-layer reconstruction probe.
    Recon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
}

fn fail(kind: &str, message: String) -> ExitCode {
    let line = serde_json::to_string(&ErrorLine { error: kind, message: message.replace('\n', " ") })
        .unwrap_or_else(|_| format!("{{\"error\":\"{kind}\"}}"));
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            return fail("usage", first);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

fn read_dataset(path: &Path) -> Result<DatasetFile> {
    Ok(DatasetFile::read(path)?)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, split, count, out } => {
            let cfg = load_config(&common)?;
            let data = match split {
                Split::Train => DatasetFile::generate(count.unwrap_or(cfg.data.train_scenes), 0, cfg.train_data_seed()),
                Split::Heldout => DatasetFile::generate(
                    count.unwrap_or(cfg.data.heldout_scenes),
                    cfg.data.heldout_start_id,
                    cfg.heldout_data_seed(),
                ),
            };
            write_atomic(&out, data.to_jsonl().as_bytes())
        }
        Command::Train { common, stage, dataset, checkpoint, log, out } => {
            let cfg = load_config(&common)?;
            let data = read_dataset(&dataset)?;
            let mut model = match (stage, &checkpoint) {
                (0, None) => Model::new(&cfg.model, cfg.seed)?,
                (0, Some(_)) => return Err(Error::Config("stage 0 starts from scratch; drop --checkpoint".into())),
                (s, None) => {
                    return Err(Error::MissingPrerequisite(format!(
                        "stage {s} needs a stage-{} checkpoint (--checkpoint)",
                        s - 1
                    )))
                }
                (_, Some(p)) => checkpoint::load(p)?.0,
            };
            if stage > 0 && !model.stages.contains(&(stage - 1)) {
                return Err(Error::MissingPrerequisite(format!(
                    "stage {stage} needs a stage-{} checkpoint; {} has stages {:?}",
                    stage - 1,
                    checkpoint.as_ref().unwrap().display(),
                    model.stages
                )));
            }
            let mut records: Vec<LogRecord> = Vec::new();
            match stage {
                0 => workflow::stage0(&mut model, &cfg, &data.records, &mut records)?,
                _ => {
                    let features = workflow::encode_all(&model, &data.records)?;
                    let items = workflow::train_items(&model, &data.records, features)?;
                    if stage == 1 {
                        workflow::stage1(&mut model, &cfg, &items, &mut records)?;
                    } else {
                        workflow::stage2(&mut model, &cfg, &items, &mut records)?;
                    }
                }
            }
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.jsonl");
                PathBuf::from(p)
            });
            write_atomic(&log_path, jsonl(&records)?.as_bytes())?;
            write_atomic(&out, &checkpoint::to_bytes(&model, Some(cfg.resolved()))?)
        }
        Command::Caption { common, checkpoint, image, scene_id, dataset, iterations, single_glance, out } => {
            let cfg = load_config(&common)?;
            let (model, _) = checkpoint::load(&checkpoint)?;
            let (pixels, image_id) = match (image, scene_id) {
                (Some(p), _) => (read_image(&p)?, 0),
                (None, Some(id)) => (scene_record(&cfg, dataset.as_deref(), id)?.image().pixels, id),
                (None, None) => return Err(Error::Config("give --image or --scene-id".into())),
            };
            let mode = if single_glance { GlanceMode::SingleGlanceDeepLens } else { GlanceMode::Mlp };
            let result = pipeline::caption(&model, &pixels, image_id, iterations, mode)?;
            #[derive(Serialize)]
            struct CaptionLine<'a> {
                image_id: u64,
                #[serde(flatten)]
                result: &'a pipeline::CaptionResult,
                config: serde_json::Value,
            }
            let line = serde_json::to_string(&CaptionLine { image_id, result: &result, config: cfg.resolved() })? + "\n";
            match out {
                Some(p) => write_atomic(&p, line.as_bytes()),
                None => {
                    std::io::stdout().write_all(line.as_bytes())?;
                    Ok(())
                }
            }
        }
        Command::Eval { common, dataset, checkpoint, mode, iterations, out } => {
            let cfg = load_config(&common)?;
            let (model, _) = checkpoint::load(&checkpoint)?;
            let data = read_dataset(&dataset)?;
            let iterations = iterations.unwrap_or(cfg.eval.iterations);
            let mut report = eval::evaluate(&model, &data.records, mode, iterations)?;
            report.summary.config = Some(cfg.resolved());
            write_atomic(&out, report.to_jsonl()?.as_bytes())
        }
        Command::Probe { probe: Probe::Attention { common, checkpoint, dataset, out } } => {
            let cfg = load_config(&common)?;
            let (model, _) = checkpoint::load(&checkpoint)?;
            let data = read_dataset(&dataset)?;
            fs::create_dir_all(&out)?;
            let mut index = Vec::new();
            let (mut sums, mut counts) = ([0.0f64; 2], [0usize; 2]);
            for r in data.records.iter().take(cfg.probe.attention_images) {
                let features = model.encode(&r.image().pixels, r.scene.id)?;
                let (init_ids, init_maps, ref_ids, ref_maps) = probes::generation_maps(&model, features)?;
                for (k, (ids, maps)) in [(init_ids, init_maps), (ref_ids, ref_maps)].into_iter().enumerate() {
                    for (m, &id) in maps.iter().zip(&ids) {
                        let pass = if k == 0 { "initial" } else { "refine" };
                        let file = format!("{}_{pass}_{:02}.pgm", r.scene.id, m.token_index);
                        fs::write(out.join(&file), probes::attention_pgm(m, cfg.probe.pgm_scale))?;
                        let entropy = probes::attention_entropy(m);
                        sums[k] += entropy;
                        counts[k] += 1;
                        index.push(AttentionIndexEntry {
                            file,
                            image_id: r.scene.id,
                            pass: m.pass,
                            token_index: m.token_index,
                            token: model.vocab.token(id)?.to_string(),
                            entropy,
                        });
                    }
                }
            }
            write_atomic(&out.join("index.jsonl"), jsonl(&index)?.as_bytes())?;
            #[derive(Serialize)]
            struct AttentionSummary {
                summary: bool,
                images: usize,
                initial_tokens: usize,
                initial_mean_entropy: f64,
                refine_tokens: usize,
                refine_mean_entropy: f64,
                config: serde_json::Value,
            }
            let s = AttentionSummary {
                summary: true,
                images: data.records.len().min(cfg.probe.attention_images),
                initial_tokens: counts[0],
                initial_mean_entropy: sums[0] / counts[0].max(1) as f64,
                refine_tokens: counts[1],
                refine_mean_entropy: sums[1] / counts[1].max(1) as f64,
                config: cfg.resolved(),
            };
            write_atomic(&out.join("summary.json"), (serde_json::to_string(&s)? + "\n").as_bytes())
        }
        Command::Probe { probe: Probe::Recon { common, checkpoint, dataset, heldout, out } } => {
            let cfg = load_config(&common)?;
            let (model, _) = checkpoint::load(&checkpoint)?;
            if !model.stages.contains(&0) {
                return Err(Error::MissingPrerequisite("recon probe needs a checkpoint with a trained encoder (stage 0)".into()));
            }
            let train = read_dataset(&dataset)?;
            let held = read_dataset(&heldout)?;
            let report = recon_probe(&model, &cfg, &train.records, &held.records)?;
            write_atomic(&out, (serde_json::to_string(&report)? + "\n").as_bytes())
        }
    }
}

#[derive(Serialize)]
struct ReconReport {
    train_images: usize,
    heldout_images: usize,
    lf_mse: f64,
    mf_mse: f64,
    pixel_mean_mse: f64,
    taps: Vec<usize>,
    config: serde_json::Value,
}

fn recon_probe(model: &Model, cfg: &RunConfig, train: &[DatasetRecord], held: &[DatasetRecord]) -> Result<ReconReport> {
    let pc = &cfg.probe.recon;
    let train = &train[..pc.train_images.min(train.len())];
    let held = &held[..pc.heldout_images.min(held.len())];
    let prep = |recs: &[DatasetRecord]| -> Result<(Vec<_>, Vec<_>)> {
        let mut feats = Vec::with_capacity(recs.len());
        let mut targets = Vec::with_capacity(recs.len());
        for r in recs {
            let px = r.image().pixels;
            feats.push(model.encode(&px, r.scene.id)?);
            targets.push(patchify::<f32>(&px, &model.cfg.vision)?);
        }
        Ok((feats, targets))
    };
    let (tf, tt) = prep(train)?;
    let (hf, ht) = prep(held)?;
    let mut log = Vec::new();
    let lf = probes::recon_train(model, FeatureMode::LF, pc, cfg.seed, &tf, &tt, &mut log)?;
    let mf = probes::recon_train(model, FeatureMode::MF, pc, cfg.seed, &tf, &tt, &mut log)?;
    model.check_frozen()?;
    Ok(ReconReport {
        train_images: train.len(),
        heldout_images: held.len(),
        lf_mse: probes::recon_mse(&lf, &hf, &ht)?,
        mf_mse: probes::recon_mse(&mf, &hf, &ht)?,
        pixel_mean_mse: probes::pixel_mean_mse(&tt, &ht),
        taps: mf.decoder.taps.clone(),
        config: cfg.resolved(),
    })
}

/// Record for `id`, from the dataset file if given, else regenerated from
/// the configured split seeds.
fn scene_record(cfg: &RunConfig, dataset: Option<&Path>, id: u64) -> Result<DatasetRecord> {
    if let Some(p) = dataset {
        return read_dataset(p)?
            .records
            .into_iter()
            .find(|r| r.scene.id == id)
            .ok_or_else(|| Error::Config(format!("scene {id} not in {}", p.display())));
    }
    let base = if id >= cfg.data.heldout_start_id { cfg.heldout_data_seed() } else { cfg.train_data_seed() };
    Ok(DatasetRecord::generate(id, mix_seed(base, id), &Lexicon::shapes_world()))
}

fn read_image(path: &Path) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::InvalidImage(format!("{}: {e}", path.display())))?.to_rgb8();
    if img.width() as usize != IMAGE_SIZE || img.height() as usize != IMAGE_SIZE {
        return Err(Error::InvalidImage(format!(
            "{} is {}x{}, expected {IMAGE_SIZE}x{IMAGE_SIZE}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let pixels = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Image::from_pixels(pixels)?.pixels)
}
