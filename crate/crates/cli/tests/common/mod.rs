#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use secr::config::RunConfig;
use secr::train::StageConfig;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_secr"))
}

pub fn secr(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn secr")
}

pub fn ok(args: &[&str]) -> Output {
    let out = secr(args);
    assert!(out.status.success(), "secr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// The error line a failing invocation prints on stderr.
pub fn error_of(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap_or("")).unwrap_or_else(|e| panic!("stderr {text:?}: {e}"))
}

/// A small model and dataset that run every command in seconds.
pub fn reduced_config(seed: u64) -> RunConfig {
    let mut c = RunConfig { seed, ..RunConfig::default() };
    c.model.vision.d_v = 16;
    c.model.vision.layers = 3;
    c.model.vision.heads = 2;
    c.model.lm.d_lm = 16;
    c.model.lm.layers = 1;
    c.model.lm.heads = 2;
    c.model.deeplens.fusion_blocks = 1;
    c.model.recon.d_dec = 16;
    c.model.recon.blocks = 1;
    c.model.recon.heads = 2;
    c.data.train_scenes = 24;
    c.data.heldout_scenes = 6;
    c.data.stage0_images = 24;
    c.train.stage0 = StageConfig { epochs: 1, batch_size: 8, ..c.train.stage0 };
    c.train.stage1 = StageConfig { epochs: 1, batch_size: 8, ..c.train.stage1 };
    c.train.stage2 = StageConfig { epochs: 1, batch_size: 8, ..c.train.stage2 };
    c.train.margin_probe_size = 8;
    c.probe.recon.train_images = 12;
    c.probe.recon.heldout_images = 6;
    c.probe.recon.optimizer.epochs = 1;
    c.probe.recon.decoder = c.model.recon.clone();
    c.probe.attention_images = 2;
    c
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// gen-data, the three training stages and an evaluation, all in `dir`.
pub fn full_pipeline(dir: &Path, cfg: &RunConfig) {
    let c = write_config(dir, cfg);
    let c = s(&c);
    let train = dir.join("train.jsonl");
    let held = dir.join("heldout.jsonl");
    ok(&["gen-data", "--config", c, "--out", s(&train)]);
    ok(&["gen-data", "--config", c, "--split", "heldout", "--out", s(&held)]);
    let mut prev: Option<PathBuf> = None;
    for stage in 0..3 {
        let out = dir.join(format!("stage{stage}.secr"));
        let st = stage.to_string();
        let mut args = vec!["train", "--config", c, "--stage", &st, "--dataset", s(&train), "--out", s(&out)];
        let prev_s;
        if let Some(p) = &prev {
            prev_s = p.to_str().unwrap().to_string();
            args.extend(["--checkpoint", &prev_s]);
        }
        ok(&args);
        prev = Some(out);
    }
    let ck = dir.join("stage2.secr");
    ok(&["eval", "--config", c, "--dataset", s(&held), "--checkpoint", s(&ck), "--out", s(&dir.join("eval.jsonl"))]);
}
