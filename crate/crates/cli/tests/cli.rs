mod common;

use common::*;
use secr::checkpoint;
use secr::data::DatasetFile;
use secr::params::ParamGroup;

#[test]
fn usage_errors_are_json() {
    let e = error_of(&secr(&["frobnicate"]));
    assert_eq!(e["error"], "usage");
    let e = error_of(&secr(&["train", "--stage", "3", "--dataset", "x", "--out", "y"]));
    assert_eq!(e["error"], "usage");
    assert!(secr(&["--help"]).status.success());
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), &reduced_config(3));
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(&["gen-data", "--config", s(&c), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&c), "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let data = DatasetFile::read(&a).unwrap();
    assert_eq!(data.len(), 24);
    assert!(data.records.iter().all(|r| r.pseudo_initials.len() == 3));

    let h = dir.path().join("h.jsonl");
    ok(&["gen-data", "--config", s(&c), "--split", "heldout", "--count", "4", "--out", s(&h)]);
    let held = DatasetFile::read(&h).unwrap();
    assert_eq!(held.len(), 4);
    assert!(held.records.iter().all(|r| r.scene.id >= 1_000_000));
}

#[test]
fn bad_datasets_are_reported_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), &reduced_config(0));
    let good = dir.path().join("good.jsonl");
    ok(&["gen-data", "--config", s(&c), "--count", "3", "--out", s(&good)]);
    let text = std::fs::read_to_string(&good).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    let dup = dir.path().join("dup.jsonl");
    std::fs::write(&dup, format!("{}\n{}\n{}\n", lines[0], lines[1], lines[0])).unwrap();
    let out = secr(&["train", "--config", s(&c), "--stage", "0", "--dataset", s(&dup), "--out", s(&dir.path().join("m"))]);
    let e = error_of(&out);
    assert_eq!(e["error"], "data");
    assert!(e["message"].as_str().unwrap().contains("line 3"), "{e}");

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, format!("{}\n{{not json\n", lines[0])).unwrap();
    let e = error_of(&secr(&["train", "--config", s(&c), "--stage", "0", "--dataset", s(&broken), "--out", "m"]));
    assert!(e["message"].as_str().unwrap().starts_with("line 2"), "{e}");
}

#[test]
fn stages_chain_and_check_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = reduced_config(5);
    let c = write_config(d, &cfg);
    let train = d.join("train.jsonl");
    ok(&["gen-data", "--config", s(&c), "--out", s(&train)]);

    let e = error_of(&secr(&["train", "--config", s(&c), "--stage", "2", "--dataset", s(&train), "--out", s(&d.join("x"))]));
    assert_eq!(e["error"], "missing_prerequisite");
    assert!(e["message"].as_str().unwrap().contains("stage-1"), "{e}");
    assert!(!d.join("x").exists());

    let s0 = d.join("s0.secr");
    ok(&["train", "--config", s(&c), "--stage", "0", "--dataset", s(&train), "--out", s(&s0)]);
    let e = error_of(&secr(&[
        "train", "--config", s(&c), "--stage", "2", "--dataset", s(&train), "--checkpoint", s(&s0), "--out", s(&d.join("x")),
    ]));
    assert_eq!(e["error"], "missing_prerequisite");
    assert!(e["message"].as_str().unwrap().contains("stage-1"), "{e}");

    let s1 = d.join("s1.secr");
    ok(&["train", "--config", s(&c), "--stage", "1", "--dataset", s(&train), "--checkpoint", s(&s0), "--out", s(&s1)]);
    let s2 = d.join("s2.secr");
    ok(&["train", "--config", s(&c), "--stage", "2", "--dataset", s(&train), "--checkpoint", s(&s1), "--out", s(&s2)]);

    let (m0, _) = checkpoint::load(&s0).unwrap();
    let (m1, _) = checkpoint::load(&s1).unwrap();
    let (m2, meta2) = checkpoint::load(&s2).unwrap();
    let vision = m0.store.checksum(ParamGroup::Vision);
    assert_eq!(m1.store.checksum(ParamGroup::Vision), vision);
    assert_eq!(m2.store.checksum(ParamGroup::Vision), vision);
    assert_eq!(m2.store.checksum(ParamGroup::MlpConnector), m1.store.checksum(ParamGroup::MlpConnector));
    assert_eq!(m2.stages, vec![0, 1, 2]);
    assert_eq!(meta2.run_config.unwrap()["seed"], 5);

    let log = std::fs::read_to_string(d.join("s2.secr.log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"] == 2));
}

#[test]
fn caption_eval_and_probes_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = reduced_config(7);
    full_pipeline(d, &cfg);
    let c = d.join("config.json");
    let ck = d.join("stage2.secr");

    let out = ok(&["caption", "--config", s(&c), "--checkpoint", s(&ck), "--scene-id", "4", "--iterations", "0"]);
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["o_refined"].as_array().unwrap().len(), 0);
    assert_eq!(line["encoder_forward_count"], 1);
    assert_eq!(line["image_id"], 4);

    let out = ok(&["caption", "--config", s(&c), "--checkpoint", s(&ck), "--scene-id", "4", "--iterations", "2"]);
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["o_refined"].as_array().unwrap().len(), 2);
    assert_eq!(line["refine_block_forwards"], 0);

    let e = error_of(&secr(&["caption", "--checkpoint", s(&ck), "--scene-id", "4", "--iterations", "5"]));
    assert_eq!(e["error"], "too_many_iterations");
    let e = error_of(&secr(&["caption", "--checkpoint", s(&d.join("nope.secr")), "--scene-id", "1"]));
    assert_eq!(e["error"], "io");

    let eval = std::fs::read_to_string(d.join("eval.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = eval.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), cfg.data.heldout_scenes + 1);

    let att = d.join("att");
    ok(&["probe", "attention", "--config", s(&c), "--checkpoint", s(&ck), "--dataset", s(&d.join("heldout.jsonl")), "--out", s(&att)]);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(att.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["images"], 2);
    for l in std::fs::read_to_string(att.join("index.jsonl")).unwrap().lines() {
        let e: serde_json::Value = serde_json::from_str(l).unwrap();
        let pgm = std::fs::read(att.join(e["file"].as_str().unwrap())).unwrap();
        assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    }

    let recon = d.join("recon.json");
    let held = d.join("heldout.jsonl");
    let train = d.join("train.jsonl");
    ok(&["probe", "recon", "--config", s(&c), "--checkpoint", s(&ck), "--dataset", s(&train), "--heldout", s(&held), "--out", s(&recon)]);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&recon).unwrap()).unwrap();
    assert!(r["lf_mse"].as_f64().unwrap().is_finite() && r["mf_mse"].as_f64().unwrap().is_finite());
    assert_eq!(r["train_images"], 12);
}

#[test]
fn caption_reads_image_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = reduced_config(8);
    let c = write_config(d, &cfg);
    let train = d.join("train.jsonl");
    ok(&["gen-data", "--config", s(&c), "--count", "4", "--out", s(&train)]);
    let s0 = d.join("s0.secr");
    ok(&["train", "--config", s(&c), "--stage", "0", "--dataset", s(&train), "--out", s(&s0)]);

    let rec = &DatasetFile::read(&train).unwrap().records[1];
    let bytes: Vec<u8> = rec.image().pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
    let ppm = d.join("img.ppm");
    let mut file = b"P6\n32 32\n255\n".to_vec();
    file.extend(&bytes);
    std::fs::write(&ppm, file).unwrap();
    let by_file = ok(&["caption", "--config", s(&c), "--checkpoint", s(&s0), "--image", s(&ppm), "--iterations", "0"]);
    let line: serde_json::Value = serde_json::from_slice(&by_file.stdout).unwrap();
    assert!(line["o_initial"].is_string());

    let small = d.join("small.ppm");
    std::fs::write(&small, b"P6\n2 2\n255\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
    let e = error_of(&secr(&["caption", "--checkpoint", s(&s0), "--image", s(&small)]));
    assert_eq!(e["error"], "invalid_image");
}
