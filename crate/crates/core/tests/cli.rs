mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::{Command, Output};

use axunet::data::store;
use axunet::gradcam::decode_ppm;
use axunet::model::{Model, ModelConfig};
use axunet::tensor::io;
use axunet::train::Checkpoint;
use axunet::Tensor;

fn axunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_axunet")).args(args).env("AXUNET_THREADS", "2").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = axunet(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Exit code and the single stderr line.
fn fails(args: &[&str]) -> (i32, String) {
    let o = axunet(args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    (o.status.code().unwrap(), err.trim_end().to_string())
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let out = ok(&["synth", "--out", s(&a), "--cases", "4", "--dims", "64x64x32", "--seed", "7"]);
    assert_eq!(out.lines().count(), 5);
    ok(&["synth", "--out", s(&b), "--cases", "4", "--dims", "64x64x32", "--seed", "7"]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 16);
    assert_eq!(ta, tb);

    let (code, err) = fails(&["synth", "--out", s(&a), "--cases", "4", "--dims", "64x64x32", "--seed", "8"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("E_CONFIG: ") && err.contains("--force"), "{err}");
    ok(&["synth", "--out", s(&a), "--cases", "4", "--dims", "64x64x32", "--seed", "8", "--force"]);
    assert_ne!(tree(&a), tb);
}

#[test]
fn synth_rejects_bad_arguments() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    let (code, err) = fails(&["synth", "--out", s(&d), "--cases", "0"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("E_CONFIG: "), "{err}");
    let (code, err) = fails(&["synth", "--out", s(&d), "--dims", "8x8x8"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("E_CONFIG: "), "{err}");
    let (code, err) = fails(&["synth", "--out", s(&d), "--dims", "64x64"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("E_CONFIG: "), "{err}");
    let (code, err) = fails(&["frobnicate"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("E_CONFIG: "), "{err}");
    assert!(ok(&["--help"]).contains("gradcam"));
}

fn write_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{
  "data": {{ "root": "data", "cache_dir": "cache", "tumor_threshold": 0.007, "image_size": [64, 64] }},
  "model": {{ "width_multiplier": 0.125, "middle_repeats": 1, "attention_reduction": 8, "combine_mode": "concat", "attention_enabled": true }},
  "train": {{ "lr0": 0.001, "epochs": {epochs}, "batch_size": 8, "seed": 3 }},
  "io": {{ "checkpoint_dir": "ckpt", "report_path": "report.json" }}
}}
"#
    );
    let path = dir.join("run.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn full_workflow() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    ok(&["synth", "--out", s(&root.join("data")), "--cases", "10", "--dims", "64x64x24", "--seed", "1"]);
    let cfg = write_config(root, 1);

    let out = ok(&["preprocess", "--config", s(&cfg)]);
    assert_eq!(out.lines().count(), 3, "{out}");
    assert!(out.lines().next().unwrap().starts_with("train     8 cases"), "{out}");
    let cache = root.join("cache");
    let split = store::read_split(&cache).unwrap();
    let ids = store::list_cases(&root.join("data")).unwrap();
    let all: BTreeSet<&String> = split.train.iter().chain(&split.val).chain(&split.test).collect();
    assert_eq!(all.len(), ids.len());
    assert_eq!(split.len(), ids.len());
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (8, 1, 1));

    let slices = tree(&cache.join("slices"));
    for id in &ids {
        let v = store::read_case(&root.join("data"), id).unwrap();
        let (h, w, d) = v.dims();
        let want = common::recount_slices(&v.labels, h, w, d, 0.007).len();
        let got = slices.keys().filter(|k| k.starts_with(&format!("{id}_")) && k.ends_with(".img.axtn")).count();
        assert_eq!(got, want, "{id}");
        assert!(want > 0);
    }
    let before = tree(&cache);
    ok(&["preprocess", "--config", s(&cfg)]);
    assert_eq!(tree(&cache), before);

    let out = ok(&["train", "--config", s(&cfg)]);
    assert!(out.contains("epoch   0"), "{out}");
    let ckpt = root.join("ckpt");
    assert!(Checkpoint::load(&ckpt).is_ok());

    let table = ok(&["eval", "--config", s(&cfg)]);
    assert!(table.contains("overall"), "{table}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("report.json")).unwrap()).unwrap();
    assert!(report["mean"]["mean"].as_f64().is_some());

    let img = cache.join("slices").read_dir().unwrap().map(|e| e.unwrap().path()).find(|p| s(p).ends_with(".img.axtn")).unwrap();
    let ppm = root.join("out/cam.ppm");
    ok(&["gradcam", "--checkpoint", s(&ckpt), "--input", s(&img), "--layer", "attention1", "--region", "tc", "--out", s(&ppm)]);
    let bytes = std::fs::read(&ppm).unwrap();
    assert!(bytes.starts_with(b"P6\n64 64\n255\n"));
    let rgb = decode_ppm(&bytes).unwrap();
    assert_eq!((rgb.width, rgb.height), (64, 64));
    let (code, err) = fails(&["gradcam", "--checkpoint", s(&ckpt), "--input", s(&img), "--layer", "nope", "--out", s(&ppm)]);
    assert_eq!(code, 2);
    assert!(err.starts_with("E_CONFIG: "), "{err}");
    let (code, err) = fails(&["gradcam", "--checkpoint", s(&ckpt), "--input", s(&img), "--region", "xx", "--out", s(&ppm)]);
    assert_eq!(code, 2);
    assert!(err.starts_with("E_CONFIG: "), "{err}");

    // architecture recorded in the checkpoint must match the config
    let other = std::fs::read_to_string(&cfg).unwrap().replace("\"middle_repeats\": 1", "\"middle_repeats\": 2");
    std::fs::write(&cfg, other).unwrap();
    let (code, err) = fails(&["eval", "--config", s(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.starts_with("E_CONFIG: ") && err.contains("architecture"), "{err}");
    let (code, err) = fails(&["eval", "--config", s(&cfg), "--checkpoint", s(&root.join("missing"))]);
    assert_eq!(code, 3);
    assert!(err.starts_with("E_DATA: "), "{err}");
}

#[test]
fn predict_with_negative_bias_gives_empty_masks() {
    let t = tempfile::tempdir().unwrap();
    let mut model: Model<f32> = Model::new(ModelConfig::micro(), 0).unwrap();
    for (name, p) in model.params.iter_mut() {
        if name.starts_with("head.") {
            let v = if name.ends_with("bias") { -20.0 } else { 0.0 };
            *p = Tensor::full(p.shape().to_vec(), v);
        }
    }
    let ckpt = t.path().join("ck");
    Checkpoint::new(model).save(&ckpt).unwrap();
    let input = t.path().join("bg.axtn");
    io::write(&input, &Tensor::<f32>::zeros(vec![3, 32, 32])).unwrap();
    let dst = t.path().join("mask.axtn");
    let out = ok(&["predict", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&dst)]);
    assert!(out.starts_with("wt 0 tc 0 et 0"), "{out}");
    let mask: Tensor<f32> = io::read(&dst).unwrap();
    assert_eq!(mask.shape(), &[3, 32, 32]);
    assert!(mask.data().iter().all(|&v| v == 0.0));

    let bad = t.path().join("bad.axtn");
    io::write(&bad, &Tensor::<f32>::zeros(vec![32, 32])).unwrap();
    let (code, err) = fails(&["predict", "--checkpoint", s(&ckpt), "--input", s(&bad), "--out", s(&dst)]);
    assert_eq!(code, 3);
    assert!(err.starts_with("E_DATA: "), "{err}");
}

#[test]
fn preprocess_names_missing_sequences() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    ok(&["synth", "--out", s(&root.join("data")), "--cases", "2", "--dims", "32x32x16", "--seed", "2"]);
    let case = root.join("data").join("synth_0001");
    for f in std::fs::read_dir(&case).unwrap() {
        let p = f.unwrap().path();
        if p.file_name().unwrap().to_str().unwrap().starts_with("t2") {
            std::fs::remove_file(p).unwrap();
        }
    }
    let cfg = write_config(root, 1);
    let (code, err) = fails(&["preprocess", "--config", s(&cfg)]);
    assert_eq!(code, 3);
    assert!(err.starts_with("E_DATA: ") && err.contains("synth_0001") && err.contains("t2"), "{err}");

    std::fs::write(&cfg, r#"{"data": {"root": "data", "colour": 1}}"#).unwrap();
    let (code, err) = fails(&["preprocess", "--config", s(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.starts_with("E_CONFIG: ") && err.contains("colour"), "{err}");
}
