mod common;

use std::process::Command;

use bevcar_cli::checkpoint::{load_into, load_model, read_checkpoint, save_checkpoint};
use bevcar_cli::commands;
use bevcar_cli::error::CliError;
use bevcar_cli::eval::EvalOptions;
use bevcar_cli::train::{train, TrainOptions};
use bevcar_core::BevCar;
use bevcar_data::{Condition, ConditionSplit};
use candle_core::{DType, Device};

use common::tiny_config;

fn weights(model: &BevCar) -> Vec<(String, Vec<f32>)> {
    model
        .params()
        .named_vars()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap()))
        .collect()
}

fn dataset(dir: &std::path::Path, num: usize) -> std::path::PathBuf {
    let data = dir.join("data");
    let cfg = tiny_config(dir, &data, &dir.join("unused"), &[]);
    commands::gen_data(&cfg, &data, num, 3, &[Condition::Day, Condition::Rain, Condition::Night]).unwrap();
    data
}

#[test]
fn checkpoint_round_trip_restores_weights_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 3);
    let cfg = tiny_config(dir.path(), &data, &dir.path().join("ck"), &[("optimizer.steps", "2")]);
    let outcome = train(&cfg, TrainOptions { deterministic: true }).unwrap();
    assert_eq!(outcome.steps, 2);
    let (model, manifest) = load_model(&outcome.checkpoint, &Device::Cpu).unwrap();
    assert_eq!(manifest.step, 2);
    assert_eq!(manifest.config, cfg);

    let path = dir.path().join("again.ckpt");
    save_checkpoint(&path, &model, &cfg, 2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&outcome.checkpoint).unwrap());

    let fresh = BevCar::new(cfg.model.clone(), 99, DType::F32, &Device::Cpu).unwrap();
    assert_ne!(weights(&fresh), weights(&model));
    load_into(&outcome.checkpoint, &fresh).unwrap();
    assert_eq!(weights(&fresh), weights(&model));
}

#[test]
fn checkpoint_rejects_other_model_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &dir.path().join("d"), &dir.path().join("c"), &[]);
    let model = BevCar::new(cfg.model.clone(), 0, DType::F32, &Device::Cpu).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &cfg, 0).unwrap();
    let mut other = cfg.model.clone();
    other.fusion.points = 4;
    let other = BevCar::new(other, 0, DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(load_into(&path, &other), Err(CliError::Checkpoint { .. })));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(CliError::Checkpoint { .. })));
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 2);
    let cfg = tiny_config(
        dir.path(),
        &data,
        &dir.path().join("ck"),
        &[("optimizer.lr", "0"), ("optimizer.weight_decay", "0"), ("optimizer.steps", "1")],
    );
    let outcome = train(&cfg, TrainOptions::default()).unwrap();
    assert_eq!(outcome.steps, 1);
    assert!(outcome.losses[0].is_finite() && outcome.losses[0] > 0.0);
    let (trained, _) = load_model(&outcome.checkpoint, &Device::Cpu).unwrap();
    let init = BevCar::new(cfg.model.clone(), cfg.seed, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(weights(&trained), weights(&init));
}

#[test]
fn eval_reports_ranges_and_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 3);
    let cfg = tiny_config(dir.path(), &data, &dir.path().join("ck"), &[("optimizer.steps", "1")]);
    let ckpt = train(&cfg, TrainOptions::default()).unwrap().checkpoint;

    let plain = commands::eval(&ckpt, &data, None, EvalOptions::default()).unwrap();
    assert_eq!(plain.samples, 3);
    assert!(plain.ranges.is_none() && plain.conditions.is_none());

    let full = commands::eval(&ckpt, &data, None, EvalOptions { ranges: true, conditions: true }).unwrap();
    assert_eq!(full.ranges.as_ref().unwrap().len(), 3);
    let conds = full.conditions.as_ref().unwrap();
    assert_eq!(conds.keys().cloned().collect::<Vec<_>>(), vec!["day", "night", "rain"]);
    assert_eq!(full.overall, plain.overall);

    // a split that misses a token is reported by name
    let partial = ConditionSplit::from_pairs(vec![("s00000".to_string(), Condition::Day)]).unwrap();
    let split_path = dir.path().join("partial.json");
    partial.save(&split_path).unwrap();
    let err = commands::eval(&ckpt, &data, Some(&split_path), EvalOptions { ranges: false, conditions: true }).unwrap_err();
    assert!(err.to_string().contains("s00001"), "{err}");
}

#[test]
fn predict_writes_logits_and_grid_sized_render() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 1);
    let cfg = tiny_config(dir.path(), &data, &dir.path().join("ck"), &[("optimizer.steps", "1")]);
    let ckpt = train(&cfg, TrainOptions::default()).unwrap().checkpoint;
    for error_map in [false, true] {
        let png_path = dir.path().join(format!("bev_{error_map}.png"));
        let npy = dir.path().join("logits.npy");
        commands::predict(&ckpt, &data, "s00000", &npy, Some(&png_path), error_map).unwrap();
        let logits = candle_core::Tensor::read_npy(&npy).unwrap();
        assert_eq!(logits.dims(), &[8, 16, 16]);
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&png_path).unwrap()));
        let reader = decoder.read_info().unwrap();
        assert_eq!((reader.info().height, reader.info().width), (16, 16));
    }
}

#[test]
fn deterministic_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 3);
    // identical configs, including the output directory, which the
    // checkpoint manifest records
    let out = dir.path().join("run");
    let run = || {
        let cfg = tiny_config(dir.path(), &data, &out, &[("optimizer.steps", "3"), ("eval_every", "2"), ("loader_workers", "2")]);
        let o = train(&cfg, TrainOptions { deterministic: true }).unwrap();
        let r = (std::fs::read(o.checkpoint).unwrap(), std::fs::read(cfg.log_path()).unwrap());
        std::fs::remove_dir_all(&out).unwrap();
        r
    };
    let (a, b) = (run(), run());
    assert!(a.0 == b.0, "checkpoints differ");
    assert!(a.1 == b.1, "metrics logs differ");
    let log = String::from_utf8(a.1).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"loss\"")).count(), 3);
    assert_eq!(log.lines().filter(|l| l.contains("\"eval\"")).count(), 2);
}

#[test]
fn binary_runs_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), common::TINY);
    let data = dir.path().join("data");
    let ck = dir.path().join("ck");
    let bin = env!("CARGO_BIN_EXE_bevcar");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).env("RUST_LOG", "warn").output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let s = |p: &std::path::Path| p.to_str().unwrap().to_string();
    let (cfg, data, ck) = (s(&cfg), s(&data), s(&ck));
    let text = run(&["gen-data", "--out", &data, "--num", "3", "--seed", "1", "--config", &cfg]);
    assert!(text.contains("day 1, rain 1, night 1"), "{text}");
    run(&["train", "--config", &cfg, "--data", &data, "--out", &ck, "--steps", "1", "--deterministic", "--set", "optimizer.lr=0.001"]);
    let ckpt = format!("{ck}/last.ckpt");
    let json = dir.path().join("report.json");
    let text = run(&["eval", "--ckpt", &ckpt, "--data", &data, "--ranges", "--conditions", "--json", json.to_str().unwrap()]);
    assert!(text.contains("night") && text.contains("vehicle"), "{text}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["samples"], 3);
    let render = dir.path().join("r.png");
    let logits = dir.path().join("l.npy");
    run(&["predict", "--ckpt", &ckpt, "--token", "s00001", "--render", render.to_str().unwrap(), "--logits", logits.to_str().unwrap()]);
    assert!(render.is_file() && logits.is_file());
    let text = run(&["bench", "--ckpt", &ckpt, "--reps", "2", "--data", &data]);
    assert!(text.contains("ms per forward pass"), "{text}");

    let bad = Command::new(bin).args(["train", "--config", &cfg, "--set", "optimizer.bogus=1"]).output().unwrap();
    assert!(!bad.status.success());
}
