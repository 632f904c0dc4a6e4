//! The `xnet` binary end to end: file contracts and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xnet_core::data::Manifest;
use xnet_core::metrics::MetricReport;
use xnet_core::pgm::Graymap;
use xnet_core::training::{Checkpoint, TrainConfig};
use xnet_core::{ModelConfig, Tensor};

fn xnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xnet"))
        .args(args)
        .output()
        .expect("spawn xnet")
}

fn status(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", s(dir), "--volumes", "10", "--slices", "2", "--size", "32x32", "--seed", "7"];
    args.extend_from_slice(extra);
    xnet(&args)
}

fn files_with_suffix(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_with_suffix(&p, suffix));
        } else if s(&p).ends_with(suffix) {
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Desk-scale checkpoint whose head emits a constant logit, so every pixel
/// gets the same probability.
fn constant_checkpoint(path: &Path, logit: f32) {
    let mut ckpt = Checkpoint::<f32>::fresh(ModelConfig::desk_scale(), TrainConfig::default()).unwrap();
    let head = ckpt.model.head_mut();
    let shape = head.weight.value().shape().to_vec();
    *head.weight.value_mut() = Tensor::zeros(&shape);
    *head.bias.value_mut() = Tensor::full(&[1], logit);
    ckpt.save(path).unwrap();
}

#[test]
fn synth_writes_the_counted_dataset_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = xnet(&["synth", "--out", s(&a), "--volumes", "10", "--slices", "20", "--size", "64x64", "--seed", "7"]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("lesion pixel fraction"));
    let manifest = Manifest::load(&a.join("manifest.json")).unwrap();
    assert_eq!(manifest.volumes.len(), 10);
    let images: usize = manifest.volumes.iter().map(|v| v.images.len()).sum();
    let masks: usize = manifest.volumes.iter().map(|v| v.masks.len()).sum();
    assert_eq!((images, masks), (200, 200));
    assert_eq!(files_with_suffix(&a, ".pgm").len(), 400);

    let o = xnet(&["synth", "--out", s(&b), "--volumes", "10", "--slices", "20", "--size", "64x64", "--seed", "7"]);
    assert_eq!(status(&o), 0);
    let (fa, fb) = (files_with_suffix(&a, ""), files_with_suffix(&b, ""));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{} differs", x.display());
    }
}

#[test]
fn synth_rejects_sizes_the_network_cannot_take() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let o = xnet(&["synth", "--out", s(&out), "--size", "63x64"]);
    assert_eq!(status(&o), 2);
    assert!(!out.exists());
    assert_eq!(status(&xnet(&["synth", "--out", s(&out), "--size", "64by64"])), 2);
}

#[test]
fn unknown_flags_and_config_keys_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(status(&xnet(&["train", "--bogus"])), 2);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"data": "d", "out": "o", "train": {"epochs": 1, "learning_rate": 0.1}}"#).unwrap();
    let o = xnet(&["train", "--config", s(&cfg)]);
    assert_eq!(status(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn train_without_a_dataset_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = xnet(&[
        "train",
        "--data",
        s(&tmp.path().join("missing")),
        "--out",
        s(&tmp.path().join("run")),
        "--epochs",
        "1",
    ]);
    assert_eq!(status(&o), 2);
    let o = xnet(&["train", "--out", s(&tmp.path().join("run"))]);
    assert_eq!(status(&o), 2);
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(status(&synth(&data, &[])), 0);
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"data": "data", "out": "run", "model": {"width_divisor": 8},
            "train": {"epochs": 3, "initial_lr": 1e30, "min_lr": 0}}"#,
    )
    .unwrap();
    let o = xnet(&["train", "--config", s(&cfg)]);
    assert_eq!(status(&o), 4, "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_outputs_and_ablation_variants_are_labelled() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(status(&synth(&data, &[])), 0);
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"data": "data", "out": "fsm", "model": {"width_divisor": 8}, "train": {"epochs": 1, "seed": 3}}"#,
    )
    .unwrap();
    let o = xnet(&["train", "--config", s(&cfg), "--fold", "1", "--deterministic"]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("final validation (xnet+fsm, fold 1)"));
    let run = tmp.path().join("fsm");
    for f in ["last.xnck", "best.xnck", "history.json", "metrics.json", "config.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    // the logged config reproduces the run, including the overrides
    let logged: serde_json::Value = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(logged["train"]["fold"], 1);
    assert!(Path::new(logged["data"].as_str().unwrap()).is_absolute());

    let no_fsm = tmp.path().join("nofsm");
    let o = xnet(&["train", "--config", s(&cfg), "--fold", "1", "--no-fsm", "--out", s(&no_fsm)]);
    assert_eq!(status(&o), 0);
    assert_eq!(MetricReport::load(&no_fsm.join("metrics.json")).unwrap().label, "xnet");
    let unet = tmp.path().join("unet");
    let o = xnet(&["train", "--config", s(&cfg), "--arch", "unet", "--out", s(&unet)]);
    assert_eq!(status(&o), 0);
    assert!(stdout(&o).contains("training unet "));
    assert_eq!(status(&xnet(&["train", "--config", s(&cfg), "--arch", "vnet"])), 2);
}

#[test]
fn eval_of_an_oracle_checkpoint_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("empty");
    assert_eq!(status(&synth(&data, &["--no-lesions"])), 0);
    // lesion-free truth and an always-background model agree everywhere
    let ckpt = tmp.path().join("oracle.xnck");
    constant_checkpoint(&ckpt, -30.0);
    let metrics = tmp.path().join("metrics.json");
    let o = xnet(&["eval", "--model", s(&ckpt), "--data", s(&data), "--fold", "0", "--out", s(&metrics)]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("Dice 1.0000  IoU 1.0000  precision 1.0000  recall 1.0000"));
    let report = MetricReport::load(&metrics).unwrap();
    // 10 volumes over 5 folds: two validation volumes, one record each
    assert_eq!(report.volumes.len(), 2);
    assert_eq!(report.aggregate.dice, 1.0);
    assert_eq!(report.aggregate.recall, 1.0);
}

#[test]
fn eval_rejects_broken_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(status(&synth(&data, &[])), 0);
    let ckpt = tmp.path().join("model.xnck");
    constant_checkpoint(&ckpt, 0.0);
    let bytes = fs::read(&ckpt).unwrap();
    let cut = tmp.path().join("cut.xnck");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(status(&xnet(&["eval", "--model", s(&cut), "--data", s(&data)])), 5);
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    fs::write(&cut, &flipped).unwrap();
    assert_eq!(status(&xnet(&["eval", "--model", s(&cut), "--data", s(&data)])), 5);
    assert_eq!(
        status(&xnet(&["eval", "--model", s(&tmp.path().join("none.xnck")), "--data", s(&data)])),
        5
    );
    // an f64 checkpoint is a dtype mismatch for the f32 evaluator
    let wide = Checkpoint::<f64>::fresh(ModelConfig::desk_scale(), TrainConfig::default()).unwrap();
    wide.save(&cut).unwrap();
    assert_eq!(status(&xnet(&["eval", "--model", s(&cut), "--data", s(&data)])), 5);
}

#[test]
fn predict_writes_binary_masks_at_the_cropped_size() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("sat.xnck");
    constant_checkpoint(&ckpt, 30.0);
    let samples: Vec<u16> = (0..37 * 50).map(|i| (i * 7 % 251) as u16).collect();
    let input = tmp.path().join("in.pgm");
    Graymap::new(50, 37, 255, samples).unwrap().write(&input).unwrap();
    let (m1, m2, prob) = (tmp.path().join("m1.pgm"), tmp.path().join("m2.pgm"), tmp.path().join("p.xten"));
    let o = xnet(&["predict", "--model", s(&ckpt), "--input", s(&input), "--output", s(&m1), "--prob", s(&prob)]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mask = Graymap::read(&m1).unwrap();
    assert_eq!((mask.height, mask.width, mask.maxval), (32, 48, 255));
    assert!(mask.samples.iter().all(|&v| v == 255));
    assert!(fs::read(&m1).unwrap().starts_with(b"P5"));
    let probs = Tensor::<f32>::read_xten(&mut fs::File::open(&prob).unwrap()).unwrap();
    assert_eq!(probs.shape(), &[1, 1, 32, 48]);

    assert_eq!(status(&xnet(&["predict", "--model", s(&ckpt), "--input", s(&input), "--output", s(&m2)])), 0);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());

    let bad = tmp.path().join("bad.pgm");
    fs::write(&bad, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
    assert_eq!(status(&xnet(&["predict", "--model", s(&ckpt), "--input", s(&bad), "--output", s(&m2)])), 2);
    let small = tmp.path().join("small.pgm");
    Graymap::new(8, 8, 255, vec![0; 64]).unwrap().write(&small).unwrap();
    assert_eq!(status(&xnet(&["predict", "--model", s(&ckpt), "--input", s(&small), "--output", s(&m2)])), 2);
}

#[test]
fn params_reports_both_architectures_and_the_ratio() {
    let o = xnet(&["params", "--width-divisor", "8"]);
    assert_eq!(status(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("fsm.enc5"));
    let total = text.lines().find(|l| l.starts_with("total")).unwrap();
    let counts: Vec<usize> = total.split_whitespace().skip(1).map(|t| t.parse().unwrap()).collect();
    assert_eq!(counts.len(), 2);
    assert!(counts[0] < counts[1]);
    assert!(text.contains("ratio xnet+fsm/unet = "));
    assert_eq!(status(&xnet(&["params", "--width-divisor", "3"])), 2);
}
