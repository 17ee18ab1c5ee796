use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use pigrn::commands::*;
use pigrn::dataset::{DatasetManifest, ProcessedTrial, Split, MANIFEST_FILE};
use pigrn::eval::{evaluate, EvalOptions};
use pigrn::synthdata::SynthConfig;
use pigrn::training::{load_checkpoint, TrainConfig};
use pigrn::Error;
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn pigrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pigrn"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Four short trials over two loads, plus small train configs.
struct Tiny {
    dir: TempDir,
}

impl Tiny {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            loads: vec![0.0, 4.0],
            trials_per_load: 2,
            n_total_steps: 100,
            n_active_steps: 60,
            ..SynthConfig::default()
        };
        synth.save(dir.path().join("synth.toml")).unwrap();
        let train = TrainConfig {
            epochs: 50,
            hidden: 16,
            lr: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        train.save(dir.path().join("train.toml")).unwrap();
        TrainConfig { hidden: 32, ..train }.save(dir.path().join("other.toml")).unwrap();
        fs::create_dir(dir.path().join("data")).unwrap();
        let out = pigrn(&["synth", "--config", s(&dir.path().join("synth.toml")), "--out", s(&dir.path().join("data"))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Tiny { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn manifest(&self) -> PathBuf {
        self.path("data").join(MANIFEST_FILE)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (config, manifest, out) = (self.path("train.toml"), self.manifest(), self.path(out));
        let mut args = vec!["train", "--config", s(&config), "--manifest", s(&manifest), "--out", s(&out)];
        args.extend_from_slice(extra);
        pigrn(&args)
    }
}

#[test]
fn default_synth_has_four_runs_per_load() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = cmd_synth(&SynthArgs {
        out: dir.path().to_path_buf(),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(manifest.trials.len(), 12);
    for load in [0.0, 2.0, 4.0] {
        assert_eq!(manifest.trials.iter().filter(|t| t.load_kg == load).count(), 4);
    }
    assert!(dir.path().join(RUN_MANIFEST_FILE).exists());
}

#[test]
fn synth_into_missing_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = pigrn(&["synth", "--out", s(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn synth_is_reproducible() {
    let tiny_a = Tiny::new();
    let tiny_b = Tiny::new();
    for entry in fs::read_dir(tiny_a.path("data")).unwrap() {
        let name = entry.unwrap().file_name();
        if name == RUN_MANIFEST_FILE {
            continue;
        }
        assert_eq!(
            fs::read(tiny_a.path("data").join(&name)).unwrap(),
            fs::read(tiny_b.path("data").join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn preprocess_matches_golden_output() {
    let dir = tempfile::tempdir().unwrap();
    let args = PreprocessArgs {
        manifest: fixtures().join("raw/manifest.toml"),
        out: dir.path().to_path_buf(),
    };
    cmd_preprocess(&args).unwrap();
    let got = ProcessedTrial::read(dir.path().join("trial_a.csv"), "a").unwrap();
    let want = ProcessedTrial::read(fixtures().join("golden/trial_a.csv"), "a").unwrap();
    assert_eq!(got.steps(), want.steps());
    let pairs = got.to_table().rows.into_iter().flatten().zip(want.to_table().rows.into_iter().flatten());
    for (g, w) in pairs {
        assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
    }

    let first = fs::read(dir.path().join("trial_a.csv")).unwrap();
    cmd_preprocess(&args).unwrap();
    assert_eq!(first, fs::read(dir.path().join("trial_a.csv")).unwrap());

    let manifest = DatasetManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.trials[0].processed.as_deref(), Some("trial_a.csv"));
    assert!(manifest.normalization.is_some());
}

#[test]
fn preprocess_rejects_nonpositive_mvc() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixtures().join("raw/manifest.toml"))
        .unwrap()
        .replace("mvc = [1.2, 1.0, 0.8, 0.5]", "mvc = [1.2, 0.0, 0.8, 0.5]");
    let manifest = dir.path().join("manifest.toml");
    fs::write(&manifest, text).unwrap();
    let err = cmd_preprocess(&PreprocessArgs {
        manifest: manifest.clone(),
        out: dir.path().join("out"),
    })
    .unwrap_err();
    assert!(matches!(err, Error::InvalidMvc { channel: 1, .. }));
    let out = pigrn(&["preprocess", "--manifest", s(&manifest), "--out", s(&dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tiny_train_eval_predict_round() {
    let tiny = Tiny::new();
    let start = Instant::now();
    let out = tiny.train("run", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed().as_secs_f64() < 60.0);
    for f in [CHECKPOINT_FILE, LOSS_HISTORY_FILE, RUN_MANIFEST_FILE] {
        assert!(tiny.path("run").join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(tiny.path("run").join(LOSS_HISTORY_FILE)).unwrap();
    assert!(history.starts_with("epoch,L_q,L_qd,L_qdd,L_m,L_data,L_physics,L_total\n"));
    assert_eq!(history.lines().count(), 51);

    // same seed, same checkpoint
    assert!(tiny.train("again", &[]).status.success());
    assert_eq!(
        fs::read(tiny.path("run").join(CHECKPOINT_FILE)).unwrap(),
        fs::read(tiny.path("again").join(CHECKPOINT_FILE)).unwrap()
    );

    // evaluation through the binary equals the library call
    let ckpt_path = tiny.path("run").join(CHECKPOINT_FILE);
    let out = pigrn(&[
        "eval",
        "--checkpoint",
        s(&ckpt_path),
        "--manifest",
        s(&tiny.manifest()),
        "--out",
        s(&tiny.path("eval")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = load_checkpoint(&ckpt_path).unwrap();
    let manifest = DatasetManifest::load(tiny.manifest()).unwrap();
    let test = manifest.load_split(Split::Test).unwrap();
    let meta = &ckpt.metadata;
    let report = evaluate(&ckpt.net, &test, &meta.arm_model, &meta.normalization, EvalOptions::default()).unwrap();
    assert_eq!(fs::read_to_string(tiny.path("eval").join(METRICS_CSV)).unwrap(), report.to_csv());
    assert_eq!(fs::read_to_string(tiny.path("eval").join(METRICS_JSON)).unwrap(), report.to_json());
    assert_eq!(fs::read_dir(tiny.path("eval/predictions")).unwrap().count(), test.len());

    // a config asking for another hidden size is refused
    let out = pigrn(&[
        "eval",
        "--checkpoint",
        s(&ckpt_path),
        "--manifest",
        s(&tiny.manifest()),
        "--config",
        s(&tiny.path("other.toml")),
        "--out",
        s(&tiny.path("eval2")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hidden"));

    // long input, any length
    let emg = tiny.path("long.csv");
    let mut text = String::from("time,emg1,emg2,emg3,emg4\n");
    for t in 0..5000 {
        let v = 0.05 + 0.3 * (t as f64 * 0.01).sin().abs();
        text.push_str(&format!("{},{v},{v},0.05,0.05\n", t as f64 / 125.0));
    }
    fs::write(&emg, text).unwrap();
    let out = pigrn(&["predict", "--checkpoint", s(&ckpt_path), "--emg", s(&emg), "--out", s(&tiny.path("pred"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pred = fs::read_to_string(tiny.path("pred").join(PREDICTIONS_CSV)).unwrap();
    assert_eq!(pred.lines().count(), 5001);
    assert!(pred.starts_with("step,q1,q2,qd1,qd2,qdd1,qdd2,load_kg,tau1,tau2\n"));

    let bad = tiny.path("bad.csv");
    fs::write(&bad, "time,emg1,emg2,emg3,emg4\n0,0.1,0.1,0.1,0.1\n0.008,NaN,0.1,0.1,0.1\n").unwrap();
    let out = pigrn(&["predict", "--checkpoint", s(&ckpt_path), "--emg", s(&bad), "--out", s(&tiny.path("pred2"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lambda_flag_overrides_config() {
    let tiny = Tiny::new();
    let out = tiny.train("run", &["--lambda", "0.25", "--epochs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let used = TrainConfig::load(tiny.path("run/train_config.toml")).unwrap();
    assert_eq!(used.lambda_physics, 0.25);
    assert_eq!(used.epochs, 2);
    assert_eq!(used.hidden, 16);
}

#[test]
fn sweep_writes_one_row_per_lambda_and_zero_is_plain_gru() {
    let tiny = Tiny::new();
    let rows = cmd_sweep_lambda(&SweepArgs {
        config: Some(tiny.path("train.toml")),
        manifest: tiny.manifest(),
        out: tiny.path("sweep"),
        epochs: Some(3),
        values: Some(vec![0.0, 0.1]),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(rows.len(), 2);
    let table = fs::read_to_string(tiny.path("sweep").join(SWEEP_CSV)).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("0,"));

    let plain = cmd_train(&TrainArgs {
        config: Some(tiny.path("train.toml")),
        manifest: tiny.manifest(),
        out: tiny.path("plain"),
        lambda: Some(0.0),
        epochs: Some(3),
        ..Default::default()
    })
    .unwrap();
    let swept = load_checkpoint(tiny.path("sweep/lambda_0").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(swept.net, plain.net);
}

#[test]
fn default_sweep_values() {
    assert_eq!(DEFAULT_SWEEP, [1.0, 0.1, 0.01, 0.05, 0.001, 0.0001]);
}

#[test]
fn usage_errors_exit_with_one() {
    let out = Command::new(env!("CARGO_BIN_EXE_pigrn")).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_pigrn")).args(["train", "--manifest"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_pigrn")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn divergence_maps_to_exit_three() {
    assert_eq!(exit_code(&Error::Divergence { epoch: 4, loss: f64::NAN }), 3);
    assert_eq!(exit_code(&Error::NonFiniteResidual { step: 2 }), 3);
    assert_eq!(exit_code(&Error::EmptyInput), 2);
}
