//! Pipeline commands behind the `pigrn` binary. Each writes its artifacts plus a
//! `run_manifest.json` recording input/output hashes and seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{preprocess_dataset, DatasetManifest, Split, MANIFEST_FILE};
use crate::dynamics::build_arm_model;
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict, predict_trials, summarize, EvalOptions, MetricReport, Quantity};
use crate::io::{ensure_dir, read_csv, sha256_file};
use crate::nn::Outputs;
use crate::synthdata::{build_dataset, SynthConfig};
use crate::training::{
    load_checkpoint, save_checkpoint, train, write_loss_history, Checkpoint, SequenceBatch, TrainConfig,
    TrainOutcome, OUTPUT_COLUMNS,
};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_HISTORY_FILE: &str = "loss_history.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";

/// The weights compared by a default λ sweep.
pub const DEFAULT_SWEEP: [f64; 6] = [1.0, 0.1, 0.01, 0.05, 0.001, 0.0001];

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub out_dir: PathBuf,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    fn start(command: &str, out_dir: &Path) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix: unix_now(),
            finished_unix: 0,
            out_dir: out_dir.to_path_buf(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn record(path: &Path, role: &str) -> Result<FileRecord> {
        Ok(FileRecord {
            role: role.into(),
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }

    fn input(&mut self, path: &Path, role: &str) -> Result<()> {
        self.inputs.push(Self::record(path, role)?);
        Ok(())
    }

    fn output(&mut self, path: &Path, role: &str) -> Result<()> {
        self.outputs.push(Self::record(path, role)?);
        Ok(())
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        let path = self.out_dir.join(RUN_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).expect("run manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct SynthArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

/// Generates a synthetic dataset into an existing directory.
pub fn cmd_synth(args: &SynthArgs) -> Result<DatasetManifest> {
    let mut run = RunManifest::start("synth", &args.out);
    let mut cfg = match &args.config {
        Some(path) => {
            run.input(path, "synth_config")?;
            SynthConfig::load(path)?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let model = build_arm_model(&cfg.anthro)?;
    let specs = cfg.specs()?;
    let manifest = build_dataset(&specs, &model, &cfg.anthro, cfg.seed, &args.out)?;
    info!("synthesized {} trials into {}", specs.len(), args.out.display());
    run.seeds.insert("synth".into(), cfg.seed);
    for entry in &manifest.trials {
        if let Some(file) = &entry.processed {
            run.output(&args.out.join(file), "processed_trial")?;
        }
    }
    run.output(&args.out.join(MANIFEST_FILE), "dataset_manifest")?;
    run.finish()?;
    Ok(manifest)
}

#[derive(Debug, Clone, Default)]
pub struct PreprocessArgs {
    pub manifest: PathBuf,
    pub out: PathBuf,
}

/// Turns raw EMG/angle recordings into processed trials and a new manifest.
pub fn cmd_preprocess(args: &PreprocessArgs) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    ensure_dir(&args.out)?;
    let mut run = RunManifest::start("preprocess", &args.out);
    run.input(&args.manifest, "raw_manifest")?;
    for entry in &manifest.trials {
        for (file, role) in [(&entry.raw_emg, "raw_emg"), (&entry.raw_angles, "raw_angles")] {
            if let Some(f) = file {
                run.input(&manifest.resolve(f), role)?;
            }
        }
    }
    let out = preprocess_dataset(&manifest, &args.out)?;
    let path = args.out.join(MANIFEST_FILE);
    out.save(&path)?;
    for entry in &out.trials {
        if let Some(file) = &entry.processed {
            run.output(&args.out.join(file), "processed_trial")?;
        }
    }
    run.output(&path, "dataset_manifest")?;
    run.finish()?;
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
}

fn effective_config(args: &TrainArgs, run: &mut RunManifest) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            run.input(path, "train_config")?;
            TrainConfig::load(path)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(lambda) = args.lambda {
        cfg.lambda_physics = lambda;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Training inputs assembled from a dataset manifest.
pub struct PreparedData {
    pub manifest: DatasetManifest,
    pub batches: Vec<SequenceBatch>,
}

pub fn prepare_training(manifest_path: &Path) -> Result<PreparedData> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let model = manifest.arm_model()?;
    let norm = manifest.normalization_or_compute()?;
    let trials = manifest.load_split(Split::Train)?;
    if trials.is_empty() {
        return Err(Error::InvalidParameter("manifest has no training trials".into()));
    }
    let batches = trials.iter().map(|t| t.to_batch(&model, &norm)).collect();
    Ok(PreparedData { manifest, batches })
}

fn train_prepared(data: &PreparedData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = data.manifest.arm_model()?;
    let norm = data.manifest.normalization_or_compute()?;
    train(&data.batches, cfg, &model, &norm)
}

/// Trains on the manifest's train split; writes checkpoint, loss history and config.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    ensure_dir(&args.out)?;
    let mut run = RunManifest::start("train", &args.out);
    let cfg = effective_config(args, &mut run)?;
    run.input(&args.manifest, "dataset_manifest")?;
    let data = prepare_training(&args.manifest)?;
    info!(
        "training on {} sequences for {} epochs (lambda_physics = {})",
        data.batches.len(),
        cfg.epochs,
        cfg.lambda_physics
    );
    let outcome = train_prepared(&data, &cfg)?;
    let ckpt = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&outcome.checkpoint, &ckpt)?;
    let history = args.out.join(LOSS_HISTORY_FILE);
    write_loss_history(&outcome.history, &history)?;
    let used = args.out.join("train_config.toml");
    cfg.save(&used)?;
    run.seeds.insert("train".into(), cfg.seed);
    run.output(&ckpt, "checkpoint")?;
    run.output(&history, "loss_history")?;
    run.output(&used, "train_config")?;
    run.finish()?;
    Ok(outcome)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub out: PathBuf,
    /// Config the checkpoint must be compatible with.
    pub config: Option<PathBuf>,
    pub global_max: bool,
}

fn check_model_agreement(ckpt: &Checkpoint, manifest: &DatasetManifest) -> Result<()> {
    if manifest.arm_model()? != ckpt.metadata.arm_model {
        return Err(Error::InvalidParameter(
            "checkpoint arm model differs from the dataset manifest's anthropometry".into(),
        ));
    }
    Ok(())
}

/// Evaluates a checkpoint on the manifest's test split.
pub fn cmd_eval(args: &EvalArgs) -> Result<MetricReport> {
    ensure_dir(&args.out)?;
    let mut run = RunManifest::start("eval", &args.out);
    run.input(&args.checkpoint, "checkpoint")?;
    run.input(&args.manifest, "dataset_manifest")?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if let Some(path) = &args.config {
        run.input(path, "train_config")?;
        ckpt.check_compatible(&TrainConfig::load(path)?)?;
    }
    let manifest = DatasetManifest::load(&args.manifest)?;
    check_model_agreement(&ckpt, &manifest)?;
    let trials = manifest.load_split(Split::Test)?;
    let meta = &ckpt.metadata;
    let results = predict_trials(&ckpt.net, &trials, &meta.arm_model, &meta.normalization)?;
    let report = summarize(
        &results,
        EvalOptions {
            global_max: args.global_max,
        },
    )?;
    let (csv, json) = (args.out.join(METRICS_CSV), args.out.join(METRICS_JSON));
    report.write(&csv, &json)?;
    let dumps = args.out.join("predictions");
    ensure_dir(&dumps)?;
    for r in &results {
        let path = dumps.join(format!("{}.csv", r.name));
        write_text(&path, &r.to_csv())?;
        run.output(&path, "trial_predictions")?;
    }
    run.seeds.insert("train".into(), meta.seed);
    run.output(&csv, "metrics_csv")?;
    run.output(&json, "metrics_json")?;
    run.finish()?;
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct SweepArgs {
    pub config: Option<PathBuf>,
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    /// Defaults to [`DEFAULT_SWEEP`].
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub report: MetricReport,
    pub final_loss: f64,
}

pub const SWEEP_HEADER: [&str; 9] = [
    "lambda",
    "elbow_angle_rmse",
    "elbow_angle_pct_rmse",
    "elbow_angle_r",
    "elbow_torque_rmse",
    "elbow_torque_pct_rmse",
    "elbow_torque_r",
    "load_estimate_rmse",
    "final_train_loss",
];

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = SWEEP_HEADER.join(",");
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for row in rows {
        let angle = row.report.get(Quantity::ElbowAngle);
        let torque = row.report.get(Quantity::ElbowTorque);
        let fields = [
            format!("{}", row.lambda),
            opt(angle.rmse.map(|s| s.mean)),
            opt(angle.pct_rmse.map(|s| s.mean)),
            opt(angle.pearson_r.map(|s| s.mean)),
            opt(torque.rmse.map(|s| s.mean)),
            opt(torque.pct_rmse.map(|s| s.mean)),
            opt(torque.pearson_r.map(|s| s.mean)),
            format!("{}", row.report.load_estimate.rmse),
            format!("{}", row.final_loss),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Trains and evaluates one model per λ value; one CSV row per value.
pub fn cmd_sweep_lambda(args: &SweepArgs) -> Result<Vec<SweepRow>> {
    ensure_dir(&args.out)?;
    let mut run = RunManifest::start("sweep-lambda", &args.out);
    let base = effective_config(
        &TrainArgs {
            config: args.config.clone(),
            seed: args.seed,
            epochs: args.epochs,
            ..Default::default()
        },
        &mut run,
    )?;
    run.input(&args.manifest, "dataset_manifest")?;
    let values = args.values.clone().unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
    if values.is_empty() {
        return Err(Error::InvalidParameter("no lambda values to sweep".into()));
    }
    let data = prepare_training(&args.manifest)?;
    let model = data.manifest.arm_model()?;
    let norm = data.manifest.normalization_or_compute()?;
    let test = data.manifest.load_split(Split::Test)?;
    let rows = values
        .par_iter()
        .map(|&lambda| {
            let cfg = TrainConfig {
                lambda_physics: lambda,
                ..base.clone()
            };
            cfg.validate()?;
            info!("sweep: training lambda_physics = {lambda}");
            let outcome = train_prepared(&data, &cfg)?;
            let report = evaluate(&outcome.net, &test, &model, &norm, EvalOptions::default())?;
            let row = SweepRow {
                lambda,
                final_loss: outcome_final_loss(&outcome),
                report,
            };
            Ok((outcome, row))
        })
        .collect::<Result<Vec<_>>>()?;
    for (outcome, row) in &rows {
        let dir = args.out.join(format!("lambda_{}", row.lambda));
        ensure_dir(&dir)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&outcome.checkpoint, &ckpt)?;
        let history = dir.join(LOSS_HISTORY_FILE);
        write_loss_history(&outcome.history, &history)?;
        let (csv, json) = (dir.join(METRICS_CSV), dir.join(METRICS_JSON));
        row.report.write(&csv, &json)?;
        for (path, role) in [(&ckpt, "checkpoint"), (&history, "loss_history"), (&csv, "metrics_csv")] {
            run.output(path, role)?;
        }
    }
    let rows: Vec<SweepRow> = rows.into_iter().map(|(_, r)| r).collect();
    let table = args.out.join(SWEEP_CSV);
    write_text(&table, &sweep_csv(&rows))?;
    run.seeds.insert("train".into(), base.seed);
    run.output(&table, "sweep_table")?;
    run.finish()?;
    Ok(rows)
}

fn outcome_final_loss(outcome: &TrainOutcome) -> f64 {
    outcome.history.last().map_or(f64::NAN, |r| r.l_total)
}

#[derive(Debug, Clone, Default)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub emg: PathBuf,
    pub out: PathBuf,
}

/// Reads the `emg*` columns of a CSV as network inputs, one row per step.
pub fn read_emg_rows(path: &Path) -> Result<Outputs> {
    let table = read_csv(path)?;
    let cols: Vec<usize> = (0..table.header.len())
        .filter(|&i| table.header[i].starts_with("emg"))
        .collect();
    if cols.is_empty() {
        return Err(Error::parse(path, "no emg columns"));
    }
    if table.rows.is_empty() {
        return Err(Error::parse(path, "no rows"));
    }
    let data: Vec<f64> = table.rows.iter().flat_map(|r| cols.iter().map(|&c| r[c])).collect();
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::parse(path, format!("non-finite EMG value at row {}", k / cols.len() + 1)));
    }
    Ok(Outputs {
        steps: table.rows.len(),
        width: cols.len(),
        data,
    })
}

/// Kinematics, load and torque for an EMG file of any length.
pub fn cmd_predict(args: &PredictArgs) -> Result<Outputs> {
    ensure_dir(&args.out)?;
    let mut run = RunManifest::start("predict", &args.out);
    run.input(&args.checkpoint, "checkpoint")?;
    run.input(&args.emg, "emg")?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let emg = read_emg_rows(&args.emg)?;
    let meta = &ckpt.metadata;
    let pred = predict(&ckpt.net, &emg, &meta.arm_model, &meta.normalization)?;
    let mut table = Outputs::zeros(emg.steps, OUTPUT_COLUMNS.len() + 2);
    let mut text = String::from("step,");
    text.push_str(&OUTPUT_COLUMNS.join(","));
    text.push_str(",tau1,tau2\n");
    for t in 0..emg.steps {
        let row = table.row_mut(t);
        row[..OUTPUT_COLUMNS.len()].copy_from_slice(pred.outputs.row(t));
        row[OUTPUT_COLUMNS.len()..].copy_from_slice(pred.torques.row(t));
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&format!("{t},{}\n", fields.join(",")));
    }
    let path = args.out.join(PREDICTIONS_CSV);
    write_text(&path, &text)?;
    run.seeds.insert("train".into(), meta.seed);
    run.output(&path, "predictions")?;
    run.finish()?;
    Ok(table)
}

/// Process exit status for a command error.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric_divergence() {
        3
    } else {
        2
    }
}
