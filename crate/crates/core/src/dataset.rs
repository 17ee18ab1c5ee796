//! Dataset manifest, processed-trial files and the raw-recording preprocessing path.

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dynamics::{build_arm_model, inverse_dynamics, AnthroConfig, ArmModel};
use crate::error::{Error, Result};
use crate::io::{read_csv, write_csv, Table};
use crate::nn::Outputs;
use crate::signal::{AnglePipeline, AngleSeries, EmgPipeline, RawEmg};
use crate::training::{state_from_row, NormalizationStats, SequenceBatch, N_OUTPUTS};

pub const KINEMATIC_COLUMNS: [&str; 6] = ["q1", "q2", "qd1", "qd2", "qdd1", "qdd2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub name: String,
    pub load_kg: f64,
    pub split: Split,
    /// Processed CSV, relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub processed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_emg: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_angles: Option<String>,
    /// Per-trial MVC override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mvc: Option<Vec<f64>>,
}

fn default_emg_rate() -> f64 {
    4000.0
}

fn default_angle_rate() -> f64 {
    125.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Per-channel MVC used when a trial has no override.
    pub mvc: Vec<f64>,
    #[serde(default = "default_emg_rate")]
    pub emg_sample_rate: f64,
    #[serde(default = "default_angle_rate")]
    pub angle_sample_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub emg_pipeline: EmgPipeline,
    #[serde(default)]
    pub angle_pipeline: AnglePipeline,
    #[serde(default)]
    pub anthro: AnthroConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormalizationStats>,
    pub trials: Vec<TrialEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut manifest: DatasetManifest = crate::io::read_toml(path)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_toml(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        check_mvc(&self.mvc)?;
        if self.trials.is_empty() {
            return Err(Error::InvalidParameter("manifest lists no trials".into()));
        }
        for t in &self.trials {
            if let Some(mvc) = &t.mvc {
                check_mvc(mvc)?;
                if mvc.len() != self.mvc.len() {
                    return Err(Error::InvalidParameter(format!("trial `{}`: MVC channel count", t.name)));
                }
            }
            if !(t.load_kg >= 0.0 && t.load_kg.is_finite()) {
                return Err(Error::InvalidParameter(format!("trial `{}`: load must be >= 0", t.name)));
            }
        }
        if let Some(norm) = &self.normalization {
            norm.validate()?;
        }
        self.anthro.validate()
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn arm_model(&self) -> Result<ArmModel> {
        build_arm_model(&self.anthro)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &TrialEntry> {
        self.trials.iter().filter(move |t| t.split == split)
    }

    /// Reads the processed CSVs of one split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<ProcessedTrial>> {
        self.entries(split)
            .map(|entry| {
                let rel = entry.processed.as_deref().ok_or_else(|| {
                    Error::InvalidParameter(format!("trial `{}` has no processed file; run preprocess first", entry.name))
                })?;
                let mut trial = ProcessedTrial::read(self.resolve(rel), &entry.name)?;
                trial.load_kg = entry.load_kg;
                Ok(trial)
            })
            .collect()
    }

    /// The manifest's stored statistics, or max-abs statistics of the train split.
    pub fn normalization_or_compute(&self) -> Result<NormalizationStats> {
        match &self.normalization {
            Some(n) => Ok(n.clone()),
            None => Ok(normalization_from(&self.load_split(Split::Train)?)),
        }
    }
}

fn check_mvc(mvc: &[f64]) -> Result<()> {
    if mvc.is_empty() {
        return Err(Error::InvalidParameter("MVC list is empty".into()));
    }
    for (channel, &value) in mvc.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::InvalidMvc { channel, value });
        }
    }
    Ok(())
}

/// One trial at the common 125 Hz step: normalized EMG, kinematics and load label.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedTrial {
    pub name: String,
    pub time: Vec<f64>,
    /// T x channels, values in [0, 1].
    pub emg: Outputs,
    /// T x 6: q1, q2, qd1, qd2, qdd1, qdd2.
    pub kinematics: Outputs,
    pub load_kg: f64,
}

impl ProcessedTrial {
    pub fn steps(&self) -> usize {
        self.time.len()
    }

    pub fn header(n_channels: usize) -> Vec<String> {
        let mut header = vec!["time".to_string()];
        header.extend((1..=n_channels).map(|c| format!("emg{c}")));
        header.extend(KINEMATIC_COLUMNS.iter().map(|s| s.to_string()));
        header.push("load_kg".into());
        header
    }

    pub fn to_table(&self) -> Table {
        let rows = (0..self.steps())
            .map(|t| {
                let mut row = vec![self.time[t]];
                row.extend_from_slice(self.emg.row(t));
                row.extend_from_slice(self.kinematics.row(t));
                row.push(self.load_kg);
                row
            })
            .collect();
        Table {
            header: Self::header(self.emg.width),
            rows,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_csv(path, &self.to_table())
    }

    pub fn read(path: impl AsRef<Path>, name: &str) -> Result<Self> {
        let path = path.as_ref();
        let table = read_csv(path)?;
        let n_channels = table.header.iter().filter(|h| h.starts_with("emg")).count();
        if table.header != Self::header(n_channels) {
            return Err(Error::parse(path, format!("unexpected header {:?}", table.header)));
        }
        if table.rows.is_empty() {
            return Err(Error::parse(path, "no rows"));
        }
        if table.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, "non-finite value"));
        }
        let steps = table.rows.len();
        let pick = |from: usize, width: usize| Outputs {
            steps,
            width,
            data: table.rows.iter().flat_map(|r| r[from..from + width].to_vec()).collect(),
        };
        Ok(ProcessedTrial {
            name: name.to_string(),
            time: table.column(0),
            emg: pick(1, n_channels),
            kinematics: pick(1 + n_channels, 6),
            load_kg: table.rows[0][7 + n_channels],
        })
    }

    /// Physical network targets: kinematics followed by the load label.
    pub fn targets(&self) -> Outputs {
        let mut out = Outputs::zeros(self.steps(), N_OUTPUTS);
        for t in 0..self.steps() {
            let row = out.row_mut(t);
            row[..6].copy_from_slice(self.kinematics.row(t));
            row[6] = self.load_kg;
        }
        out
    }

    /// Torque labels from inverse dynamics on the stored kinematics and load.
    pub fn torques(&self, model: &ArmModel) -> Outputs {
        torques_of(&self.targets(), model)
    }

    pub fn to_batch(&self, model: &ArmModel, norm: &NormalizationStats) -> SequenceBatch {
        let physical = self.targets();
        SequenceBatch {
            inputs: self.emg.clone(),
            targets: Outputs {
                steps: physical.steps,
                width: N_OUTPUTS,
                data: (0..physical.steps).flat_map(|t| norm.normalize(physical.row(t))).collect(),
            },
            torque_labels: torques_of(&physical, model),
            load_label: self.load_kg,
        }
    }
}

/// Inverse-dynamics torques for each row of physical 7-column outputs.
pub fn torques_of(physical: &Outputs, model: &ArmModel) -> Outputs {
    let mut tau = Outputs::zeros(physical.steps, 2);
    for t in 0..physical.steps {
        let (state, load) = state_from_row(physical.row(t));
        let v = inverse_dynamics(model, &state, load);
        tau.row_mut(t).copy_from_slice(&[v.0[0], v.0[1]]);
    }
    tau
}

pub fn normalization_from(trials: &[ProcessedTrial]) -> NormalizationStats {
    let targets: Vec<Outputs> = trials.iter().map(ProcessedTrial::targets).collect();
    NormalizationStats::from_targets(targets.iter().flat_map(|o| (0..o.steps).map(move |t| o.row(t))))
}

pub fn read_raw_emg(path: impl AsRef<Path>, sample_rate: f64) -> Result<RawEmg> {
    let path = path.as_ref();
    let table = read_csv(path)?;
    if table.header.len() < 2 {
        return Err(Error::parse(path, "expected a time column and at least one EMG channel"));
    }
    let channels = (1..table.header.len()).map(|c| table.column(c)).collect();
    RawEmg::new(channels, sample_rate)
}

pub fn read_raw_angles(path: impl AsRef<Path>, sample_rate: f64) -> Result<AngleSeries> {
    let path = path.as_ref();
    let table = read_csv(path)?;
    if table.header.len() != 3 {
        return Err(Error::parse(path, "expected columns time, q_shoulder_rad, q_elbow_rad"));
    }
    AngleSeries::new(vec![table.column(1), table.column(2)], sample_rate)
}

/// Runs both pipelines on one recording and aligns them to the shorter length.
pub fn preprocess_trial(
    name: &str,
    emg: &RawEmg,
    angles: &AngleSeries,
    mvc: &[f64],
    load_kg: f64,
    emg_pipeline: &EmgPipeline,
    angle_pipeline: &AnglePipeline,
) -> Result<(ProcessedTrial, usize)> {
    let (envelope, clipped) = emg_pipeline.run(emg, mvc)?;
    let (smoothed, derivs) = angle_pipeline.run(angles)?;
    let steps = envelope.n_samples().min(smoothed.n_samples());
    if envelope.n_samples().abs_diff(smoothed.n_samples()) > 1 {
        warn!(
            "trial `{name}`: {} EMG steps vs {} angle samples; truncating to {steps}",
            envelope.n_samples(),
            smoothed.n_samples()
        );
    }
    let dt = 1.0 / smoothed.sample_rate;
    let mut emg_out = Outputs::zeros(steps, envelope.n_channels());
    let mut kin = Outputs::zeros(steps, 6);
    for t in 0..steps {
        for (c, ch) in envelope.channels.iter().enumerate() {
            emg_out.row_mut(t)[c] = ch[t];
        }
        let row = kin.row_mut(t);
        for d in 0..2 {
            row[d] = smoothed.dofs[d][t];
            row[2 + d] = derivs.velocities[d][t];
            row[4 + d] = derivs.accelerations[d][t];
        }
    }
    Ok((
        ProcessedTrial {
            name: name.to_string(),
            time: (0..steps).map(|t| t as f64 * dt).collect(),
            emg: emg_out,
            kinematics: kin,
            load_kg,
        },
        clipped,
    ))
}

/// Preprocesses every raw trial in `manifest` into `out_dir` and returns the
/// output manifest, which references the processed files and carries
/// normalization statistics from the train split.
pub fn preprocess_dataset(manifest: &DatasetManifest, out_dir: &Path) -> Result<DatasetManifest> {
    crate::io::ensure_dir(out_dir)?;
    let mut out = manifest.clone();
    out.base_dir = out_dir.to_path_buf();
    let mut processed = Vec::with_capacity(manifest.trials.len());
    for (entry, out_entry) in manifest.trials.iter().zip(out.trials.iter_mut()) {
        let (Some(raw_emg), Some(raw_angles)) = (&entry.raw_emg, &entry.raw_angles) else {
            return Err(Error::InvalidParameter(format!("trial `{}` lacks raw_emg/raw_angles", entry.name)));
        };
        let emg = read_raw_emg(manifest.resolve(raw_emg), manifest.emg_sample_rate)?;
        let angles = read_raw_angles(manifest.resolve(raw_angles), manifest.angle_sample_rate)?;
        let mvc = entry.mvc.as_deref().unwrap_or(&manifest.mvc);
        let (trial, clipped) = preprocess_trial(
            &entry.name,
            &emg,
            &angles,
            mvc,
            entry.load_kg,
            &manifest.emg_pipeline,
            &manifest.angle_pipeline,
        )?;
        if clipped > 0 {
            info!("trial `{}`: {clipped} samples clipped at MVC", entry.name);
        }
        let file = format!("{}.csv", entry.name);
        trial.write(out_dir.join(&file))?;
        out_entry.processed = Some(file);
        out_entry.raw_emg = None;
        out_entry.raw_angles = None;
        processed.push((entry.split, trial));
    }
    let train: Vec<ProcessedTrial> = processed
        .into_iter()
        .filter(|(s, _)| *s == Split::Train)
        .map(|(_, t)| t)
        .collect();
    if !train.is_empty() {
        out.normalization = Some(normalization_from(&train));
    }
    out.mvc = manifest.mvc.clone();
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.toml";
