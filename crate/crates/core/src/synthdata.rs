//! Synthetic flexion-extension trials: minimum-jerk kinematics, inverse-dynamics
//! torque labels and EMG-like envelopes driven by the elbow torque demand.
//!
//! The activation model is invented. It only has to give a learnable
//! EMG-to-dynamics mapping with realistic shapes and load structure.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{normalization_from, DatasetManifest, ProcessedTrial, Split, TrialEntry, MANIFEST_FILE};
use crate::dynamics::{inverse_dynamics, AnthroConfig, ArmModel, JointState, LoadMass};
use crate::error::{Error, Result};
use crate::nn::Outputs;
use crate::signal::{AnglePipeline, EmgEnvelope, EmgPipeline};

pub const N_CHANNELS: usize = 4;
pub const CO_CONTRACTION: f64 = 0.05;
pub const ACTIVATION_TAU: f64 = 0.050;
pub const GAIN_JITTER: f64 = 0.10;
/// Load whose peak elbow torque on the nominal trajectory maps to full drive.
pub const REFERENCE_LOAD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub load: f64,
    pub n_total_steps: usize,
    pub n_active_steps: usize,
    pub sample_rate: f64,
    /// Elbow peak flexion (rad).
    pub elbow_peak: f64,
    /// Shoulder peak flexion (rad).
    pub shoulder_peak: f64,
    pub noise_level: f64,
    pub seed: u64,
    /// First active sample; `None` centers the movement.
    pub active_start: Option<usize>,
}

impl Default for TrialSpec {
    fn default() -> Self {
        TrialSpec {
            load: 0.0,
            n_total_steps: 800,
            n_active_steps: 450,
            sample_rate: 125.0,
            elbow_peak: 130f64.to_radians(),
            shoulder_peak: 32f64.to_radians(),
            noise_level: 0.05,
            seed: 0,
            active_start: None,
        }
    }
}

impl TrialSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_active_steps < 3 || self.n_active_steps > self.n_total_steps {
            return bad(format!(
                "need 3 <= n_active_steps <= n_total_steps, got {} / {}",
                self.n_active_steps, self.n_total_steps
            ));
        }
        if !(self.elbow_peak > 0.0 && self.shoulder_peak > 0.0) {
            return bad("peaks must be > 0".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return bad(format!("sample_rate must be > 0, got {}", self.sample_rate));
        }
        if !(self.load >= 0.0 && self.load.is_finite()) {
            return bad(format!("load must be >= 0, got {}", self.load));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise_level must be >= 0, got {}", self.noise_level));
        }
        if self.start() + self.n_active_steps > self.n_total_steps {
            return bad("active segment runs past the end of the trial".into());
        }
        Ok(())
    }

    pub fn start(&self) -> usize {
        self.active_start
            .unwrap_or((self.n_total_steps - self.n_active_steps.min(self.n_total_steps)) / 2)
    }
}

/// Minimum-jerk profile s(u) = 10u^3 - 15u^4 + 6u^5 and its first two derivatives.
fn min_jerk(u: f64) -> (f64, f64, f64) {
    let u2 = u * u;
    let u3 = u2 * u;
    (
        10.0 * u3 - 15.0 * u2 * u2 + 6.0 * u3 * u2,
        30.0 * u2 - 60.0 * u3 + 30.0 * u2 * u2,
        60.0 * u - 180.0 * u2 + 120.0 * u3,
    )
}

/// Kinematics [T x 6]: q1, q2, qd1, qd2, qdd1, qdd2. The elbow flexes from 0 to
/// its peak and back with minimum-jerk timing; the shoulder follows the same
/// profile scaled to its own peak.
pub fn generate_trajectory(spec: &TrialSpec) -> Result<Outputs> {
    spec.validate()?;
    let dt = 1.0 / spec.sample_rate;
    let start = spec.start();
    let last = spec.n_active_steps - 1;
    let peak_at = last / 2;
    let rise = peak_at as f64 * dt;
    let fall = (last - peak_at) as f64 * dt;
    let mut out = Outputs::zeros(spec.n_total_steps, 6);
    for k in 0..=last {
        // unit profile value, velocity and acceleration
        let (p, v, a) = if k <= peak_at {
            let (s, ds, dds) = min_jerk(k as f64 * dt / rise);
            (s, ds / rise, dds / (rise * rise))
        } else {
            let (s, ds, dds) = min_jerk((k - peak_at) as f64 * dt / fall);
            (1.0 - s, -ds / fall, -dds / (fall * fall))
        };
        let row = out.row_mut(start + k);
        for (j, amp) in [spec.shoulder_peak, spec.elbow_peak].into_iter().enumerate() {
            row[j] = amp * p;
            row[2 + j] = amp * v;
            row[4 + j] = amp * a;
        }
    }
    Ok(out)
}

/// Elbow torque demand for each step of `kinematics` carrying `load`.
pub fn elbow_torque(kinematics: &Outputs, load: f64, model: &ArmModel) -> Vec<f64> {
    (0..kinematics.steps)
        .map(|t| {
            let r = kinematics.row(t);
            let state = JointState::new([r[0], r[1]], [r[2], r[3]], [r[4], r[5]]);
            inverse_dynamics(model, &state, LoadMass(load)).elbow()
        })
        .collect()
}

/// Peak elbow torque of the nominal movement carrying the reference load.
pub fn reference_torque(model: &ArmModel) -> f64 {
    let nominal = TrialSpec {
        load: REFERENCE_LOAD,
        ..TrialSpec::default()
    };
    let kin = generate_trajectory(&nominal).expect("nominal spec is valid");
    elbow_torque(&kin, REFERENCE_LOAD, model)
        .into_iter()
        .fold(0.0, |m, v| m.max(v.abs()))
}

/// EMG-like envelopes [T x 4]: two flexor channels driven by positive elbow
/// torque demand and two extensor channels by negative demand.
pub fn synthesize_emg(kinematics: &Outputs, load: f64, model: &ArmModel, spec: &TrialSpec) -> Result<EmgEnvelope> {
    if kinematics.width != 6 {
        return Err(Error::ShapeMismatch(format!("kinematics must have 6 columns, got {}", kinematics.width)));
    }
    let reference = reference_torque(model);
    let demand = elbow_torque(kinematics, load, model);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gains: Vec<f64> = (0..N_CHANNELS)
        .map(|_| 1.0 + rng.random_range(-GAIN_JITTER..=GAIN_JITTER))
        .collect();
    let noise = if spec.noise_level > 0.0 {
        let sigma = spec.noise_level;
        // unit-mean multiplicative noise
        Some(LogNormal::new(-0.5 * sigma * sigma, sigma).expect("sigma is finite and positive"))
    } else {
        None
    };
    let alpha = 1.0 - (-1.0 / (spec.sample_rate * ACTIVATION_TAU)).exp();
    let mut channels = (0..N_CHANNELS).map(|_| Vec::with_capacity(kinematics.steps)).collect::<Vec<_>>();
    for (c, (channel, gain)) in channels.iter_mut().zip(&gains).enumerate() {
        let flexor = c < N_CHANNELS / 2;
        let mut activation = None;
        for &tau in &demand {
            let drive = if flexor { tau.max(0.0) } else { (-tau).max(0.0) } / reference;
            let excitation = CO_CONTRACTION + gain * drive;
            let a = match activation {
                None => excitation,
                Some(prev) => prev + alpha * (excitation - prev),
            };
            activation = Some(a);
            channel.push(a);
        }
    }
    // noise drawn time-major so every channel sees an independent stream
    if let Some(dist) = noise {
        for t in 0..kinematics.steps {
            for channel in channels.iter_mut() {
                channel[t] *= dist.sample(&mut rng);
            }
        }
    }
    for v in channels.iter_mut().flatten() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(EmgEnvelope {
        channels,
        sample_rate: spec.sample_rate,
    })
}

/// One complete synthetic trial in processed form.
pub fn synthesize_trial(name: &str, spec: &TrialSpec, model: &ArmModel) -> Result<ProcessedTrial> {
    let kinematics = generate_trajectory(spec)?;
    let envelope = synthesize_emg(&kinematics, spec.load, model, spec)?;
    Ok(assemble(name, &kinematics, &envelope, spec.load, spec.sample_rate))
}

fn assemble(name: &str, kinematics: &Outputs, envelope: &EmgEnvelope, load: f64, rate: f64) -> ProcessedTrial {
    let steps = kinematics.steps;
    let mut emg = Outputs::zeros(steps, envelope.channels.len());
    for t in 0..steps {
        for (c, ch) in envelope.channels.iter().enumerate() {
            emg.row_mut(t)[c] = ch[t];
        }
    }
    ProcessedTrial {
        name: name.to_string(),
        time: (0..steps).map(|t| t as f64 / rate).collect(),
        emg,
        kinematics: kinematics.clone(),
        load_kg: load,
    }
}

/// Dataset-level generator settings, as read from a synth spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub loads: Vec<f64>,
    pub trials_per_load: usize,
    pub n_total_steps: usize,
    pub n_active_steps: usize,
    pub sample_rate: f64,
    pub elbow_peak_deg: f64,
    pub shoulder_peak_deg: f64,
    pub noise_level: f64,
    /// Relative spread of per-trial peak angles.
    pub peak_jitter: f64,
    /// Relative spread of per-trial movement durations.
    pub duration_jitter: f64,
    pub anthro: AnthroConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 2024,
            loads: vec![0.0, 2.0, 4.0],
            trials_per_load: 4,
            n_total_steps: 800,
            n_active_steps: 450,
            sample_rate: 125.0,
            elbow_peak_deg: 130.0,
            shoulder_peak_deg: 32.0,
            noise_level: 0.05,
            peak_jitter: 0.05,
            duration_jitter: 0.05,
            anthro: AnthroConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_toml(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_toml(path, self)
    }

    /// Per-trial specs, grouped by load, with seeded jitter of peaks and durations.
    pub fn specs(&self) -> Result<Vec<TrialSpec>> {
        if self.loads.is_empty() || self.trials_per_load == 0 {
            return Err(Error::InvalidSpec("need at least one load and one trial per load".into()));
        }
        if !(0.0..1.0).contains(&self.peak_jitter) || !(0.0..1.0).contains(&self.duration_jitter) {
            return Err(Error::InvalidSpec("jitter must lie in [0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut specs = Vec::new();
        for &load in &self.loads {
            for _ in 0..self.trials_per_load {
                let mut jitter = |spread: f64| 1.0 + if spread > 0.0 { rng.random_range(-spread..=spread) } else { 0.0 };
                let peak_scale = jitter(self.peak_jitter);
                let duration_scale = jitter(self.duration_jitter);
                let n_active = ((self.n_active_steps as f64 * duration_scale).round() as usize).min(self.n_total_steps);
                let spec = TrialSpec {
                    load,
                    n_total_steps: self.n_total_steps,
                    n_active_steps: n_active,
                    sample_rate: self.sample_rate,
                    elbow_peak: self.elbow_peak_deg.to_radians() * peak_scale,
                    shoulder_peak: self.shoulder_peak_deg.to_radians() * peak_scale,
                    noise_level: self.noise_level,
                    seed: rng.random(),
                    active_start: None,
                };
                spec.validate()?;
                specs.push(spec);
            }
        }
        Ok(specs)
    }
}

/// Stratified 3:1 split: within each load group a seeded quarter of the trials
/// (rounded, at least one when the group has two or more) is held out.
pub fn split_assignment(specs: &[TrialSpec], seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED);
    let mut splits = vec![Split::Train; specs.len()];
    let mut loads: Vec<f64> = specs.iter().map(|s| s.load).collect();
    loads.sort_by(f64::total_cmp);
    loads.dedup();
    for load in loads {
        let mut group: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].load == load).collect();
        group.shuffle(&mut rng);
        let n_test = if group.len() >= 2 {
            ((group.len() as f64 / 4.0).round() as usize).max(1)
        } else {
            0
        };
        for &i in &group[..n_test] {
            splits[i] = Split::Test;
        }
    }
    splits
}

/// Writes one processed CSV per spec plus `manifest.toml` into `out_dir`,
/// holding out a seeded stratified quarter of the trials for testing.
/// The directory must already exist.
pub fn build_dataset(specs: &[TrialSpec], model: &ArmModel, anthro: &AnthroConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    build_dataset_with_splits(specs, &split_assignment(specs, seed), model, anthro, seed, out_dir)
}

/// As [`build_dataset`] with an explicit split per spec.
pub fn build_dataset_with_splits(
    specs: &[TrialSpec],
    splits: &[Split],
    model: &ArmModel,
    anthro: &AnthroConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if specs.is_empty() {
        return Err(Error::InvalidSpec("no trial specs".into()));
    }
    if splits.len() != specs.len() {
        return Err(Error::LengthMismatch(specs.len(), splits.len()));
    }
    if !out_dir.is_dir() {
        return Err(Error::io(
            out_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let trials: Vec<ProcessedTrial> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| synthesize_trial(&format!("trial_{i:03}"), spec, model))
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(trials.len());
    for ((trial, split), spec) in trials.iter().zip(splits).zip(specs) {
        let file = format!("{}.csv", trial.name);
        trial.write(out_dir.join(&file))?;
        entries.push(TrialEntry {
            name: trial.name.clone(),
            load_kg: spec.load,
            split: *split,
            processed: Some(file),
            raw_emg: None,
            raw_angles: None,
            mvc: None,
        });
    }
    let train: Vec<ProcessedTrial> = trials
        .into_iter()
        .zip(splits)
        .filter(|(_, s)| **s == Split::Train)
        .map(|(t, _)| t)
        .collect();
    let normalization = if train.is_empty() { None } else { Some(normalization_from(&train)) };
    let manifest = DatasetManifest {
        mvc: vec![1.0; N_CHANNELS],
        emg_sample_rate: specs[0].sample_rate,
        angle_sample_rate: specs[0].sample_rate,
        seed,
        emg_pipeline: EmgPipeline::default(),
        angle_pipeline: AnglePipeline::default(),
        anthro: anthro.clone(),
        normalization,
        trials: entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A long recording at one load: back-to-back jittered movements with rest
/// between them, padded with rest to exactly `total_steps`. EMG is synthesized
/// over the whole sequence so activation dynamics carry across movements.
pub fn long_sequence(cfg: &SynthConfig, load: f64, total_steps: usize, model: &ArmModel) -> Result<ProcessedTrial> {
    let per_load = total_steps / cfg.n_total_steps;
    if per_load == 0 {
        return Err(Error::InvalidSpec(format!("{total_steps} steps cannot hold one movement")));
    }
    let sub = SynthConfig {
        loads: vec![load],
        trials_per_load: per_load,
        ..cfg.clone()
    };
    let specs = sub.specs()?;
    let mut kinematics = Outputs::zeros(total_steps, 6);
    let lead = (total_steps - per_load * cfg.n_total_steps) / 2;
    for (i, spec) in specs.iter().enumerate() {
        let piece = generate_trajectory(spec)?;
        let offset = lead + i * cfg.n_total_steps;
        kinematics.data[offset * 6..(offset + piece.steps) * 6].copy_from_slice(&piece.data);
    }
    let whole = TrialSpec {
        load,
        n_total_steps: total_steps,
        n_active_steps: total_steps,
        sample_rate: cfg.sample_rate,
        noise_level: cfg.noise_level,
        seed: cfg.seed ^ 0x10_9E5E,
        ..TrialSpec::default()
    };
    let envelope = synthesize_emg(&kinematics, load, model, &whole)?;
    Ok(assemble("long_sequence", &kinematics, &envelope, load, cfg.sample_rate))
}
