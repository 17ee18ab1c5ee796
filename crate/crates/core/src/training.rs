//! Physics-informed training: supervised kinematics/load loss plus the
//! inverse-dynamics torque residual, optimized with Adam over BPTT gradients.

use std::fs;
use std::path::Path;

use log::{debug, info};
use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{dynamics_jacobians, inverse_dynamics, ArmModel, JointState, LoadMass};
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, clip_global_norm, init_network, network_backward, network_forward, AdamConfig,
    AdamState, GruNetwork, Mode, NetworkSizes, Outputs,
};

/// Output columns: shoulder/elbow angle, velocity, acceleration, then load.
pub const OUTPUT_COLUMNS: [&str; 7] = ["q1", "q2", "qd1", "qd2", "qdd1", "qdd2", "load_kg"];
pub const N_OUTPUTS: usize = 7;
pub const ANGLE_COLS: [usize; 2] = [0, 1];
pub const VELOCITY_COLS: [usize; 2] = [2, 3];
pub const ACCEL_COLS: [usize; 2] = [4, 5];
pub const LOAD_COL: usize = 6;

/// Elbow angle (rad) above which a step counts as part of the movement.
pub const ACTIVE_ELBOW_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhysicsMask {
    /// Residual over every timestep.
    #[default]
    All,
    /// Residual only where the target elbow angle exceeds the rest threshold.
    Active,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub dropout_p: f64,
    pub lambda_physics: f64,
    pub lambda_data: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Global gradient-norm cap, applied when `clip_gradients` is set.
    pub grad_clip: f64,
    pub clip_gradients: bool,
    pub seed: u64,
    pub physics_mask: PhysicsMask,
    /// Stop when the epoch total loss has not improved for this many epochs.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 2000,
            dropout_p: 0.2,
            lambda_physics: 1e-3,
            lambda_data: 1.0,
            batch_size: 1,
            hidden: 64,
            layers: 2,
            grad_clip: 5.0,
            clip_gradients: true,
            seed: 0,
            physics_mask: PhysicsMask::All,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lambda_physics >= 0.0 && self.lambda_physics.is_finite()) {
            return bad(format!("lambda_physics must be >= 0, got {}", self.lambda_physics));
        }
        if self.lambda_data != 1.0 {
            return bad(format!("lambda_data is fixed at 1, got {}", self.lambda_data));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size != 1 {
            return bad(format!("only batch_size = 1 is supported, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.hidden == 0 || self.layers == 0 {
            return bad("hidden and layers must be >= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: TrainConfig = crate::io::read_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_toml(path, self)
    }

    pub fn sizes(&self, n_inputs: usize) -> NetworkSizes {
        NetworkSizes {
            n_inputs,
            hidden: self.hidden,
            n_layers: self.layers,
            n_outputs: N_OUTPUTS,
        }
    }
}

/// Affine map between physical output units and normalized training targets:
/// `physical = normalized * scale + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub scale: [f64; N_OUTPUTS],
    pub offset: [f64; N_OUTPUTS],
}

impl NormalizationStats {
    /// Max-absolute scaling per column, zero offset. All-zero columns get scale 1.
    pub fn from_targets<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut scale = [0.0f64; N_OUTPUTS];
        for row in rows {
            for (s, v) in scale.iter_mut().zip(row) {
                *s = s.max(v.abs());
            }
        }
        for s in &mut scale {
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        NormalizationStats {
            scale,
            offset: [0.0; N_OUTPUTS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) && self.offset.iter().all(|o| o.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("normalization scales must be finite and > 0".into()))
        }
    }

    pub fn normalize(&self, physical: &[f64]) -> Vec<f64> {
        physical
            .iter()
            .zip(self.scale.iter().zip(&self.offset))
            .map(|(v, (s, o))| (v - o) / s)
            .collect()
    }

    pub fn denormalize(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .zip(self.scale.iter().zip(&self.offset))
            .map(|(v, (s, o))| v * s + o)
            .collect()
    }

    pub fn denormalize_all(&self, out: &Outputs) -> Outputs {
        Outputs {
            steps: out.steps,
            width: out.width,
            data: (0..out.steps).flat_map(|t| self.denormalize(out.row(t))).collect(),
        }
    }

    pub fn max_angle(&self) -> f64 {
        self.scale[0].max(self.scale[1])
    }

    pub fn max_load(&self) -> f64 {
        self.scale[LOAD_COL]
    }
}

/// One training sequence: inputs, normalized targets and torque labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub inputs: Outputs,
    pub targets: Outputs,
    pub torque_labels: Outputs,
    pub load_label: f64,
}

impl SequenceBatch {
    pub fn validate(&self) -> Result<()> {
        let t = self.inputs.steps;
        if t == 0 {
            return Err(Error::ShapeMismatch("sequence has no steps".into()));
        }
        if self.targets.steps != t || self.torque_labels.steps != t {
            return Err(Error::ShapeMismatch("inputs, targets and torques differ in length".into()));
        }
        if self.targets.width != N_OUTPUTS || self.torque_labels.width != 2 {
            return Err(Error::ShapeMismatch("targets must be Tx7 and torques Tx2".into()));
        }
        let all = self.inputs.data.iter().chain(&self.targets.data).chain(&self.torque_labels.data);
        if all.clone().any(|v| !v.is_finite()) || !self.load_label.is_finite() {
            return Err(Error::InvalidParameter("sequence contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Boolean mask of steps whose elbow angle is above the rest threshold.
pub fn active_mask(elbow_angles: &[f64]) -> Vec<bool> {
    elbow_angles.iter().map(|q| *q > ACTIVE_ELBOW_THRESHOLD).collect()
}

/// Per-epoch loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_q: f64,
    pub l_qd: f64,
    pub l_qdd: f64,
    pub l_m: f64,
    pub l_data: f64,
    pub l_physics: f64,
    pub l_total: f64,
}

/// Data loss components and their gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DataLoss {
    pub l_q: f64,
    pub l_qd: f64,
    pub l_qdd: f64,
    pub l_m: f64,
    pub grad: Outputs,
}

impl DataLoss {
    pub fn total(&self) -> f64 {
        self.l_q + self.l_qd + self.l_qdd + self.l_m
    }
}

/// Mean squared error per output group: angles, velocities, accelerations, load.
pub fn data_loss(pred: &Outputs, target: &Outputs) -> Result<DataLoss> {
    if pred.steps != target.steps || pred.width != N_OUTPUTS || target.width != N_OUTPUTS {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs target {}x{}",
            pred.steps, pred.width, target.steps, target.width
        )));
    }
    if pred.steps == 0 {
        return Err(Error::ShapeMismatch("empty sequence".into()));
    }
    let mut grad = Outputs::zeros(pred.steps, N_OUTPUTS);
    let mut group = |cols: &[usize]| {
        let n = (pred.steps * cols.len()) as f64;
        let mut sum = 0.0;
        for t in 0..pred.steps {
            for &c in cols {
                let diff = pred.row(t)[c] - target.row(t)[c];
                sum += diff * diff;
                grad.row_mut(t)[c] = 2.0 * diff / n;
            }
        }
        sum / n
    };
    let l_q = group(&ANGLE_COLS);
    let l_qd = group(&VELOCITY_COLS);
    let l_qdd = group(&ACCEL_COLS);
    let l_m = group(&[LOAD_COL]);
    Ok(DataLoss {
        l_q,
        l_qd,
        l_qdd,
        l_m,
        grad,
    })
}

/// Physics residual loss and its gradient with respect to the normalized prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsLoss {
    pub value: f64,
    pub grad: Outputs,
}

/// Joint state and load encoded by one physical output row.
pub fn state_from_row(row: &[f64]) -> (JointState, LoadMass) {
    (
        JointState {
            q: Vector2::new(row[0], row[1]),
            qd: Vector2::new(row[2], row[3]),
            qdd: Vector2::new(row[4], row[5]),
        },
        LoadMass(row[LOAD_COL]),
    )
}

/// Mean over steps and both joints of the squared residual between the torque
/// implied by the (denormalized) prediction and the label torque.
pub fn physics_loss(
    pred: &Outputs,
    torque_labels: &Outputs,
    model: &ArmModel,
    norm: &NormalizationStats,
    mask: Option<&[bool]>,
) -> Result<PhysicsLoss> {
    if pred.width != N_OUTPUTS || torque_labels.width != 2 || pred.steps != torque_labels.steps {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs torque labels {}x{}",
            pred.steps, pred.width, torque_labels.steps, torque_labels.width
        )));
    }
    if let Some(m) = mask {
        if m.len() != pred.steps {
            return Err(Error::ShapeMismatch("physics mask length".into()));
        }
    }
    let counted = mask.map_or(pred.steps, |m| m.iter().filter(|a| **a).count());
    let mut grad = Outputs::zeros(pred.steps, N_OUTPUTS);
    if counted == 0 {
        return Ok(PhysicsLoss { value: 0.0, grad });
    }
    let n = counted as f64;
    let mut sum = 0.0;
    for t in 0..pred.steps {
        if mask.is_some_and(|m| !m[t]) {
            continue;
        }
        let physical = norm.denormalize(pred.row(t));
        let (state, load) = state_from_row(&physical);
        let tau = inverse_dynamics(model, &state, load);
        let label = torque_labels.row(t);
        let residual = Vector2::new(tau.0[0] - label[0], tau.0[1] - label[1]);
        if !(residual[0].is_finite() && residual[1].is_finite()) {
            return Err(Error::NonFiniteResidual { step: t });
        }
        sum += residual.norm_squared();

        // dL/dx = (1/n) J^T r, then chain through x = y * scale + offset
        let jac = dynamics_jacobians(model, &state, load);
        let d_q = jac.d_q.transpose() * residual;
        let d_qd = jac.d_qd.transpose() * residual;
        let d_qdd = jac.d_qdd.transpose() * residual;
        let d_m = jac.d_m.dot(&residual);
        let phys_grad = [d_q[0], d_q[1], d_qd[0], d_qd[1], d_qdd[0], d_qdd[1], d_m];
        for ((g, pg), s) in grad.row_mut(t).iter_mut().zip(phys_grad).zip(&norm.scale) {
            *g = pg * s / n;
        }
    }
    Ok(PhysicsLoss {
        value: sum / (2.0 * n),
        grad,
    })
}

pub fn combined_loss(data: &LossReport, physics: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_data * data.l_data + cfg.lambda_physics * physics
}

/// Everything needed to restore a trained network and interpret its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub sizes: NetworkSizes,
    pub dropout: f64,
    pub seed: u64,
    pub epochs_trained: usize,
    pub config: TrainConfig,
    pub normalization: NormalizationStats,
    pub arm_model: ArmModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: CheckpointMetadata,
    pub net: GruNetwork,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    metadata: CheckpointMetadata,
    tensors: Vec<NamedTensor>,
}

const CHECKPOINT_FORMAT: &str = "pigrn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

fn malformed(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::MalformedCheckpoint {
        field: field.into(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let tensors = self
            .net
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| NamedTensor {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            metadata: self.metadata.clone(),
            tensors,
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| malformed("document", e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(malformed("format", format!("expected `{CHECKPOINT_FORMAT}`, got `{}`", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(malformed("version", format!("unsupported version {}", file.version)));
        }
        let meta = file.metadata;
        if meta.sizes.hidden != meta.config.hidden || meta.sizes.n_layers != meta.config.layers {
            return Err(malformed("metadata.sizes", "disagrees with metadata.config"));
        }
        if meta.sizes.n_outputs != N_OUTPUTS {
            return Err(malformed("metadata.sizes.n_outputs", format!("expected {N_OUTPUTS}")));
        }
        meta.normalization.validate().map_err(|e| malformed("metadata.normalization", e.to_string()))?;
        meta.arm_model.validate().map_err(|e| malformed("metadata.arm_model", e.to_string()))?;

        let mut net = GruNetwork::zeros(meta.sizes, meta.dropout);
        let expected: Vec<(String, Vec<usize>)> =
            net.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if file.tensors.len() != expected.len() {
            return Err(malformed(
                "tensors",
                format!("expected {} tensors, found {}", expected.len(), file.tensors.len()),
            ));
        }
        for ((name, shape), (tensor, slot)) in expected.iter().zip(file.tensors.iter().zip(net.tensors_mut())) {
            if &tensor.name != name {
                return Err(malformed(format!("tensors.{name}"), format!("found `{}` in its place", tensor.name)));
            }
            if &tensor.shape != shape {
                return Err(malformed(
                    format!("tensors.{name}.shape"),
                    format!("expected {shape:?}, found {:?}", tensor.shape),
                ));
            }
            if tensor.data.len() != slot.len() {
                return Err(malformed(format!("tensors.{name}.data"), "length does not match shape"));
            }
            slot.copy_from_slice(&tensor.data);
        }
        net.validate().map_err(|e| malformed("tensors", e.to_string()))?;
        Ok(Checkpoint { metadata: meta, net })
    }

    /// Errors when the checkpoint cannot serve a run configured by `cfg`.
    pub fn check_compatible(&self, cfg: &TrainConfig) -> Result<()> {
        let sizes = self.metadata.sizes;
        if sizes.hidden != cfg.hidden {
            return Err(malformed(
                "metadata.sizes.hidden",
                format!("checkpoint has {}, config requests {}", sizes.hidden, cfg.hidden),
            ));
        }
        if sizes.n_layers != cfg.layers {
            return Err(malformed(
                "metadata.sizes.n_layers",
                format!("checkpoint has {}, config requests {}", sizes.n_layers, cfg.layers),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: GruNetwork,
    pub history: Vec<LossReport>,
    pub checkpoint: Checkpoint,
    /// Number of optimizer steps whose gradient was clipped.
    pub clipped_steps: usize,
}

/// Relative decrease of the epoch loss that resets the early-stopping counter.
pub const EARLY_STOP_MIN_IMPROVEMENT: f64 = 1e-4;

/// Seed for the dropout mask of one (epoch, sequence) pair.
fn step_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (index as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Loss report and total output gradient for one sequence.
pub fn sequence_loss(
    pred: &Outputs,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    model: &ArmModel,
    norm: &NormalizationStats,
) -> Result<(LossReport, Outputs)> {
    let data = data_loss(pred, &batch.targets)?;
    let mask = match cfg.physics_mask {
        PhysicsMask::All => None,
        PhysicsMask::Active => {
            let elbow: Vec<f64> = (0..batch.targets.steps)
                .map(|t| norm.denormalize(batch.targets.row(t))[1])
                .collect();
            Some(active_mask(&elbow))
        }
    };
    let mut report = LossReport {
        l_q: data.l_q,
        l_qd: data.l_qd,
        l_qdd: data.l_qdd,
        l_m: data.l_m,
        l_data: data.total(),
        ..LossReport::default()
    };
    let mut grad = data.grad;
    grad.data.iter_mut().for_each(|g| *g *= cfg.lambda_data);
    if cfg.lambda_physics > 0.0 {
        let physics = physics_loss(pred, &batch.torque_labels, model, norm, mask.as_deref())?;
        report.l_physics = physics.value;
        for (g, p) in grad.data.iter_mut().zip(&physics.grad.data) {
            *g += cfg.lambda_physics * p;
        }
        report.l_total = combined_loss(&report, report.l_physics, cfg);
    } else {
        // reported for comparison only; a plain GRU may predict nonsense torques
        report.l_physics = physics_loss(pred, &batch.torque_labels, model, norm, mask.as_deref())
            .map_or(f64::NAN, |p| p.value);
        report.l_total = cfg.lambda_data * report.l_data;
    }
    Ok((report, grad))
}

/// Trains a fresh network on `dataset`, one sequence per Adam step, visiting
/// sequences in a seeded per-epoch shuffle.
pub fn train(
    dataset: &[SequenceBatch],
    cfg: &TrainConfig,
    model: &ArmModel,
    norm: &NormalizationStats,
) -> Result<TrainOutcome> {
    train_with(dataset, cfg, model, norm, |_, _, _| {})
}

/// As [`train`], calling `on_epoch(epoch, net, mean_losses)` after every epoch.
pub fn train_with(
    dataset: &[SequenceBatch],
    cfg: &TrainConfig,
    model: &ArmModel,
    norm: &NormalizationStats,
    mut on_epoch: impl FnMut(usize, &GruNetwork, &LossReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    norm.validate()?;
    let first = dataset.first().ok_or(Error::EmptyInput)?;
    for batch in dataset {
        batch.validate()?;
        if batch.inputs.width != first.inputs.width {
            return Err(Error::ShapeMismatch("sequences have different channel counts".into()));
        }
    }
    let sizes = cfg.sizes(first.inputs.width);
    let mut net = init_network(cfg.seed, sizes, cfg.dropout_p);
    let mut adam = AdamState::for_network(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &net,
    );
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut clipped_steps = 0;
    let mut best = f64::INFINITY;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, epoch, usize::MAX));
        order.shuffle(&mut rng);
        let mut sum = LossReport::default();
        let mut clipped_this_epoch = 0;
        for (i, &idx) in order.iter().enumerate() {
            let batch = &dataset[idx];
            let (pred, cache) = network_forward(&net, &batch.inputs, Mode::Train, step_seed(cfg.seed, epoch, i))?;
            let (report, d_out) = match sequence_loss(&pred, batch, cfg, model, norm) {
                Err(Error::NonFiniteResidual { .. }) => {
                    return Err(Error::Divergence { epoch, loss: f64::NAN })
                }
                other => other?,
            };
            if !report.l_total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: report.l_total,
                });
            }
            let mut grads = network_backward(&net, &cache, &d_out)?;
            if cfg.clip_gradients && clip_global_norm(&mut grads, cfg.grad_clip).is_some() {
                clipped_this_epoch += 1;
            }
            adam_step(&mut net, &grads, &mut adam)?;
            accumulate(&mut sum, &report);
        }
        let n = dataset.len() as f64;
        let mean = LossReport {
            l_q: sum.l_q / n,
            l_qd: sum.l_qd / n,
            l_qdd: sum.l_qdd / n,
            l_m: sum.l_m / n,
            l_data: sum.l_data / n,
            l_physics: sum.l_physics / n,
            l_total: sum.l_total / n,
        };
        if clipped_this_epoch > 0 {
            debug!("epoch {epoch}: gradient clipped on {clipped_this_epoch} steps");
        }
        clipped_steps += clipped_this_epoch;
        if epoch % 50 == 0 || epoch + 1 == cfg.epochs {
            info!(
                "epoch {epoch}: L_total={:.6} L_data={:.6} L_physics={:.6}",
                mean.l_total, mean.l_data, mean.l_physics
            );
        }
        on_epoch(epoch, &net, &mean);
        history.push(mean);

        if let Some(patience) = cfg.early_stop_patience {
            if mean.l_total < best * (1.0 - EARLY_STOP_MIN_IMPROVEMENT) {
                best = mean.l_total;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    info!("early stop at epoch {epoch}");
                    break;
                }
            }
        }
    }

    let checkpoint = Checkpoint {
        metadata: CheckpointMetadata {
            sizes,
            dropout: cfg.dropout_p,
            seed: cfg.seed,
            epochs_trained: history.len(),
            config: cfg.clone(),
            normalization: norm.clone(),
            arm_model: *model,
        },
        net: net.clone(),
    };
    Ok(TrainOutcome {
        net,
        history,
        checkpoint,
        clipped_steps,
    })
}

fn accumulate(sum: &mut LossReport, r: &LossReport) {
    sum.l_q += r.l_q;
    sum.l_qd += r.l_qd;
    sum.l_qdd += r.l_qdd;
    sum.l_m += r.l_m;
    sum.l_data += r.l_data;
    sum.l_physics += r.l_physics;
    sum.l_total += r.l_total;
}

pub const LOSS_HISTORY_HEADER: [&str; 8] = ["epoch", "L_q", "L_qd", "L_qdd", "L_m", "L_data", "L_physics", "L_total"];

pub fn write_loss_history(history: &[LossReport], path: impl AsRef<Path>) -> Result<()> {
    let table = crate::io::Table {
        header: LOSS_HISTORY_HEADER.iter().map(|s| s.to_string()).collect(),
        rows: history
            .iter()
            .enumerate()
            .map(|(e, r)| vec![e as f64, r.l_q, r.l_qd, r.l_qdd, r.l_m, r.l_data, r.l_physics, r.l_total])
            .collect(),
    };
    crate::io::write_csv(path, &table)
}
