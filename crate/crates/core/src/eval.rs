//! Error metrics and the evaluation path: EMG -> network -> denormalized
//! kinematics and load -> inverse dynamics -> torque.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{torques_of, ProcessedTrial};
use crate::dynamics::ArmModel;
use crate::error::{Error, Result};
use crate::nn::{network_forward, GruNetwork, Mode, Outputs};
use crate::training::{active_mask, NormalizationStats, N_OUTPUTS};

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::LengthMismatch(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let sum: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sum / y.len() as f64).sqrt())
}

/// RMSE as a percentage of the reference series' maximum (not its max magnitude).
pub fn pct_rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let e = rmse(y, yhat)?;
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::ZeroMax(max));
    }
    Ok(e * 100.0 / max)
}

/// RMSE as a percentage of the reference series' largest magnitude.
pub fn pct_rmse_absmax(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let e = rmse(y, yhat)?;
    let max = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(max > 0.0) {
        return Err(Error::ZeroMax(max));
    }
    Ok(e * 100.0 / max)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let constant = |s: &[f64]| s.iter().all(|v| *v == s[0]);
    if constant(x) || constant(y) {
        return Err(Error::ZeroVariance);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Network outputs for one trial in physical units, plus the implied torques.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// T x 7: q1, q2, qd1, qd2, qdd1, qdd2, load.
    pub outputs: Outputs,
    /// T x 2: shoulder and elbow torque.
    pub torques: Outputs,
    pub max_abs_hidden: f64,
}

/// Deterministic (eval-mode) prediction from EMG rows of any length.
pub fn predict(net: &GruNetwork, emg: &Outputs, model: &ArmModel, norm: &NormalizationStats) -> Result<Prediction> {
    if emg.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("EMG input contains non-finite values".into()));
    }
    let (normalized, cache) = network_forward(net, emg, Mode::Eval, 0)?;
    let outputs = norm.denormalize_all(&normalized);
    let torques = torques_of(&outputs, model);
    if torques.data.iter().any(|v| !v.is_finite()) {
        let step = torques.data.iter().position(|v| !v.is_finite()).unwrap_or(0) / 2;
        return Err(Error::NonFiniteResidual { step });
    }
    Ok(Prediction {
        outputs,
        torques,
        max_abs_hidden: cache.max_abs_hidden(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    ShoulderAngle,
    ElbowAngle,
    ShoulderVelocity,
    ElbowVelocity,
    ShoulderAcceleration,
    ElbowAcceleration,
    Load,
    ShoulderTorque,
    ElbowTorque,
}

impl Quantity {
    pub const ALL: [Quantity; 9] = [
        Quantity::ElbowAngle,
        Quantity::ElbowTorque,
        Quantity::ShoulderAngle,
        Quantity::ShoulderTorque,
        Quantity::ElbowVelocity,
        Quantity::ShoulderVelocity,
        Quantity::ElbowAcceleration,
        Quantity::ShoulderAcceleration,
        Quantity::Load,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::ShoulderAngle => "shoulder_angle",
            Quantity::ElbowAngle => "elbow_angle",
            Quantity::ShoulderVelocity => "shoulder_velocity",
            Quantity::ElbowVelocity => "elbow_velocity",
            Quantity::ShoulderAcceleration => "shoulder_acceleration",
            Quantity::ElbowAcceleration => "elbow_acceleration",
            Quantity::Load => "load",
            Quantity::ShoulderTorque => "shoulder_torque",
            Quantity::ElbowTorque => "elbow_torque",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Quantity::ShoulderAngle | Quantity::ElbowAngle => "rad",
            Quantity::ShoulderVelocity | Quantity::ElbowVelocity => "rad/s",
            Quantity::ShoulderAcceleration | Quantity::ElbowAcceleration => "rad/s^2",
            Quantity::Load => "kg",
            Quantity::ShoulderTorque | Quantity::ElbowTorque => "N*m",
        }
    }

    /// (uses torque table, column index)
    fn column(self) -> (bool, usize) {
        match self {
            Quantity::ShoulderAngle => (false, 0),
            Quantity::ElbowAngle => (false, 1),
            Quantity::ShoulderVelocity => (false, 2),
            Quantity::ElbowVelocity => (false, 3),
            Quantity::ShoulderAcceleration => (false, 4),
            Quantity::ElbowAcceleration => (false, 5),
            Quantity::Load => (false, 6),
            Quantity::ShoulderTorque => (true, 0),
            Quantity::ElbowTorque => (true, 1),
        }
    }
}

/// Mean and spread of a per-trial metric over the trials where it is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        Some(Spread {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityMetrics {
    pub quantity: String,
    pub unit: String,
    pub rmse: Option<Spread>,
    pub pct_rmse: Option<Spread>,
    pub pct_rmse_absmax: Option<Spread>,
    pub pearson_r: Option<Spread>,
}

/// Held-out load estimate per trial: median predicted load over active steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadEstimate {
    pub per_trial: Vec<(f64, f64)>,
    pub rmse: f64,
    pub pearson_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_trials: usize,
    /// True when %RMSE divides by the maximum over all evaluated trials.
    pub global_max: bool,
    pub quantities: Vec<QuantityMetrics>,
    pub load_estimate: LoadEstimate,
}

impl MetricReport {
    pub fn get(&self, q: Quantity) -> &QuantityMetrics {
        self.quantities
            .iter()
            .find(|m| m.quantity == q.name())
            .expect("every quantity is reported")
    }

    pub const CSV_HEADER: [&'static str; 15] = [
        "quantity",
        "unit",
        "n_trials",
        "rmse_mean",
        "rmse_min",
        "rmse_max",
        "pct_rmse_mean",
        "pct_rmse_min",
        "pct_rmse_max",
        "pct_rmse_absmax_mean",
        "pct_rmse_absmax_min",
        "pct_rmse_absmax_max",
        "pearson_r_mean",
        "pearson_r_min",
        "pearson_r_max",
    ];

    /// One row per quantity; undefined metrics are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = Self::CSV_HEADER.join(",");
        out.push('\n');
        let cells = |s: &Option<Spread>| match s {
            Some(s) => vec![format!("{}", s.mean), format!("{}", s.min), format!("{}", s.max)],
            None => vec![String::new(); 3],
        };
        for m in &self.quantities {
            let mut row = vec![m.quantity.clone(), m.unit.clone(), self.n_trials.to_string()];
            row.extend(cells(&m.rmse));
            row.extend(cells(&m.pct_rmse));
            row.extend(cells(&m.pct_rmse_absmax));
            row.extend(cells(&m.pearson_r));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let (c, j) = (csv_path.as_ref(), json_path.as_ref());
        std::fs::write(c, self.to_csv()).map_err(|e| Error::io(c, e))?;
        std::fs::write(j, self.to_json()).map_err(|e| Error::io(j, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Divide %RMSE by the maximum over all trials instead of each trial's own.
    pub global_max: bool,
}

/// Truth and prediction for one trial, in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub name: String,
    pub truth: Outputs,
    pub truth_torques: Outputs,
    pub prediction: Prediction,
}

impl TrialResult {
    pub fn series(&self, q: Quantity) -> (Vec<f64>, Vec<f64>) {
        match q.column() {
            (false, c) => (self.truth.column(c), self.prediction.outputs.column(c)),
            (true, c) => (self.truth_torques.column(c), self.prediction.torques.column(c)),
        }
    }

    /// CSV with true/predicted columns for every quantity, one row per step.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["step".to_string()];
        let mut columns = Vec::new();
        for q in Quantity::ALL {
            let (y, yhat) = self.series(q);
            header.push(format!("{}_true", q.name()));
            header.push(format!("{}_pred", q.name()));
            columns.push(y);
            columns.push(yhat);
        }
        let mut out = header.join(",");
        out.push('\n');
        for t in 0..self.truth.steps {
            let mut row = vec![t.to_string()];
            row.extend(columns.iter().map(|c| format!("{}", c[t])));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn predict_trials(
    net: &GruNetwork,
    trials: &[ProcessedTrial],
    model: &ArmModel,
    norm: &NormalizationStats,
) -> Result<Vec<TrialResult>> {
    trials
        .par_iter()
        .map(|trial| {
            let prediction = predict(net, &trial.emg, model, norm)?;
            Ok(TrialResult {
                name: trial.name.clone(),
                truth: trial.targets(),
                truth_torques: trial.torques(model),
                prediction,
            })
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregates per-trial metrics into a report.
pub fn summarize(results: &[TrialResult], opts: EvalOptions) -> Result<MetricReport> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut quantities = Vec::with_capacity(Quantity::ALL.len());
    for q in Quantity::ALL {
        let series: Vec<(Vec<f64>, Vec<f64>)> = results.iter().map(|r| r.series(q)).collect();
        let global = series
            .iter()
            .flat_map(|(y, _)| y.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        let global_abs = series
            .iter()
            .flat_map(|(y, _)| y.iter().copied())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let (mut e, mut pct, mut pct_abs, mut r) = (vec![], vec![], vec![], vec![]);
        for (y, yhat) in &series {
            let err = rmse(y, yhat)?;
            e.push(err);
            if opts.global_max {
                if global > 0.0 {
                    pct.push(err * 100.0 / global);
                }
                if global_abs > 0.0 {
                    pct_abs.push(err * 100.0 / global_abs);
                }
            } else {
                pct.extend(pct_rmse(y, yhat).ok());
                pct_abs.extend(pct_rmse_absmax(y, yhat).ok());
            }
            r.extend(pearson(y, yhat).ok());
        }
        quantities.push(QuantityMetrics {
            quantity: q.name().into(),
            unit: q.unit().into(),
            rmse: Spread::of(&e),
            pct_rmse: Spread::of(&pct),
            pct_rmse_absmax: Spread::of(&pct_abs),
            pearson_r: Spread::of(&r),
        });
    }

    let per_trial: Vec<(f64, f64)> = results
        .iter()
        .map(|r| {
            let active = active_mask(&r.truth.column(1));
            let predicted: Vec<f64> = r
                .prediction
                .outputs
                .column(N_OUTPUTS - 1)
                .into_iter()
                .zip(&active)
                .filter(|(_, a)| **a)
                .map(|(m, _)| m)
                .collect();
            let estimate = if predicted.is_empty() {
                median(r.prediction.outputs.column(N_OUTPUTS - 1))
            } else {
                median(predicted)
            };
            (r.truth.row(0)[N_OUTPUTS - 1], estimate)
        })
        .collect();
    let (truth, est): (Vec<f64>, Vec<f64>) = per_trial.iter().copied().unzip();
    let load_estimate = LoadEstimate {
        rmse: rmse(&truth, &est)?,
        pearson_r: pearson(&truth, &est).ok(),
        per_trial,
    };
    Ok(MetricReport {
        n_trials: results.len(),
        global_max: opts.global_max,
        quantities,
        load_estimate,
    })
}

pub fn evaluate(
    net: &GruNetwork,
    trials: &[ProcessedTrial],
    model: &ArmModel,
    norm: &NormalizationStats,
    opts: EvalOptions,
) -> Result<MetricReport> {
    summarize(&predict_trials(net, trials, model, norm)?, opts)
}
