//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pigrn::commands::{cmd_sweep_lambda, prepare_training, SweepArgs, DEFAULT_SWEEP, METRICS_CSV};
use pigrn::dataset::{DatasetManifest, ProcessedTrial, Split, MANIFEST_FILE};
use pigrn::dynamics::{
    dynamics_jacobians, forward_dynamics, inertia_matrix, inverse_dynamics, ArmModel, JointState, LoadMass,
};
use pigrn::eval::{evaluate, pct_rmse, pearson, predict, rmse, EvalOptions, MetricReport, Quantity};
use pigrn::nn::{init_network, network_backward, network_forward, GruNetwork, Mode, NetworkSizes, Outputs};
use pigrn::synthdata::{build_dataset_with_splits, long_sequence, SynthConfig};
use pigrn::training::{
    active_mask, physics_loss, sequence_loss, train, NormalizationStats, SequenceBatch, TrainConfig, N_OUTPUTS,
};

type Check = Result<(bool, String), String>;

fn random_state(rng: &mut ChaCha8Rng) -> (JointState, LoadMass) {
    let mut pair = |lo: f64, hi: f64| [rng.random_range(lo..hi), rng.random_range(lo..hi)];
    let q = pair(-std::f64::consts::PI, std::f64::consts::PI);
    let qd = pair(-6.0, 6.0);
    let qdd = pair(-30.0, 30.0);
    let m = rng.random_range(0.0..=4.0);
    (JointState::new(q, qd, qdd), LoadMass(m))
}

fn dynamics_round_trip() -> Check {
    let model = ArmModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut all_pd = true;
    for _ in 0..1000 {
        let (state, m) = random_state(&mut rng);
        let tau = inverse_dynamics(&model, &state, m);
        let qdd = forward_dynamics(&model, &state.q, &state.qd, &tau, m).map_err(|e| e.to_string())?;
        worst = worst.max((qdd - state.qdd).amax());
        let mm = inertia_matrix(&model, &state.q, m);
        let symmetric = mm[(0, 1)] == mm[(1, 0)];
        all_pd &= symmetric && mm.cholesky().is_some();
    }
    Ok((
        worst < 1e-9 && all_pd,
        format!("max |FD(ID) - qdd| = {worst:.2e}, symmetric PD in all samples: {all_pd}"),
    ))
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn jacobians_match_finite_differences() -> Check {
    let model = ArmModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (state, m) = random_state(&mut rng);
        let jac = dynamics_jacobians(&model, &state, m);
        let tau = |s: &JointState, m: LoadMass| inverse_dynamics(&model, s, m).0;
        for j in 0..2 {
            for (which, analytic) in [(0, &jac.d_q), (1, &jac.d_qd), (2, &jac.d_qdd)] {
                let bump = |sign: f64| {
                    let mut s = state;
                    let field = match which {
                        0 => &mut s.q,
                        1 => &mut s.qd,
                        _ => &mut s.qdd,
                    };
                    field[j] += sign * h;
                    tau(&s, m)
                };
                let fd: Vector2<f64> = (bump(1.0) - bump(-1.0)) / (2.0 * h);
                for i in 0..2 {
                    worst = worst.max(rel_err(analytic[(i, j)], fd[i], 1e-3));
                }
            }
        }
        let fd_m = (tau(&state, LoadMass(m.0 + h)) - tau(&state, LoadMass(m.0 - h))) / (2.0 * h);
        for i in 0..2 {
            worst = worst.max(rel_err(jac.d_m[i], fd_m[i], 1e-3));
        }
    }
    Ok((
        worst < 1e-5,
        format!("max relative error {worst:.2e} (denominator floored at 1e-3)"),
    ))
}

fn small_batch(rng: &mut ChaCha8Rng, steps: usize, model: &ArmModel, norm: &NormalizationStats) -> SequenceBatch {
    let mut inputs = Outputs::zeros(steps, 4);
    inputs.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    let mut targets = Outputs::zeros(steps, N_OUTPUTS);
    targets.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let mut torque_labels = Outputs::zeros(steps, 2);
    for t in 0..steps {
        let phys = norm.denormalize(targets.row(t));
        let (state, m) = pigrn::training::state_from_row(&phys);
        let tau = inverse_dynamics(model, &state, m).0;
        torque_labels.row_mut(t).copy_from_slice(&[tau[0] + rng.random_range(-1.0..1.0), tau[1]]);
    }
    SequenceBatch {
        inputs,
        targets,
        torque_labels,
        load_label: 1.0,
    }
}

fn bptt_gradient_check() -> Check {
    let model = ArmModel::default();
    let norm = NormalizationStats {
        scale: [0.6, 2.3, 1.5, 5.0, 10.0, 20.0, 4.0],
        offset: [0.0; N_OUTPUTS],
    };
    let cfg = TrainConfig {
        lambda_physics: 1e-3,
        hidden: 4,
        layers: 2,
        dropout_p: 0.2,
        ..TrainConfig::default()
    };
    let sizes = NetworkSizes {
        n_inputs: 4,
        hidden: 4,
        n_layers: 2,
        n_outputs: N_OUTPUTS,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = small_batch(&mut rng, 7, &model, &norm);
    let net = init_network(4, sizes, cfg.dropout_p);
    let dropout_seed = 99;
    let loss_of = |net: &GruNetwork| -> f64 {
        let (pred, _) = network_forward(net, &batch.inputs, Mode::Train, dropout_seed).unwrap();
        sequence_loss(&pred, &batch, &cfg, &model, &norm).unwrap().0.l_total
    };
    let (pred, cache) = network_forward(&net, &batch.inputs, Mode::Train, dropout_seed).map_err(|e| e.to_string())?;
    let (_, d_out) = sequence_loss(&pred, &batch, &cfg, &model, &norm).map_err(|e| e.to_string())?;
    let grads = network_backward(&net, &cache, &d_out).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grads.tensors().into_iter().flat_map(|(_, _, d)| d.to_vec()).collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut k = 0;
    let n_tensors = net.tensors().len();
    for ti in 0..n_tensors {
        let len = net.tensors()[ti].2.len();
        for i in 0..len {
            let mut up = net.clone();
            up.tensors_mut()[ti][i] += h;
            let mut down = net.clone();
            down.tensors_mut()[ti][i] -= h;
            let fd = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k], fd, 1e-6));
            k += 1;
        }
    }
    Ok((
        worst < 1e-4,
        format!("{k} parameters, max relative error {worst:.2e} (denominator floored at 1e-6)"),
    ))
}

/// End-to-end data: 24 training trials (8 per load) and 8 held-out trials.
struct Experiment {
    dir: tempfile::TempDir,
    manifest: DatasetManifest,
    model: ArmModel,
    norm: NormalizationStats,
    test: Vec<ProcessedTrial>,
    batches: Vec<SequenceBatch>,
}

impl Experiment {
    fn build() -> Result<Self, String> {
        let model = ArmModel::default();
        let train_cfg = SynthConfig {
            trials_per_load: 8,
            noise_level: 0.05,
            seed: 11,
            ..SynthConfig::default()
        };
        let test_cfg = SynthConfig {
            trials_per_load: 3,
            seed: 12,
            ..train_cfg.clone()
        };
        let mut specs = train_cfg.specs().map_err(|e| e.to_string())?;
        let mut splits = vec![Split::Train; specs.len()];
        let held_out = test_cfg.specs().map_err(|e| e.to_string())?;
        specs.extend_from_slice(&held_out[..8]);
        splits.extend([Split::Test; 8]);
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        build_dataset_with_splits(&specs, &splits, &model, &train_cfg.anthro, 11, dir.path())
            .map_err(|e| e.to_string())?;
        let prepared = prepare_training(&dir.path().join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
        let norm = prepared.manifest.normalization.clone().ok_or("missing normalization")?;
        let test = prepared.manifest.load_split(Split::Test).map_err(|e| e.to_string())?;
        Ok(Experiment {
            dir,
            manifest: prepared.manifest,
            model,
            norm,
            test,
            batches: prepared.batches,
        })
    }

    fn config(&self, lambda: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            lambda_physics: lambda,
            epochs,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn train_and_eval(&self, lambda: f64, epochs: usize) -> Result<(GruNetwork, MetricReport), String> {
        let outcome = train(&self.batches, &self.config(lambda, epochs), &self.model, &self.norm)
            .map_err(|e| e.to_string())?;
        let report = evaluate(&outcome.net, &self.test, &self.model, &self.norm, EvalOptions::default())
            .map_err(|e| e.to_string())?;
        Ok((outcome.net, report))
    }
}

fn mean_of(report: &MetricReport, q: Quantity, pick: fn(&pigrn::eval::QuantityMetrics) -> Option<pigrn::eval::Spread>) -> f64 {
    pick(report.get(q)).map_or(f64::NAN, |s| s.mean)
}

fn synthetic_end_to_end(report: &MetricReport) -> Check {
    let angle = mean_of(report, Quantity::ElbowAngle, |m| m.pct_rmse);
    let r = mean_of(report, Quantity::ElbowTorque, |m| m.pearson_r);
    Ok((
        angle <= 10.0 && r >= 0.90,
        format!(
            "{} held-out trials: elbow-angle %RMSE {angle:.2} (<= 10), elbow-torque r {r:.4} (>= 0.90)",
            report.n_trials
        ),
    ))
}

fn physics_zero_point(exp: &Experiment) -> Check {
    let mut worst = 0.0f64;
    for batch in &exp.batches {
        let loss = physics_loss(&batch.targets, &batch.torque_labels, &exp.model, &exp.norm, None)
            .map_err(|e| e.to_string())?;
        worst = worst.max(loss.value);
    }
    Ok((worst < 1e-18, format!("max physics loss on ground truth {worst:.2e}")))
}

fn long_sequence_generalization(exp: &Experiment, net: &GruNetwork) -> Check {
    let cfg = SynthConfig {
        seed: 13,
        noise_level: 0.05,
        ..SynthConfig::default()
    };
    let seq = long_sequence(&cfg, 2.0, 5000, &exp.model).map_err(|e| e.to_string())?;
    let pred = predict(net, &seq.emg, &exp.model, &exp.norm).map_err(|e| e.to_string())?;
    let finite = pred.outputs.data.iter().chain(&pred.torques.data).all(|v| v.is_finite());
    let truth = seq.torques(&exp.model);
    let active = active_mask(&seq.kinematics.column(1));
    let pick = |o: &Outputs, c: usize| -> Vec<f64> {
        o.column(c).into_iter().zip(&active).filter(|(_, a)| **a).map(|(v, _)| v).collect()
    };
    let r_elbow = pearson(&pick(&truth, 1), &pick(&pred.torques, 1)).map_err(|e| e.to_string())?;
    let r_shoulder = pearson(&pick(&truth, 0), &pick(&pred.torques, 0)).map_err(|e| e.to_string())?;
    let n_active = active.iter().filter(|a| **a).count();
    Ok((
        finite && pred.max_abs_hidden <= 1.0 && r_elbow >= 0.85,
        format!(
            "{} steps, finite: {finite}, max |h| = {:.4}, elbow-torque r {r_elbow:.4} (>= 0.85) over {n_active} active steps (shoulder r {r_shoulder:.4})",
            seq.steps(),
            pred.max_abs_hidden
        ),
    ))
}

fn lambda_sweep(exp: &Experiment) -> Check {
    let out = exp.dir.path().join("sweep");
    let rows = cmd_sweep_lambda(&SweepArgs {
        manifest: exp.dir.path().join(MANIFEST_FILE),
        out,
        seed: Some(5),
        epochs: Some(300),
        values: Some(DEFAULT_SWEEP.to_vec()),
        ..SweepArgs::default()
    })
    .map_err(|e| e.to_string())?;
    let angle_rmse = |lambda: f64| {
        rows.iter()
            .find(|r| r.lambda == lambda)
            .map_or(f64::NAN, |r| mean_of(&r.report, Quantity::ElbowAngle, |m| m.rmse))
    };
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}: {:.4}", r.lambda, mean_of(&r.report, Quantity::ElbowAngle, |m| m.rmse)))
        .collect();
    let (small, large) = (angle_rmse(0.001), angle_rmse(1.0));
    Ok((
        small <= large,
        format!("elbow-angle RMSE (rad) at 300 epochs: {}; 0.001 <= 1.0: {}", table.join(", "), small <= large),
    ))
}

fn physics_does_not_hurt(pigrn: &MetricReport, plain: &MetricReport) -> Check {
    let a = mean_of(pigrn, Quantity::ElbowTorque, |m| m.pct_rmse);
    let b = mean_of(plain, Quantity::ElbowTorque, |m| m.pct_rmse);
    let direction = if a < b { "physics term improved" } else { "physics term did not improve" };
    Ok((
        a <= b + 1.0,
        format!("elbow-torque %RMSE: physics-informed {a:.2}, plain GRU {b:.2} (limit {:.2}); {direction}", b + 1.0),
    ))
}

fn run_pipeline(root: &Path) -> Result<Vec<u8>, String> {
    let bin = env!("CARGO_BIN_EXE_pigrn");
    let synth = SynthConfig {
        n_total_steps: 200,
        n_active_steps: 120,
        ..SynthConfig::default()
    };
    fs::create_dir_all(root.join("data")).map_err(|e| e.to_string())?;
    synth.save(root.join("synth.toml")).map_err(|e| e.to_string())?;
    TrainConfig {
        epochs: 5,
        hidden: 16,
        seed: 21,
        ..TrainConfig::default()
    }
    .save(root.join("train.toml"))
    .map_err(|e| e.to_string())?;
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let steps: [Vec<String>; 3] = [
        vec!["synth".into(), "--config".into(), p("synth.toml"), "--out".into(), p("data"), "--seed".into(), "4".into()],
        vec![
            "train".into(),
            "--config".into(),
            p("train.toml"),
            "--manifest".into(),
            p("data/manifest.toml"),
            "--out".into(),
            p("run"),
        ],
        vec![
            "eval".into(),
            "--checkpoint".into(),
            p("run/checkpoint.json"),
            "--manifest".into(),
            p("data/manifest.toml"),
            "--out".into(),
            p("eval"),
        ],
    ];
    for args in steps {
        let out = Command::new(bin).args(&args).arg("--quiet").output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    fs::read(root.join("eval").join(METRICS_CSV)).map_err(|e| e.to_string())
}

fn pipeline_determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_pipeline(a.path())?;
    let second = run_pipeline(b.path())?;
    Ok((
        first == second && !first.is_empty(),
        format!("metric CSVs of two synth/train/eval runs: {} bytes, identical: {}", first.len(), first == second),
    ))
}

fn metric_examples() -> Check {
    let y = [0.0, 1.0, 2.0];
    let yhat = [0.0, 1.0, 3.0];
    let e = rmse(&y, &yhat).map_err(|e| e.to_string())?;
    let p = pct_rmse(&y, &yhat).map_err(|e| e.to_string())?;
    let x = [1.0, 2.0, 3.0, 4.0];
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let r = pearson(&x, &[2.0, 4.0, 5.0, 9.0]).map_err(|e| e.to_string())?;
    // raw-sum textbook evaluation: 44 / sqrt(20 * 104)
    let r_ref = 44.0 / (2080.0f64).sqrt();
    let checks = [
        ("rmse identical", rmse(&y, &y).map_err(|e| e.to_string())? == 0.0),
        ("rmse example", e == (1.0f64 / 3.0).sqrt() && format!("{e:.4}") == "0.5774"),
        ("rmse shift", rmse(&[5.0, 6.0, 7.0], &[5.0, 6.0, 8.0]).map_err(|e| e.to_string())? == e),
        ("pct_rmse example", format!("{p:.2}") == "28.87"),
        ("pct_rmse identical", pct_rmse(&y, &y).map_err(|e| e.to_string())? == 0.0),
        ("pearson y = x", pearson(&x, &x).map_err(|e| e.to_string())? == 1.0),
        ("pearson y = -x", pearson(&x, &neg).map_err(|e| e.to_string())? == -1.0),
        ("pearson example", (r - r_ref).abs() <= 1e-15),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    Ok((
        failed.is_empty(),
        format!(
            "rmse {e:.4}, %RMSE {p:.2}, r {r:.10}; failed: {}",
            if failed.is_empty() { "none".to_string() } else { failed.join(", ") }
        ),
    ))
}

fn report(id: u32, name: &str, start: Instant, result: Check, failures: &mut u32) {
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok((true, detail)) => println!("PASS [{id}] {name}: {detail} ({secs:.1} s)"),
        Ok((false, detail)) => {
            *failures += 1;
            println!("FAIL [{id}] {name}: {detail} ({secs:.1} s)");
        }
        Err(e) => {
            *failures += 1;
            println!("FAIL [{id}] {name}: error: {e} ({secs:.1} s)");
        }
    }
}

fn main() {
    let mut failures = 0;

    let t = Instant::now();
    let r = dynamics_round_trip().map(|(ok, d)| {
        let secs = t.elapsed().as_secs_f64();
        (ok && secs < 5.0, format!("{d}, runtime {secs:.2} s (< 5)"))
    });
    report(1, "dynamics round trip", t, r, &mut failures);

    let t = Instant::now();
    let r = jacobians_match_finite_differences().map(|(ok, d)| {
        let secs = t.elapsed().as_secs_f64();
        (ok && secs < 5.0, format!("{d}, runtime {secs:.2} s (< 5)"))
    });
    report(2, "dynamics jacobians", t, r, &mut failures);

    let t = Instant::now();
    let r = bptt_gradient_check().map(|(ok, d)| {
        let secs = t.elapsed().as_secs_f64();
        (ok && secs < 30.0, format!("{d}, runtime {secs:.2} s (< 30)"))
    });
    report(3, "BPTT gradient check", t, r, &mut failures);

    let t = Instant::now();
    report(10, "metric examples", t, metric_examples(), &mut failures);

    let t = Instant::now();
    report(9, "pipeline determinism", t, pipeline_determinism(), &mut failures);

    let t = Instant::now();
    let exp = match Experiment::build() {
        Ok(exp) => exp,
        Err(e) => {
            for (id, name) in [(4, "synthetic end-to-end"), (5, "physics zero point"), (6, "long sequence"), (7, "lambda sweep"), (8, "physics vs plain GRU")] {
                report(id, name, t, Err(format!("dataset: {e}")), &mut failures);
            }
            std::process::exit(1);
        }
    };
    assert_eq!(exp.manifest.entries(Split::Train).count(), 24);

    let t = Instant::now();
    report(5, "physics zero point", t, physics_zero_point(&exp), &mut failures);

    let t = Instant::now();
    let trained = exp.train_and_eval(1e-3, 500);
    let r = match &trained {
        Ok((_, report)) => synthetic_end_to_end(report).map(|(ok, d)| {
            let secs = t.elapsed().as_secs_f64();
            (ok, format!("{d}, runtime {secs:.0} s"))
        }),
        Err(e) => Err(e.clone()),
    };
    report(4, "synthetic end-to-end", t, r, &mut failures);

    let t = Instant::now();
    let r = match &trained {
        Ok((net, _)) => long_sequence_generalization(&exp, net),
        Err(e) => Err(format!("no end-to-end model: {e}")),
    };
    report(6, "long-sequence generalization", t, r, &mut failures);

    let t = Instant::now();
    let r = match (&trained, &exp.train_and_eval(0.0, 500)) {
        (Ok((_, pigrn)), Ok((_, plain))) => physics_does_not_hurt(pigrn, plain),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    report(8, "physics-informed vs plain GRU", t, r, &mut failures);

    let t = Instant::now();
    report(7, "lambda sweep", t, lambda_sweep(&exp), &mut failures);

    println!("{} criteria failed", failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
