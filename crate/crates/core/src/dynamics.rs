//! Closed-form rigid-body dynamics of a two-link planar arm in the sagittal
//! plane, with a point-mass load held at the forearm tip.
//!
//! Angle convention: `q[0]` is the shoulder angle measured from the downward
//! vertical (positive = forward flexion), `q[1]` is elbow flexion relative to
//! the upper arm (0 = fully extended). The hanging pose `(0, 0)` is a
//! torque-free equilibrium for any load.
//!
//! The equation of motion is `M(q, m) qdd + C(q, qd, m) + G(q, m) = tau`. The
//! load `m` is modeled as a separate point mass at distance `l2` from the
//! elbow; segment parameters are not modified by it.

use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard gravitational acceleration, m/s².
pub const GRAVITY: f64 = 9.81;

/// Condition number above which the inertia matrix is treated as singular.
pub const MAX_INERTIA_CONDITION: f64 = 1e12;

/// Body-segment regression coefficients used to scale a subject's mass and
/// height into an [`ArmModel`].
///
/// The defaults are Dempster's segment parameters as tabulated in Winter,
/// *Biomechanics and Motor Control of Human Movement* (4th ed., Table 4.1),
/// with segment lengths from the Drillis-Contini height proportions:
///
/// | segment        | length / H | mass / M | COM / length (proximal) | radius of gyration / length (COM) |
/// |----------------|-----------:|---------:|------------------------:|----------------------------------:|
/// | upper arm      | 0.186      | 0.028    | 0.436                   | 0.322                             |
/// | forearm + hand | 0.146      | 0.022    | 0.682                   | 0.468                             |
///
/// The forearm-and-hand segment runs from the elbow axis to the ulnar
/// styloid, so the hand load acts at that distance from the elbow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnthroConfig {
    #[serde(default = "default_source")]
    pub source: String,
    pub body_mass: f64,
    pub body_height: f64,
    pub upper_arm_length_fraction: f64,
    pub forearm_hand_length_fraction: f64,
    pub upper_arm_mass_fraction: f64,
    pub forearm_hand_mass_fraction: f64,
    pub com_fraction_upper: f64,
    pub com_fraction_forearm: f64,
    pub radius_of_gyration_fraction_upper: f64,
    pub radius_of_gyration_fraction_forearm: f64,
}

fn default_source() -> String {
    "Winter (2009) Table 4.1, Dempster segment parameters; Drillis-Contini segment lengths"
        .to_string()
}

impl Default for AnthroConfig {
    fn default() -> Self {
        AnthroConfig {
            source: default_source(),
            body_mass: 73.0,
            body_height: 1.74,
            upper_arm_length_fraction: 0.186,
            forearm_hand_length_fraction: 0.146,
            upper_arm_mass_fraction: 0.028,
            forearm_hand_mass_fraction: 0.022,
            com_fraction_upper: 0.436,
            com_fraction_forearm: 0.682,
            radius_of_gyration_fraction_upper: 0.322,
            radius_of_gyration_fraction_forearm: 0.468,
        }
    }
}

impl AnthroConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("body_mass", self.body_mass),
            ("body_height", self.body_height),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidAnthro(format!("{name} must be > 0, got {v}")));
            }
        }
        let fractions = [
            ("upper_arm_length_fraction", self.upper_arm_length_fraction),
            ("forearm_hand_length_fraction", self.forearm_hand_length_fraction),
            ("upper_arm_mass_fraction", self.upper_arm_mass_fraction),
            ("forearm_hand_mass_fraction", self.forearm_hand_mass_fraction),
            ("com_fraction_upper", self.com_fraction_upper),
            ("com_fraction_forearm", self.com_fraction_forearm),
            (
                "radius_of_gyration_fraction_upper",
                self.radius_of_gyration_fraction_upper,
            ),
            (
                "radius_of_gyration_fraction_forearm",
                self.radius_of_gyration_fraction_forearm,
            ),
        ];
        for (name, v) in fractions {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidAnthro(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_toml(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_toml(path, self)
    }
}

/// Physical parameters of the two-link arm. Inertias are about segment COMs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    pub lc1: f64,
    pub lc2: f64,
    pub i1: f64,
    pub i2: f64,
    #[serde(default = "default_gravity")]
    pub g: f64,
}

fn default_gravity() -> f64 {
    GRAVITY
}

impl ArmModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.l1, self.l2, self.m1, self.m2, self.lc1, self.lc2, self.i1, self.i2, self.g,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite parameter".into()));
        }
        if self.l1 <= 0.0 || self.l2 <= 0.0 || self.m1 <= 0.0 || self.m2 <= 0.0 || self.g <= 0.0 {
            return Err(Error::InvalidModel(
                "lengths, masses and gravity must be > 0".into(),
            ));
        }
        if !(self.lc1 > 0.0 && self.lc1 < self.l1) || !(self.lc2 > 0.0 && self.lc2 < self.l2) {
            return Err(Error::InvalidModel(
                "COM distances must lie strictly inside their segments".into(),
            ));
        }
        if self.i1 < 0.0 || self.i2 < 0.0 {
            return Err(Error::InvalidModel("inertias must be >= 0".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: ArmModel = crate::io::read_toml(path)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_toml(path, self)
    }

    /// Load-dependent lumped coefficients shared by M, C and G.
    fn lumped(&self, m: f64) -> Lumped {
        Lumped {
            a: self.i1 + self.m1 * self.lc1 * self.lc1 + (self.m2 + m) * self.l1 * self.l1,
            b: self.l1 * (self.m2 * self.lc2 + m * self.l2),
            d: self.i2 + self.m2 * self.lc2 * self.lc2 + m * self.l2 * self.l2,
            g_upper: self.g * (self.m1 * self.lc1 + (self.m2 + m) * self.l1),
            g_fore: self.g * (self.m2 * self.lc2 + m * self.l2),
        }
    }

    /// Partial derivatives of [`Lumped`] with respect to the load mass.
    fn lumped_dm(&self) -> Lumped {
        Lumped {
            a: self.l1 * self.l1,
            b: self.l1 * self.l2,
            d: self.l2 * self.l2,
            g_upper: self.g * self.l1,
            g_fore: self.g * self.l2,
        }
    }
}

impl Default for ArmModel {
    fn default() -> Self {
        build_arm_model(&AnthroConfig::default()).expect("default anthropometry is valid")
    }
}

#[derive(Debug, Clone, Copy)]
struct Lumped {
    a: f64,
    b: f64,
    d: f64,
    g_upper: f64,
    g_fore: f64,
}

/// Point-mass load held in the hand, kg.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
pub struct LoadMass(pub f64);

impl LoadMass {
    pub fn new(m: f64) -> Result<Self> {
        if m.is_finite() && m >= 0.0 {
            Ok(LoadMass(m))
        } else {
            Err(Error::InvalidParameter(format!("load mass must be >= 0, got {m}")))
        }
    }

    pub fn kg(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointState {
    pub q: Vector2<f64>,
    pub qd: Vector2<f64>,
    pub qdd: Vector2<f64>,
}

impl JointState {
    pub fn new(q: [f64; 2], qd: [f64; 2], qdd: [f64; 2]) -> Self {
        JointState {
            q: Vector2::from(q),
            qd: Vector2::from(qd),
            qdd: Vector2::from(qdd),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).chain(self.qdd.iter()).all(|v| v.is_finite())
    }
}

/// Joint torques (shoulder, elbow), N·m.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TorqueVector(pub Vector2<f64>);

impl TorqueVector {
    pub fn new(shoulder: f64, elbow: f64) -> Self {
        TorqueVector(Vector2::new(shoulder, elbow))
    }

    pub fn shoulder(&self) -> f64 {
        self.0[0]
    }

    pub fn elbow(&self) -> f64 {
        self.0[1]
    }
}

/// Partial derivatives of the inverse-dynamics torque. Entry `(i, j)` of each
/// matrix is `d tau_i / d x_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsJacobians {
    pub d_q: Matrix2<f64>,
    pub d_qd: Matrix2<f64>,
    pub d_qdd: Matrix2<f64>,
    pub d_m: Vector2<f64>,
}

pub fn build_arm_model(anthro: &AnthroConfig) -> Result<ArmModel> {
    anthro.validate()?;
    let l1 = anthro.upper_arm_length_fraction * anthro.body_height;
    let l2 = anthro.forearm_hand_length_fraction * anthro.body_height;
    let m1 = anthro.upper_arm_mass_fraction * anthro.body_mass;
    let m2 = anthro.forearm_hand_mass_fraction * anthro.body_mass;
    let k1 = anthro.radius_of_gyration_fraction_upper * l1;
    let k2 = anthro.radius_of_gyration_fraction_forearm * l2;
    let model = ArmModel {
        l1,
        l2,
        m1,
        m2,
        lc1: anthro.com_fraction_upper * l1,
        lc2: anthro.com_fraction_forearm * l2,
        i1: m1 * k1 * k1,
        i2: m2 * k2 * k2,
        g: GRAVITY,
    };
    model.validate()?;
    Ok(model)
}

pub fn inertia_matrix(model: &ArmModel, q: &Vector2<f64>, m: LoadMass) -> Matrix2<f64> {
    let k = model.lumped(m.0);
    let c2 = q[1].cos();
    let off = k.d + k.b * c2;
    Matrix2::new(k.a + k.d + 2.0 * k.b * c2, off, off, k.d)
}

pub fn coriolis_vector(
    model: &ArmModel,
    q: &Vector2<f64>,
    qd: &Vector2<f64>,
    m: LoadMass,
) -> Vector2<f64> {
    let k = model.lumped(m.0);
    let bs = k.b * q[1].sin();
    Vector2::new(
        -bs * (2.0 * qd[0] * qd[1] + qd[1] * qd[1]),
        bs * qd[0] * qd[0],
    )
}

pub fn gravity_vector(model: &ArmModel, q: &Vector2<f64>, m: LoadMass) -> Vector2<f64> {
    let k = model.lumped(m.0);
    let s12 = (q[0] + q[1]).sin();
    Vector2::new(k.g_upper * q[0].sin() + k.g_fore * s12, k.g_fore * s12)
}

pub fn inverse_dynamics(model: &ArmModel, state: &JointState, m: LoadMass) -> TorqueVector {
    let tau = inertia_matrix(model, &state.q, m) * state.qdd
        + coriolis_vector(model, &state.q, &state.qd, m)
        + gravity_vector(model, &state.q, m);
    TorqueVector(tau)
}

/// Solves `M qdd = tau - C - G` for the joint accelerations.
pub fn forward_dynamics(
    model: &ArmModel,
    q: &Vector2<f64>,
    qd: &Vector2<f64>,
    tau: &TorqueVector,
    m: LoadMass,
) -> Result<Vector2<f64>> {
    let mass = inertia_matrix(model, q, m);
    let cond = condition_number(&mass);
    if !(cond.is_finite() && cond <= MAX_INERTIA_CONDITION) {
        return Err(Error::SingularInertia { cond });
    }
    let rhs = tau.0 - coriolis_vector(model, q, qd, m) - gravity_vector(model, q, m);
    let det = mass[(0, 0)] * mass[(1, 1)] - mass[(0, 1)] * mass[(1, 0)];
    Ok(Vector2::new(
        (mass[(1, 1)] * rhs[0] - mass[(0, 1)] * rhs[1]) / det,
        (mass[(0, 0)] * rhs[1] - mass[(1, 0)] * rhs[0]) / det,
    ))
}

/// Ratio of the extreme eigenvalues of a symmetric 2×2 matrix; infinite when
/// the matrix is not positive definite.
fn condition_number(mat: &Matrix2<f64>) -> f64 {
    let half_trace = 0.5 * (mat[(0, 0)] + mat[(1, 1)]);
    let half_diff = 0.5 * (mat[(0, 0)] - mat[(1, 1)]);
    let radius = (half_diff * half_diff + mat[(0, 1)] * mat[(1, 0)]).sqrt();
    let (lo, hi) = (half_trace - radius, half_trace + radius);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn dynamics_jacobians(model: &ArmModel, state: &JointState, m: LoadMass) -> DynamicsJacobians {
    let k = model.lumped(m.0);
    let kdm = model.lumped_dm();
    let (q, qd, qdd) = (&state.q, &state.qd, &state.qdd);
    let (s1, c1) = q[0].sin_cos();
    let (s2, c2) = q[1].sin_cos();
    let c12 = (q[0] + q[1]).cos();
    let s12 = (q[0] + q[1]).sin();
    let vel_sq = 2.0 * qd[0] * qd[1] + qd[1] * qd[1];

    let d_q = Matrix2::new(
        k.g_upper * c1 + k.g_fore * c12,
        -k.b * s2 * (2.0 * qdd[0] + qdd[1]) - k.b * c2 * vel_sq + k.g_fore * c12,
        k.g_fore * c12,
        -k.b * s2 * qdd[0] + k.b * c2 * qd[0] * qd[0] + k.g_fore * c12,
    );
    let d_qd = Matrix2::new(
        -2.0 * k.b * s2 * qd[1],
        -2.0 * k.b * s2 * (qd[0] + qd[1]),
        2.0 * k.b * s2 * qd[0],
        0.0,
    );
    let d_qdd = inertia_matrix(model, q, m);
    let d_m = Vector2::new(
        (kdm.a + kdm.d + 2.0 * kdm.b * c2) * qdd[0] + (kdm.d + kdm.b * c2) * qdd[1]
            - kdm.b * s2 * vel_sq
            + kdm.g_upper * s1
            + kdm.g_fore * s12,
        (kdm.d + kdm.b * c2) * qdd[0] + kdm.d * qdd[1] + kdm.b * s2 * qd[0] * qd[0]
            + kdm.g_fore * s12,
    );
    DynamicsJacobians {
        d_q,
        d_qd,
        d_qdd,
        d_m,
    }
}

pub fn kinetic_energy(model: &ArmModel, q: &Vector2<f64>, qd: &Vector2<f64>, m: LoadMass) -> f64 {
    0.5 * qd.dot(&(inertia_matrix(model, q, m) * qd))
}

/// Gravitational potential energy with the shoulder joint as the reference height.
pub fn potential_energy(model: &ArmModel, q: &Vector2<f64>, m: LoadMass) -> f64 {
    let k = model.lumped(m.0);
    -(k.g_upper * q[0].cos() + k.g_fore * (q[0] + q[1]).cos())
}
