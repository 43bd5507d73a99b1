//! Reduced rigid-body process model, leg odometry and the network feature vector.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::spatial::{Rotation, Vec3, Vec6};

pub const NUM_LEGS: usize = 4;
/// Length of the model-error network input.
pub const FEATURE_DIM: usize = 37;

/// Mass properties of the trunk and the estimator time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidBodyParams {
    /// kg
    pub mass: f64,
    /// Body-frame inertia tensor, kg m^2.
    pub inertia: Matrix3<f64>,
    /// m/s^2, world frame.
    pub gravity: Vec3,
    /// s
    pub dt: f64,
}

impl Default for RigidBodyParams {
    /// Roughly a Go2-class trunk with an arm on top.
    fn default() -> Self {
        Self {
            mass: 17.0,
            inertia: Matrix3::from_diagonal(&Vec3::new(0.12, 0.35, 0.40)),
            gravity: Vec3::new(0.0, 0.0, -9.81),
            dt: 0.002,
        }
    }
}

impl RigidBodyParams {
    pub fn is_valid(&self) -> bool {
        let sym = (self.inertia - self.inertia.transpose()).abs().max() < 1e-12;
        let pd = self.inertia.cholesky().is_some();
        self.mass > 0.0 && sym && pd && self.dt > 0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FootMeasurement {
    pub contact: bool,
    /// Foot position relative to the trunk center of mass, body frame, m.
    pub position: Vec3,
    /// Time derivative of `position`, body frame, m/s.
    pub velocity: Vec3,
    /// Ground reaction force, world frame, N.
    pub grf: Vec3,
}

/// One estimator-rate sample of proprioception.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegMeasurement {
    pub feet: [FootMeasurement; NUM_LEGS],
    /// Gyroscope rate, body frame, rad/s.
    pub gyro: Vec3,
    /// Body-to-world rotation.
    pub base_rotation: Rotation,
}

impl LegMeasurement {
    /// Zeroes the ground reaction force of every swing foot.
    pub fn new(mut feet: [FootMeasurement; NUM_LEGS], gyro: Vec3, base_rotation: Rotation) -> Self {
        for f in feet.iter_mut().filter(|f| !f.contact) {
            f.grf = Vec3::zeros();
        }
        Self { feet, gyro, base_rotation }
    }

    pub fn contact_count(&self) -> usize {
        self.feet.iter().filter(|f| f.contact).count()
    }

    /// Gyro rate rotated into the world frame.
    pub fn world_angular_velocity(&self) -> Vec3 {
        self.base_rotation.matrix() * self.gyro
    }
}

/// One step of the reduced trunk model on `x = [omega; v]` (world frame).
///
/// Torques use foot positions relative to the center of mass, rotated to the
/// world frame, and the world-frame inertia `R I R^T`.
pub fn reduced_dynamics(x: &Vec6, legs: &LegMeasurement, params: &RigidBodyParams) -> Vec6 {
    Vec6::from_iterator(model_increment(legs, params).iter().zip(x.iter()).map(|(d, v)| d + v))
}

/// `Dyn(x) - x`: the model is affine in the state, so the increment depends on
/// the measured inputs only.
pub fn model_increment(legs: &LegMeasurement, params: &RigidBodyParams) -> Vec6 {
    let r = legs.base_rotation.matrix();
    let mut torque = Vec3::zeros();
    let mut force = Vec3::zeros();
    for foot in legs.feet.iter().filter(|f| f.contact) {
        torque += (r * foot.position).cross(&foot.grf);
        force += foot.grf;
    }
    let inertia_world = r * params.inertia * r.transpose();
    let alpha = inertia_world
        .cholesky()
        .map(|c| c.solve(&torque))
        .unwrap_or_else(Vec3::zeros);
    let accel = force / params.mass + params.gravity;
    let dw = alpha * params.dt;
    let dv = accel * params.dt;
    Vec6::new(dw.x, dw.y, dw.z, dv.x, dv.y, dv.z)
}

/// Trunk velocity from stance-foot kinematics, assuming stance feet do not slip:
/// `v = -(1/n_c) sum_c R (p_dot + w x p)`. `None` when no foot is in contact.
pub fn leg_odometry(legs: &LegMeasurement) -> Option<Vec3> {
    let n = legs.contact_count();
    if n == 0 {
        return None;
    }
    let r = legs.base_rotation.matrix();
    let sum: Vec3 = legs
        .feet
        .iter()
        .filter(|f| f.contact)
        .map(|f| r * (f.velocity + legs.gyro.cross(&f.position)))
        .sum();
    Some(-sum / n as f64)
}

/// `[prior (6), contacts (4), GRFs (12), gyro (3), foot positions (12)]`.
pub fn features(prior: &Vec6, legs: &LegMeasurement) -> [f64; FEATURE_DIM] {
    let mut out = [0.0; FEATURE_DIM];
    out[..6].copy_from_slice(prior.as_slice());
    for (i, f) in legs.feet.iter().enumerate() {
        out[6 + i] = if f.contact { 1.0 } else { 0.0 };
        out[10 + 3 * i..13 + 3 * i].copy_from_slice(f.grf.as_slice());
        out[25 + 3 * i..28 + 3 * i].copy_from_slice(f.position.as_slice());
    }
    out[22..25].copy_from_slice(legs.gyro.as_slice());
    out
}

pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = ["wx", "wy", "wz", "vx", "vy", "vz"]
        .iter()
        .map(|s| format!("prior_{s}"))
        .collect();
    names.extend((0..NUM_LEGS).map(|i| format!("contact_{i}")));
    for i in 0..NUM_LEGS {
        names.extend(["x", "y", "z"].iter().map(|a| format!("grf_{i}_{a}")));
    }
    names.extend(["x", "y", "z"].iter().map(|a| format!("gyro_{a}")));
    for i in 0..NUM_LEGS {
        names.extend(["x", "y", "z"].iter().map(|a| format!("foot_{i}_{a}")));
    }
    names
}
