//! Kinematic trot generator producing foot states and force-consistent ground
//! reaction forces for the trunk motion it is given.

use nalgebra::{Matrix3, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::estimator::{FootMeasurement, LegMeasurement, RigidBodyParams, NUM_LEGS};
use crate::spatial::{skew, Rotation, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitSynthParams {
    /// s
    pub period: f64,
    /// Stance fraction of the cycle; above 0.5 keeps two feet down in a trot.
    pub duty: f64,
    /// Swing apex, m.
    pub step_height: f64,
    /// Hip positions relative to the trunk CoM, body frame, FL FR RL RR.
    pub hips: [[f64; 3]; NUM_LEGS],
    /// Lateral offset from hip to the leg plane, m (left positive).
    pub abduction_offset: f64,
    pub thigh: f64,
    pub calf: f64,
    /// CoM height above flat ground, m.
    pub stance_height: f64,
    /// Weight of the force rows against the moment rows in the GRF solve.
    pub force_weight: f64,
}

impl Default for GaitSynthParams {
    fn default() -> Self {
        Self {
            period: 0.5,
            duty: 0.6,
            step_height: 0.08,
            hips: [[0.19, 0.05, 0.0], [0.19, -0.05, 0.0], [-0.19, 0.05, 0.0], [-0.19, -0.05, 0.0]],
            abduction_offset: 0.08,
            thigh: 0.213,
            calf: 0.213,
            stance_height: 0.28,
            force_weight: 100.0,
        }
    }
}

impl GaitSynthParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.duty > 0.0 && self.duty <= 1.0) {
            return Err(format!("gait duty factor {} outside (0, 1]", self.duty));
        }
        if !(self.period > 0.0) || !(self.step_height >= 0.0) || !(self.stance_height > 0.0) {
            return Err("gait period, step height and stance height must be positive".into());
        }
        Ok(())
    }

    fn side(leg: usize) -> f64 {
        if leg % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    fn phase_offset(leg: usize) -> f64 {
        // diagonal pairs FL+RR and FR+RL
        match leg {
            0 | 3 => 0.0,
            _ => 0.5,
        }
    }

    /// Nominal stance foot position relative to the CoM, body frame.
    pub fn nominal_foot(&self, leg: usize) -> Vec3 {
        let h = self.hips[leg];
        Vec3::new(h[0], h[1] + Self::side(leg) * self.abduction_offset, -self.stance_height)
    }

    /// Foot position relative to the hip for joint angles `[abduction, hip, knee]`.
    pub fn leg_fk(&self, leg: usize, q: &[f64; 3]) -> Vec3 {
        let rx = Rotation::from_rpy(q[0], 0.0, 0.0);
        let r1 = Rotation::from_rpy(0.0, q[1], 0.0);
        let r2 = Rotation::from_rpy(0.0, q[1] + q[2], 0.0);
        let lateral = Vec3::new(0.0, Self::side(leg) * self.abduction_offset, 0.0);
        rx * (lateral + r1 * Vec3::new(0.0, 0.0, -self.thigh) + r2 * Vec3::new(0.0, 0.0, -self.calf))
    }

    pub fn leg_jacobian(&self, leg: usize, q: &[f64; 3]) -> Matrix3<f64> {
        let h = 1e-6;
        let mut j = Matrix3::zeros();
        for c in 0..3 {
            let mut a = *q;
            let mut b = *q;
            a[c] += h;
            b[c] -= h;
            j.set_column(c, &((self.leg_fk(leg, &a) - self.leg_fk(leg, &b)) / (2.0 * h)));
        }
        j
    }

    /// Damped Newton inverse kinematics from a warm start.
    pub fn leg_ik(&self, leg: usize, target_rel_hip: &Vec3, warm: &[f64; 3]) -> [f64; 3] {
        let mut q = *warm;
        for _ in 0..20 {
            let e = target_rel_hip - self.leg_fk(leg, &q);
            if e.norm() < 1e-10 {
                break;
            }
            let j = self.leg_jacobian(leg, &q);
            let jt = j.transpose();
            let step = (jt * j + Matrix3::identity() * 1e-6).lu().solve(&(jt * e)).unwrap_or_else(Vec3::zeros);
            for i in 0..3 {
                q[i] += step[i];
            }
        }
        q
    }

    pub fn default_joint_angles(&self) -> [f64; 12] {
        let warm = [0.0, 0.7, -1.4];
        let mut out = [0.0; 12];
        for leg in 0..NUM_LEGS {
            let target = self.nominal_foot(leg) - Vec3::from(self.hips[leg]);
            let q = self.leg_ik(leg, &target, &warm);
            out[3 * leg..3 * leg + 3].copy_from_slice(&q);
        }
        out
    }
}

/// Trunk motion over one physics step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrunkState {
    pub position: Vec3,
    pub rotation: Rotation,
    pub linear: Vec3,
    pub angular: Vec3,
    /// World-frame accelerations over the step, used for the force balance.
    pub linear_accel: Vec3,
    pub angular_accel: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Foot {
    stance: bool,
    world: Vec3,
    world_velocity: Vec3,
    liftoff: Vec3,
    target: Vec3,
    swing_start: f64,
    peak: f64,
    first_contact: bool,
    air_time: f64,
    last_peak: f64,
}

/// Per-foot state exposed for rewards and logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FootSample {
    pub contact: bool,
    pub world: Vec3,
    pub world_velocity: Vec3,
    pub first_contact: bool,
    pub air_time: f64,
    pub peak_height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaitSynth {
    pub params: GaitSynthParams,
    feet: [Foot; NUM_LEGS],
}

impl GaitSynth {
    pub fn new(params: GaitSynthParams, trunk_position: Vec3, rotation: &Rotation) -> Self {
        let feet = std::array::from_fn(|leg| {
            let mut w = trunk_position + rotation * &params.nominal_foot(leg);
            w.z = 0.0;
            Foot {
                stance: true,
                world: w,
                world_velocity: Vec3::zeros(),
                liftoff: w,
                target: w,
                swing_start: 0.0,
                peak: 0.0,
                first_contact: false,
                air_time: 0.0,
                last_peak: 0.0,
            }
        });
        Self { params, feet }
    }

    fn in_stance(&self, leg: usize, t: f64) -> bool {
        let phase = (t / self.params.period + GaitSynthParams::phase_offset(leg)).rem_euclid(1.0);
        phase < self.params.duty
    }

    fn swing_duration(&self) -> f64 {
        (1.0 - self.params.duty) * self.params.period
    }

    /// Advances foot states to time `t` given the trunk at `t`.
    pub fn advance(&mut self, t: f64, dt: f64, trunk: &TrunkState) {
        let swing_t = self.swing_duration();
        let stance_t = self.params.duty * self.params.period;
        for leg in 0..NUM_LEGS {
            let stance = self.in_stance(leg, t) || swing_t <= 0.0;
            let hip_world = trunk.position + trunk.rotation * self.params.nominal_foot(leg);
            let prev = self.feet[leg].world;
            let f = &mut self.feet[leg];
            f.first_contact = false;
            if f.stance && !stance {
                f.stance = false;
                f.liftoff = f.world;
                f.swing_start = t;
                f.peak = 0.0;
                let mut target = hip_world + trunk.linear * (swing_t + 0.5 * stance_t);
                target.z = 0.0;
                f.target = target;
            } else if !f.stance && stance {
                f.stance = true;
                f.first_contact = true;
                f.air_time = t - f.swing_start;
                f.last_peak = f.peak;
                f.world = f.target;
            }
            if !f.stance {
                let s = ((t - f.swing_start) / swing_t).clamp(0.0, 1.0);
                let tau = std::f64::consts::TAU;
                let horiz = s - (tau * s).sin() / tau;
                let mut w = f.liftoff + (f.target - f.liftoff) * horiz;
                w.z = self.params.step_height * 0.5 * (1.0 - (tau * s).cos());
                f.world = w;
                f.peak = f.peak.max(w.z);
                f.world_velocity = (w - prev) / dt;
            } else {
                f.world_velocity = Vec3::zeros();
            }
        }
    }

    pub fn samples(&self) -> [FootSample; NUM_LEGS] {
        self.feet.map(|f| FootSample {
            contact: f.stance,
            world: f.world,
            world_velocity: f.world_velocity,
            first_contact: f.first_contact,
            air_time: f.air_time,
            peak_height: f.last_peak,
        })
    }

    pub fn contacts(&self) -> [bool; NUM_LEGS] {
        self.feet.map(|f| f.stance)
    }

    /// Stance forces realizing `m (a - g)` exactly and the rate of angular
    /// momentum `I_w alpha` in the least-squares sense.
    pub fn ground_reaction_forces(&self, trunk: &TrunkState, body: &RigidBodyParams) -> [Vec3; NUM_LEGS] {
        let stance: Vec<usize> = (0..NUM_LEGS).filter(|&i| self.feet[i].stance).collect();
        let mut out = [Vec3::zeros(); NUM_LEGS];
        if stance.is_empty() {
            return out;
        }
        let force = (trunk.linear_accel - body.gravity) * body.mass;
        let r = trunk.rotation.matrix();
        let inertia_w = r * body.inertia * r.transpose();
        let moment = inertia_w * trunk.angular_accel + trunk.angular.cross(&(inertia_w * trunk.angular));
        let w = self.params.force_weight;
        let b = Vector6::new(w * force.x, w * force.y, w * force.z, moment.x, moment.y, moment.z);
        // A = [w I ... ; [p_i]x ...], solved as A^T (A A^T)^+ b
        let blocks: Vec<(Matrix3<f64>, Matrix3<f64>)> = stance
            .iter()
            .map(|&i| (Matrix3::identity() * w, skew(&(self.feet[i].world - trunk.position))))
            .collect();
        let mut aat = Matrix6::zeros();
        for (top, bot) in &blocks {
            let mut a = Matrix6::zeros();
            a.fixed_view_mut::<3, 3>(0, 0).copy_from(top);
            a.fixed_view_mut::<3, 3>(3, 0).copy_from(bot);
            aat += a.fixed_columns::<3>(0) * a.fixed_columns::<3>(0).transpose();
        }
        // pseudo-inverse: two feet leave the moment about their diagonal unconstrained
        let tol = 1e-12 * aat.trace();
        let y = aat.svd(true, true).solve(&b, tol).unwrap_or_else(|_| Vector6::zeros());
        for (k, &i) in stance.iter().enumerate() {
            let (top, bot) = &blocks[k];
            out[i] = top.transpose() * y.fixed_rows::<3>(0) + bot.transpose() * y.fixed_rows::<3>(3);
        }
        out
    }

    /// Proprioceptive sample in the trunk frame with world forces.
    pub fn measurement(&self, trunk: &TrunkState, grf: &[Vec3; NUM_LEGS]) -> LegMeasurement {
        let rt = trunk.rotation.transpose();
        let w_body = rt * trunk.angular;
        let feet = std::array::from_fn(|i| {
            let f = &self.feet[i];
            let p = rt * (f.world - trunk.position);
            let v = rt * (f.world_velocity - trunk.linear) - w_body.cross(&p);
            FootMeasurement { contact: f.stance, position: p, velocity: v, grf: grf[i] }
        });
        LegMeasurement::new(feet, w_body, trunk.rotation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::leg_odometry;

    fn trunk(v: Vec3) -> TrunkState {
        TrunkState {
            position: Vec3::new(0.0, 0.0, 0.28),
            rotation: Rotation::identity(),
            linear: v,
            angular: Vec3::zeros(),
            linear_accel: Vec3::zeros(),
            angular_accel: Vec3::zeros(),
        }
    }

    #[test]
    fn stationary_weight_support() {
        let body = RigidBodyParams::default();
        let mut g = GaitSynth::new(GaitSynthParams::default(), Vec3::new(0.0, 0.0, 0.28), &Rotation::identity());
        let tr = trunk(Vec3::zeros());
        for k in 0..1000 {
            g.advance(k as f64 * 0.001, 0.001, &tr);
            let f = g.ground_reaction_forces(&tr, &body);
            let total: Vec3 = f.iter().sum();
            assert!((total - Vec3::new(0.0, 0.0, body.mass * 9.81)).norm() <= 0.02 * body.mass * 9.81);
            assert!(g.contacts().iter().filter(|c| **c).count() >= 2);
        }
    }

    #[test]
    fn stance_feet_do_not_slip_and_odometry_recovers() {
        let mut g = GaitSynth::new(GaitSynthParams::default(), Vec3::new(0.0, 0.0, 0.28), &Rotation::identity());
        let v = Vec3::new(0.4, 0.1, 0.0);
        let dt = 0.001;
        let mut tr = trunk(v);
        let mut se = 0.0;
        let n = 3000;
        for k in 0..n {
            let t = k as f64 * dt;
            tr.position = Vec3::new(0.0, 0.0, 0.28) + v * t;
            g.advance(t, dt, &tr);
            for s in g.samples().iter().filter(|s| s.contact) {
                assert!(s.world_velocity.norm() < 1e-3);
            }
            let legs = g.measurement(&tr, &[Vec3::zeros(); 4]);
            se += (leg_odometry(&legs).unwrap() - v).norm_squared() / 3.0;
        }
        assert!((se / n as f64).sqrt() < 0.02);
    }

    #[test]
    fn accelerating_trunk_forces_balance() {
        let body = RigidBodyParams::default();
        let g = GaitSynth::new(GaitSynthParams::default(), Vec3::new(0.0, 0.0, 0.28), &Rotation::identity());
        let mut tr = trunk(Vec3::zeros());
        tr.linear_accel = Vec3::new(1.0, -0.5, 0.0);
        tr.angular_accel = Vec3::new(0.0, 0.0, 2.0);
        let f = g.ground_reaction_forces(&tr, &body);
        let total: Vec3 = f.iter().sum();
        let want = (tr.linear_accel - body.gravity) * body.mass;
        assert!((total - want).norm() <= 0.02 * want.norm());
        let m: Vec3 = (0..4).map(|i| (g.samples()[i].world - tr.position).cross(&f[i])).sum();
        assert!((m - body.inertia * tr.angular_accel).norm() < 1e-3, "{m} {}", body.inertia * tr.angular_accel);
    }

    #[test]
    fn leg_ik_inverts_fk() {
        let p = GaitSynthParams::default();
        let q = p.default_joint_angles();
        for leg in 0..4 {
            let qq = [q[3 * leg], q[3 * leg + 1], q[3 * leg + 2]];
            let foot = p.leg_fk(leg, &qq) + Vec3::from(p.hips[leg]);
            assert!((foot - p.nominal_foot(leg)).norm() < 1e-9);
        }
    }
}
