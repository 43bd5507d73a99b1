//! Fixed-step closed loop: wrench sensing, reference governor, admittance,
//! whole-body split, base tracking, gait synthesis and estimation.

use std::sync::Arc;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admittance::{compute_desired_twist, gravity_wrench, integrate_pose, AdmittanceCommand, AdmittanceError};
use crate::estimator::dataset::EstimationRow;
use crate::estimator::filter::measurement;
use crate::estimator::{
    estimator_registry, features, model_increment, EstimatorConfig, LegMeasurement, ModelErrorNet, NetError, NoiseSampler,
    RigidBodyParams, VelocityEstimator, NUM_LEGS,
};
use crate::governor::query::QueryError;
use crate::governor::{query_governor, Axis, AxisConstraints, GovernorQuery, MoasBundle, MoasError, Verdict};
use crate::kinematics::{
    end_effector_pose, end_effector_twist, whole_body_joint_velocities, ArmModel, JointState, KinematicsError,
    WholeBodyState,
};
use crate::spatial::{wrap_angle, Frame, FramedRotation, Pose, Rotation, Twist, Vec3, Vec6, Wrench};

use super::gait::{GaitSynth, TrunkState};
use super::rewards::{FootState, RewardContext, RewardSuite};
use super::scenario::{ProfileFrame, Scenario, ScenarioError};
use super::tracker::{base_tracker_step, PLANAR};

pub const VIOLATION_POSITION: u8 = 1;
pub const VIOLATION_VELOCITY: u8 = 2;
pub const VIOLATION_WRENCH: u8 = 4;
pub const VIOLATION_KINEMATIC: u8 = 8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Admittance(#[from] AdmittanceError),
    #[error("estimator: {0}")]
    Estimator(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Moas(#[from] MoasError),
    #[error("governor on axis {axis}: {source}")]
    Governor { axis: Axis, source: QueryError },
    #[error("no admissible set for governed axis {0}")]
    MissingMoas(Axis),
    #[error("admissible set for axis {0} was built for different controller gains")]
    MoasMismatch(Axis),
    #[error("no governed axes configured")]
    NoGovernedAxes,
    #[error("non-finite {quantity} at physics step {step}")]
    NonFinite { step: u64, quantity: &'static str },
}

/// One row per controller tick. Twists are world-frame `[v; w]`; the
/// achieved twist is the mean over the control period that follows `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub cmd: [f64; 6],
    pub achieved: [f64; 6],
    /// End-effector `[x, y, z, yaw]`.
    pub ee: [f64; 4],
    /// Trunk `[x, y, z, yaw]`.
    pub base: [f64; 4],
    pub base_twist: [f64; 6],
    pub base_estimate: [f64; 6],
    /// Estimator covariance diagonal in `[w; v]` order.
    pub p_diag: [f64; 6],
    pub p_min_eig: f64,
    /// Sensor frame.
    pub sensed: [f64; 6],
    /// Gravity-compensated world wrench.
    pub net_wrench: [f64; 6],
    /// Per governor axis `[x, y, z, yaw]`.
    pub ref_raw: [f64; 4],
    pub ref_wrench_raw: [f64; 4],
    pub ref_gov: [f64; 4],
    pub ref_wrench_gov: [f64; 4],
    /// -1 ungoverned, 0 admissible, 1 governed, 2 infeasible.
    pub verdict: [i8; 4],
    /// Bitmask of `VIOLATION_*` flags per axis.
    pub violations: [u8; 4],
    pub rewards: [f64; 14],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: usize,
    /// m^2/s^2 per world axis.
    pub linear_mse: [f64; 3],
    /// rad^2/s^2 per world axis.
    pub angular_mse: [f64; 3],
    /// Ticks with a violation, per axis `[x, y, z, yaw]` and kind
    /// `[position, velocity, wrench, kinematic]`.
    pub violations: [[u64; 4]; 4],
    /// Ticks with any violation.
    pub violating_ticks: u64,
    pub governed_ticks: u64,
    pub infeasible_ticks: u64,
    pub reward_means: [f64; 14],
}

impl RunMetrics {
    pub fn from_records(rows: &[StepRecord]) -> Self {
        let n = rows.len();
        let mut lin = [0.0; 3];
        let mut ang = [0.0; 3];
        let mut violations = [[0u64; 4]; 4];
        let mut rewards = [0.0; 14];
        let (mut violating, mut governed, mut infeasible) = (0, 0, 0);
        for r in rows {
            for i in 0..3 {
                lin[i] += (r.cmd[i] - r.achieved[i]).powi(2);
                ang[i] += (r.cmd[3 + i] - r.achieved[3 + i]).powi(2);
            }
            for (a, &mask) in r.violations.iter().enumerate() {
                for (k, bit) in [VIOLATION_POSITION, VIOLATION_VELOCITY, VIOLATION_WRENCH, VIOLATION_KINEMATIC]
                    .iter()
                    .enumerate()
                {
                    if mask & bit != 0 {
                        violations[a][k] += 1;
                    }
                }
            }
            if r.violations.iter().any(|m| *m != 0) {
                violating += 1;
            }
            if r.verdict.contains(&1) {
                governed += 1;
            }
            if r.verdict.contains(&2) {
                infeasible += 1;
            }
            for (acc, v) in rewards.iter_mut().zip(&r.rewards) {
                *acc += v;
            }
        }
        let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
        Self {
            rows: n,
            linear_mse: lin.map(mean),
            angular_mse: ang.map(mean),
            violations,
            violating_ticks: violating,
            governed_ticks: governed,
            infeasible_ticks: infeasible,
            reward_means: rewards.map(mean),
        }
    }

    pub fn total_violations(&self) -> u64 {
        self.violations.iter().flatten().sum()
    }

    pub fn max_linear_mse(&self) -> f64 {
        self.linear_mse.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_angular_mse(&self) -> f64 {
        self.angular_mse.iter().cloned().fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        let names = ["x", "y", "z", "yaw"];
        let mut s = format!(
            "rows {}\nlinear MSE [m^2/s^2]  x {:.3e}  y {:.3e}  z {:.3e}\nangular MSE [rad^2/s^2] x {:.3e}  y {:.3e}  z {:.3e}\n",
            self.rows,
            self.linear_mse[0],
            self.linear_mse[1],
            self.linear_mse[2],
            self.angular_mse[0],
            self.angular_mse[1],
            self.angular_mse[2]
        );
        s += &format!(
            "violating ticks {}  governed ticks {}  infeasible ticks {}\n",
            self.violating_ticks, self.governed_ticks, self.infeasible_ticks
        );
        for (a, v) in self.violations.iter().enumerate() {
            if v.iter().any(|c| *c > 0) {
                s += &format!(
                    "  {:>3}: position {} velocity {} wrench {} kinematic {}\n",
                    names[a], v[0], v[1], v[2], v[3]
                );
            }
        }
        s
    }
}

/// Externally provided assets the loop may need.
#[derive(Clone, Default)]
pub struct SimResources {
    pub net: Option<Arc<ModelErrorNet>>,
    pub moas: Option<Arc<MoasBundle>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PendingEvents {
    air_time: f64,
    peak: f64,
}

pub struct Simulation {
    scenario: Scenario,
    resources: SimResources,
    arm_model: ArmModel,
    ctrl_every: usize,
    est_every: usize,
    policy_every: usize,
    dt: f64,
    body: RigidBodyParams,
    rewards: RewardSuite,
    q_default: [f64; 12],

    step: u64,
    rng: ChaCha8Rng,
    base_pose: Pose,
    planar: [f64; PLANAR],
    arm: JointState,
    gait: GaitSynth,
    estimator: Box<dyn VelocityEstimator>,
    /// Latest filtered estimate, world `[v; w]`.
    estimate: Vec6,
    perturbation: [f64; PLANAR],
    split_lp: [f64; PLANAR],
    base_cmd: [f64; PLANAR],
    nominal_offset: Vec3,
    nominal_yaw: f64,
    command: Option<AdmittanceCommand>,
    last_grf: [Vec3; NUM_LEGS],
    grf_sum: [Vec3; NUM_LEGS],
    grf_count: usize,
    last_truth: Vec6,
    events: [Option<PendingEvents>; NUM_LEGS],
    q_leg: [f64; 12],
    alpha: [f64; 12],
    last_achieved: Vec6,

    reference_pose: Pose,
    reference_wrench: Vec6,
    override_wrench: Vec6,
    governor_on: bool,

    recording: bool,
    estimation_rows: Vec<EstimationRow>,
    log: Vec<StepRecord>,
}

fn twist_of(planar: &[f64; PLANAR]) -> Vec6 {
    Vec6::new(planar[0], planar[1], 0.0, 0.0, 0.0, planar[2])
}

/// `[v; w]` to the estimator's `[w; v]`.
fn to_estimator(x: &Vec6) -> Vec6 {
    Vec6::new(x[3], x[4], x[5], x[0], x[1], x[2])
}

fn from_estimator(x: &Vec6) -> Vec6 {
    to_estimator(x)
}

fn twist(v: &Vec6) -> Twist {
    Twist::from_vector(v, Frame::World)
}

fn axis_value(pose: &Pose, axis: Axis) -> f64 {
    match axis {
        Axis::Yaw => pose.rotation.yaw(),
        a => pose.translation[a.component()],
    }
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn arr6(v: &Vec6) -> [f64; 6] {
    [v[0], v[1], v[2], v[3], v[4], v[5]]
}

fn constrained(c: &AxisConstraints) -> bool {
    let unbounded = AxisConstraints::unbounded();
    c != &unbounded
}

impl Simulation {
    pub fn new(scenario: Scenario, resources: SimResources) -> Result<Self, SimError> {
        scenario.validate()?;
        let (ctrl_every, est_every, policy_every) = scenario.rates.decimation().map_err(ScenarioError::Invalid)?;
        let dt = 1.0 / scenario.rates.physics;
        let mut body = scenario.estimator.body;
        body.dt = est_every as f64 * dt;

        for axis in scenario.governor.governed_axes() {
            let set = resources.moas.as_ref().and_then(|b| b.get(axis)).ok_or(SimError::MissingMoas(axis))?;
            if set.dynamics != scenario.axis_dynamics(axis) {
                return Err(SimError::MoasMismatch(axis));
            }
        }
        if scenario.governor.enabled && scenario.governor.governed_axes().is_empty() {
            return Err(SimError::NoGovernedAxes);
        }

        let cfg = EstimatorConfig {
            params: body,
            noise: scenario.estimator.noise.clone(),
            alpha_lp: scenario.estimator.alpha_lp,
            initial_covariance: scenario.estimator.initial_covariance,
            net: resources.net.clone(),
        };
        let mut estimator =
            estimator_registry().create(&scenario.estimator.mode, &cfg).map_err(|e| SimError::Estimator(e.to_string()))?;
        estimator.reset(&Vec6::zeros());

        let init = &scenario.initial;
        let base_pose = Pose::new(
            Rotation::from_rpy(0.0, 0.0, init.base_yaw),
            Vec3::new(init.base_xy[0], init.base_xy[1], scenario.gait.stance_height),
        );
        let arm_model = ArmModel::default_arm();
        let arm = JointState::at_rest(init.arm_q.clone());
        let wb = WholeBodyState::new(base_pose, Twist::zero(Frame::World), arm.clone());
        let ee = end_effector_pose(&wb, &arm_model)?;
        let nominal_offset = base_pose.rotation.transpose() * (ee.translation - base_pose.translation);
        let nominal_yaw = wrap_angle(ee.rotation.yaw() - init.base_yaw);
        let gait = GaitSynth::new(scenario.gait, base_pose.translation, &base_pose.rotation);
        let q_default = scenario.gait.default_joint_angles();
        let rewards = RewardSuite::new(scenario.rewards);
        let governor_on = scenario.governor.enabled;

        let mut sim = Self {
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            resources,
            arm_model,
            ctrl_every,
            est_every,
            policy_every,
            dt,
            body,
            rewards,
            q_default,
            step: 0,
            base_pose,
            planar: [0.0; PLANAR],
            arm,
            gait,
            estimator,
            estimate: Vec6::zeros(),
            perturbation: [0.0; PLANAR],
            split_lp: [0.0; PLANAR],
            base_cmd: [0.0; PLANAR],
            nominal_offset,
            nominal_yaw,
            command: None,
            last_grf: [Vec3::zeros(); NUM_LEGS],
            grf_sum: [Vec3::zeros(); NUM_LEGS],
            grf_count: 0,
            last_truth: Vec6::zeros(),
            events: [None; NUM_LEGS],
            q_leg: q_default,
            alpha: [0.0; 12],
            last_achieved: Vec6::zeros(),
            reference_pose: ee,
            reference_wrench: Vec6::zeros(),
            override_wrench: Vec6::zeros(),
            governor_on,
            recording: false,
            estimation_rows: Vec::new(),
            log: Vec::new(),
            scenario,
        };
        sim.last_grf = sim.gait.ground_reaction_forces(&sim.trunk(Vec6::zeros()), &sim.body);
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn last_record(&self) -> Option<&StepRecord> {
        self.log.last()
    }

    pub fn take_records(&mut self) -> Vec<StepRecord> {
        std::mem::take(&mut self.log)
    }

    pub fn estimator_name(&self) -> &'static str {
        self.estimator.name()
    }

    pub fn control_period(&self) -> f64 {
        self.ctrl_every as f64 * self.dt
    }

    /// Extra sensor-frame wrench added to the scripted profile until replaced.
    pub fn apply_wrench(&mut self, w: Vec6) {
        self.override_wrench = w;
    }

    pub fn override_wrench(&self) -> Vec6 {
        self.override_wrench
    }

    pub fn set_reference(&mut self, pose: Pose) {
        self.reference_pose = pose;
    }

    pub fn reference(&self) -> Pose {
        self.reference_pose
    }

    pub fn set_governor(&mut self, on: bool) -> Result<(), SimError> {
        if on && self.scenario.governor.governed_axes().is_empty() {
            return Err(SimError::NoGovernedAxes);
        }
        self.governor_on = on;
        Ok(())
    }

    pub fn governor_enabled(&self) -> bool {
        self.governor_on
    }

    /// Back to the scenario's initial state, including seeds and overrides.
    pub fn reset(&mut self) -> Result<(), SimError> {
        let fresh = Simulation::new(self.scenario.clone(), self.resources.clone())?;
        let recording = self.recording;
        *self = fresh;
        self.recording = recording;
        Ok(())
    }

    pub fn record_estimation(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn take_estimation_rows(&mut self) -> Vec<EstimationRow> {
        std::mem::take(&mut self.estimation_rows)
    }

    pub fn ee_pose(&self) -> Result<Pose, SimError> {
        let wb = WholeBodyState::new(self.base_pose, Twist::zero(Frame::World), self.arm.clone());
        Ok(end_effector_pose(&wb, &self.arm_model)?)
    }

    fn trunk(&self, accel: Vec6) -> TrunkState {
        let tw = twist_of(&self.planar);
        TrunkState {
            position: self.base_pose.translation,
            rotation: self.base_pose.rotation,
            linear: Vec3::new(tw[0], tw[1], tw[2]),
            angular: Vec3::new(tw[3], tw[4], tw[5]),
            linear_accel: Vec3::new(accel[0], accel[1], accel[2]),
            angular_accel: Vec3::new(accel[3], accel[4], accel[5]),
        }
    }

    fn sensed_wrench(&mut self, t: f64, ee: &Pose) -> Vec6 {
        let rt = ee.rotation.transpose();
        let raw = self.scenario.profile.eval(t);
        let mut w = match self.scenario.profile.frame {
            ProfileFrame::Sensor => raw,
            ProfileFrame::World => {
                let f = rt * raw.fixed_rows::<3>(0).into_owned();
                let m = rt * raw.fixed_rows::<3>(3).into_owned();
                Vec6::new(f.x, f.y, f.z, m.x, m.y, m.z)
            }
        };
        w += self.override_wrench;
        let g = gravity_wrench(&self.scenario.controller.admittance.gravity, &ee.rotation);
        let gf = rt * g.force;
        let gm = rt * g.torque;
        w += Vec6::new(gf.x, gf.y, gf.z, gm.x, gm.y, gm.z);
        let [nf, nm] = self.scenario.sensor.wrench_noise;
        if nf > 0.0 || nm > 0.0 {
            for i in 0..6 {
                let s = if i < 3 { nf } else { nm };
                w[i] += s * self.rng.sample::<f64, _>(StandardNormal);
            }
        }
        w
    }

    /// Governed copies of the reference pose and wrench plus per-axis verdicts.
    fn govern(&self, ee: &Pose, v_prev: &Vec6, net: &Vec6) -> Result<(Pose, Vec6, [i8; 4]), SimError> {
        let mut pose = self.reference_pose;
        let mut wrench = self.reference_wrench;
        let mut verdicts = [-1i8; 4];
        if !self.governor_on {
            return Ok((pose, wrench, verdicts));
        }
        let bundle = self.resources.moas.as_ref();
        for axis in self.scenario.governor.governed_axes() {
            let set = bundle.and_then(|b| b.get(axis)).ok_or(SimError::MissingMoas(axis))?;
            let c = axis.component();
            let x = axis_value(ee, axis);
            let x_ref = match axis {
                Axis::Yaw => x + wrap_angle(self.reference_pose.rotation.yaw() - x),
                _ => self.reference_pose.translation[c],
            };
            let q = GovernorQuery { x, x_ref, v: v_prev[c], wrench: net[c], wrench_ref: wrench[c] };
            let r = query_governor(set, &q).map_err(|source| SimError::Governor { axis, source })?;
            verdicts[axis as usize] = match r.verdict {
                Verdict::Admissible => 0,
                Verdict::Governed => 1,
                Verdict::Infeasible => 2,
            };
            match axis {
                Axis::Yaw => {
                    pose.rotation = Rotation::from_rpy(0.0, 0.0, r.x_ref - x_ref) * pose.rotation;
                }
                _ => pose.translation[c] = r.x_ref,
            }
            wrench[c] = r.wrench_ref;
        }
        Ok((pose, wrench, verdicts))
    }

    fn leg_state(&mut self) -> ([f64; 12], [f64; 12]) {
        let p = self.gait.params;
        let rt = self.base_pose.rotation.transpose();
        let samples = self.gait.samples();
        let mut q = [0.0; 12];
        let mut torque = [0.0; 12];
        for leg in 0..NUM_LEGS {
            let rel = rt * (samples[leg].world - self.base_pose.translation) - Vec3::from(p.hips[leg]);
            let warm = [self.q_leg[3 * leg], self.q_leg[3 * leg + 1], self.q_leg[3 * leg + 2]];
            let ql = p.leg_ik(leg, &rel, &warm);
            q[3 * leg..3 * leg + 3].copy_from_slice(&ql);
            if samples[leg].contact {
                // joint torques holding the ground reaction: u = -J^T f (trunk frame)
                let u = -(p.leg_jacobian(leg, &ql).transpose() * (rt * self.last_grf[leg]));
                torque[3 * leg..3 * leg + 3].copy_from_slice(u.as_slice());
            }
        }
        (q, torque)
    }

    fn reward_context(&mut self, cmd: &Vec6) -> [f64; 14] {
        let (q, torque) = self.leg_state();
        let period = self.control_period();
        let k_a = self.scenario.rewards.k_a;
        let qdot: [f64; 12] = std::array::from_fn(|i| (q[i] - self.q_leg[i]) / period);
        let alpha: [f64; 12] =
            std::array::from_fn(|i| if k_a != 0.0 { (q[i] - self.q_default[i]) / k_a } else { 0.0 });
        let samples = self.gait.samples();
        let feet = std::array::from_fn(|i| {
            let ev = self.events[i];
            FootState {
                contact: samples[i].contact,
                first_contact: ev.is_some(),
                air_time: ev.map(|e| e.air_time).unwrap_or(0.0),
                height: samples[i].world.z,
                peak_height: ev.map(|e| e.peak).unwrap_or(0.0),
                velocity_xy: [samples[i].world_velocity.x, samples[i].world_velocity.y],
            }
        });
        let tw = twist_of(&self.planar);
        let ctx = RewardContext {
            q_leg: q,
            q_default: self.q_default,
            qdot_leg: qdot,
            torque,
            alpha,
            alpha_prev: self.alpha,
            feet,
            base_linear: Vec3::new(tw[0], tw[1], tw[2]),
            base_angular: Vec3::new(tw[3], tw[4], tw[5]),
            ee_linear_cmd: Vec3::new(cmd[0], cmd[1], cmd[2]),
            ee_linear: Vec3::new(self.last_achieved[0], self.last_achieved[1], self.last_achieved[2]),
            ee_angular_cmd: Vec3::new(cmd[3], cmd[4], cmd[5]),
            ee_angular: Vec3::new(self.last_achieved[3], self.last_achieved[4], self.last_achieved[5]),
            base_z_axis: self.base_pose.rotation.axis(2),
        };
        self.q_leg = q;
        self.alpha = alpha;
        self.events = [None; NUM_LEGS];
        self.rewards.eval(&ctx)
    }

    fn violations(&self, ee: &Pose, cmd: &Vec6, ref_pose: &Pose, ref_wrench: &Vec6) -> [u8; 4] {
        let gains = &self.scenario.controller.admittance.gains;
        let mut out = [0u8; 4];
        for axis in Axis::ALL {
            let c = self.scenario.constraints.axis(axis);
            if !constrained(c) {
                continue;
            }
            let i = axis.component();
            let x = axis_value(ee, axis);
            let x_ref = match axis {
                Axis::Yaw => x + wrap_angle(ref_pose.rotation.yaw() - x),
                _ => ref_pose.translation[i],
            };
            let y_w = ref_wrench[i] + gains.stiffness()[i] * (x - x_ref);
            let mut m = 0;
            if !c.position.contains(x) {
                m |= VIOLATION_POSITION;
            }
            if !c.velocity.contains(cmd[i]) {
                m |= VIOLATION_VELOCITY;
            }
            if !c.wrench.contains(y_w) {
                m |= VIOLATION_WRENCH;
            }
            if !c.kinematic.contains(x_ref) {
                m |= VIOLATION_KINEMATIC;
            }
            out[axis as usize] = m;
        }
        out
    }

    /// Runs one controller tick and the physics steps of the following period.
    pub fn advance(&mut self) -> Result<&StepRecord, SimError> {
        let t = self.time();
        let ee = self.ee_pose()?;
        let sensed = self.sensed_wrench(t, &ee);
        let r_ft_w = FramedRotation::new(ee.rotation, Frame::Sensor, Frame::World);
        let cfg = self.scenario.controller.admittance;
        let v_prev = self.command.map(|c| c.twist.to_vector()).unwrap_or_else(Vec6::zeros);

        let g = gravity_wrench(&cfg.gravity, &ee.rotation).to_vector();
        let rs = ee.rotation;
        let f = rs * Vec3::new(sensed[0], sensed[1], sensed[2]);
        let m = rs * Vec3::new(sensed[3], sensed[4], sensed[5]);
        let net = Vec6::new(f.x, f.y, f.z, m.x, m.y, m.z) - g;

        let (ref_pose, ref_wrench, verdict) = self.govern(&ee, &v_prev, &net)?;
        let cmd = compute_desired_twist(
            &cfg,
            &Wrench::from_vector(&sensed, Frame::Sensor),
            &r_ft_w,
            &ref_pose,
            &Wrench::from_vector(&ref_wrench, Frame::World),
            &ee,
        )?;
        let cmd_v = cmd.twist.to_vector();
        if !finite(cmd_v.as_slice()) {
            return Err(SimError::NonFinite { step: self.step, quantity: "commanded twist" });
        }
        self.command = Some(cmd);
        let violations = self.violations(&ee, &cmd_v, &ref_pose, &ref_wrench);

        // complementary split: slow part to the base, offset pulled back under the arm
        let period = self.control_period();
        let a = (period / self.scenario.split.time_constant).min(1.0);
        let planar_cmd = [cmd_v[0], cmd_v[1], cmd_v[5]];
        for i in 0..PLANAR {
            self.split_lp[i] += a * (planar_cmd[i] - self.split_lp[i]);
        }
        let k_r = self.scenario.split.recenter_gain;
        let off = ee.translation - self.base_pose.translation - self.base_pose.rotation * self.nominal_offset;
        let yaw_off = wrap_angle(ee.rotation.yaw() - self.base_pose.rotation.yaw() - self.nominal_yaw);
        self.base_cmd = [self.split_lp[0] + k_r * off.x, self.split_lp[1] + k_r * off.y, self.split_lp[2] + k_r * yaw_off];

        let rewards = self.reward_context(&cmd_v);
        let state = self.estimator.state().cloned().unwrap_or_default();
        let p_min_eig = SymmetricEigen::new(state.p).eigenvalues.min();

        let mut ref_raw = [0.0; 4];
        let mut ref_gov = [0.0; 4];
        let mut ref_wrench_raw = [0.0; 4];
        let mut ref_wrench_gov = [0.0; 4];
        for axis in Axis::ALL {
            let i = axis.component();
            let a = axis as usize;
            ref_raw[a] = axis_value(&self.reference_pose, axis);
            ref_gov[a] = axis_value(&ref_pose, axis);
            ref_wrench_raw[a] = self.reference_wrench[i];
            ref_wrench_gov[a] = ref_wrench[i];
        }
        let base_twist = twist_of(&self.planar);
        let mut record = StepRecord {
            t,
            cmd: arr6(&cmd_v),
            achieved: [0.0; 6],
            ee: [ee.translation.x, ee.translation.y, ee.translation.z, ee.rotation.yaw()],
            base: [
                self.base_pose.translation.x,
                self.base_pose.translation.y,
                self.base_pose.translation.z,
                self.base_pose.rotation.yaw(),
            ],
            base_twist: arr6(&base_twist),
            base_estimate: arr6(&self.estimate),
            p_diag: std::array::from_fn(|i| state.p[(i, i)]),
            p_min_eig,
            sensed: arr6(&sensed),
            net_wrench: arr6(&net),
            ref_raw,
            ref_wrench_raw,
            ref_gov,
            ref_wrench_gov,
            verdict,
            violations,
            rewards,
        };

        let mut achieved = Vec6::zeros();
        for _ in 0..self.ctrl_every {
            achieved += self.physics_step(&cmd_v)?;
        }
        achieved /= self.ctrl_every as f64;
        self.last_achieved = achieved;
        record.achieved = arr6(&achieved);
        self.log.push(record);
        Ok(self.log.last().expect("just pushed"))
    }

    /// Returns the end-effector twist realized over the step.
    fn physics_step(&mut self, cmd: &Vec6) -> Result<Vec6, SimError> {
        let dt = self.dt;
        if self.step % self.policy_every as u64 == 0 {
            let mut p = self.scenario.tracker.sample_noise(&self.base_cmd, &mut self.rng);
            if self.estimator.name() != "truth" {
                if let Some(st) = self.estimator.state() {
                    let eta = NoiseSampler::new(&st.p)
                        .map_err(|e| SimError::Estimator(e.to_string()))?
                        .sample(&mut self.rng);
                    p[0] -= eta[3];
                    p[1] -= eta[4];
                    p[2] -= eta[2];
                }
            }
            self.perturbation = p;
        }
        let old = twist_of(&self.planar);
        self.planar = base_tracker_step(&self.scenario.tracker, &self.planar, &self.base_cmd, &self.perturbation, dt);
        let new = twist_of(&self.planar);
        let accel = (new - old) / dt;

        let comp = if self.estimator.name() == "truth" { new } else { self.estimate };
        let wb_est = WholeBodyState::new(self.base_pose, twist(&comp), self.arm.clone());
        let target = whole_body_joint_velocities(&wb_est, &twist(cmd), &self.arm_model, self.scenario.controller.lambda_dls)?;
        let lim = self.scenario.controller.joint_velocity_limit;
        let tau = self.scenario.controller.arm_time_constant;
        let gain = if tau > 0.0 { (dt / tau).min(1.0) } else { 1.0 };
        let qdot: Vec<f64> = self
            .arm
            .velocities
            .iter()
            .zip(target.iter())
            .map(|(v, t)| v + gain * (t.clamp(-lim, lim) - v))
            .collect();
        let wb_true = WholeBodyState::new(self.base_pose, twist(&new), self.arm.clone());
        let achieved = end_effector_twist(&wb_true, &self.arm_model, &qdot)?.to_vector();

        self.base_pose = integrate_pose(&self.base_pose, &twist(&new), dt);
        self.arm.integrate(&self.arm_model, &qdot, dt);
        self.step += 1;

        let trunk = self.trunk(accel);
        self.gait.advance(self.time(), dt, &trunk);
        for (i, s) in self.gait.samples().iter().enumerate() {
            if s.first_contact {
                self.events[i] = Some(PendingEvents { air_time: s.air_time, peak: s.peak_height });
            }
        }
        self.last_grf = self.gait.ground_reaction_forces(&trunk, &self.body);
        for (acc, f) in self.grf_sum.iter_mut().zip(&self.last_grf) {
            *acc += f;
        }
        self.grf_count += 1;

        if self.step % self.est_every as u64 == 0 {
            self.estimator_sample(&trunk, &new)?;
        }

        if !finite(self.base_pose.translation.as_slice()) || !finite(self.base_pose.rotation.matrix().as_slice()) {
            return Err(SimError::NonFinite { step: self.step, quantity: "base pose" });
        }
        if !finite(&self.arm.positions) || !finite(&self.arm.velocities) {
            return Err(SimError::NonFinite { step: self.step, quantity: "arm joint state" });
        }
        if !finite(achieved.as_slice()) {
            return Err(SimError::NonFinite { step: self.step, quantity: "end-effector twist" });
        }
        Ok(achieved)
    }

    fn estimator_sample(&mut self, trunk: &TrunkState, true_twist: &Vec6) -> Result<(), SimError> {
        let n = self.grf_count.max(1) as f64;
        let mean: [Vec3; NUM_LEGS] = std::array::from_fn(|i| self.grf_sum[i] / n);
        self.grf_sum = [Vec3::zeros(); NUM_LEGS];
        self.grf_count = 0;
        let ideal = self.gait.measurement(trunk, &mean);
        let legs = self.corrupt(ideal);
        let truth = to_estimator(true_twist);
        if self.recording {
            let prior = self.last_truth;
            let x_model = prior + model_increment(&legs, &self.body);
            let (y, valid) = measurement(&legs);
            self.estimation_rows.push(EstimationRow {
                t: self.time(),
                x_model,
                x_true: truth,
                phi: features(&prior, &legs),
                y_meas: y,
                odom_valid: valid,
            });
        }
        self.last_truth = truth;
        let x = self.estimator.step(&legs, &truth);
        if !finite(x.as_slice()) {
            return Err(SimError::NonFinite { step: self.step, quantity: "base velocity estimate" });
        }
        if let Some(st) = self.estimator.state() {
            if !finite(st.p.as_slice()) {
                return Err(SimError::NonFinite { step: self.step, quantity: "estimator covariance" });
            }
        }
        self.estimate = from_estimator(&x);
        Ok(())
    }

    fn corrupt(&mut self, mut legs: LegMeasurement) -> LegMeasurement {
        let s = self.scenario.sensor;
        for (i, f) in legs.feet.iter_mut().enumerate() {
            if f.contact {
                for k in 0..3 {
                    f.grf[k] = s.grf_scale[i][k] * f.grf[k] + s.grf_offset[i][k];
                }
            }
            for k in 0..3 {
                f.velocity[k] += s.foot_velocity_noise * self.rng.sample::<f64, _>(StandardNormal);
            }
        }
        for k in 0..3 {
            legs.gyro[k] += s.gyro_noise * self.rng.sample::<f64, _>(StandardNormal);
        }
        LegMeasurement::new(legs.feet, legs.gyro, legs.base_rotation)
    }
}

/// Runs the scenario for its full duration.
pub fn run_scenario(scenario: &Scenario, resources: &SimResources) -> Result<(RunMetrics, Vec<StepRecord>), SimError> {
    let mut sim = Simulation::new(scenario.clone(), resources.clone())?;
    for _ in 0..scenario.control_steps() {
        sim.advance()?;
    }
    let rows = sim.take_records();
    Ok((RunMetrics::from_records(&rows), rows))
}
