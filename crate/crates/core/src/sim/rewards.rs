//! Locomotion reward and penalty terms evaluated on one step context.

use serde::{Deserialize, Serialize};

use crate::registry::Registry;
use crate::spatial::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// Tracking-kernel width in `exp(-|x|^2 / sigma)`.
    pub sigma: f64,
    /// Target swing height, m.
    pub h_max: f64,
    /// Action scale: `a_t = k_a * alpha_t`.
    pub k_a: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self { sigma: 0.25, h_max: 0.08, k_a: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FootState {
    pub contact: bool,
    /// Touched down during this step.
    pub first_contact: bool,
    /// Duration of the swing that ended at touchdown, s.
    pub air_time: f64,
    /// Current foot height above ground, m.
    pub height: f64,
    /// Peak height of the swing that ended at touchdown, m.
    pub peak_height: f64,
    /// Foot velocity in the ground plane, m/s.
    pub velocity_xy: [f64; 2],
}

/// Everything the terms read. Leg vectors are ordered FL, FR, RL, RR with
/// three joints each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardContext {
    pub q_leg: [f64; 12],
    pub q_default: [f64; 12],
    pub qdot_leg: [f64; 12],
    pub torque: [f64; 12],
    /// Unscaled policy outputs at t and t-1.
    pub alpha: [f64; 12],
    pub alpha_prev: [f64; 12],
    pub feet: [FootState; 4],
    pub base_linear: Vec3,
    pub base_angular: Vec3,
    pub ee_linear_cmd: Vec3,
    pub ee_linear: Vec3,
    pub ee_angular_cmd: Vec3,
    pub ee_angular: Vec3,
    /// Body z axis expressed in the world.
    pub base_z_axis: Vec3,
}

impl Default for RewardContext {
    fn default() -> Self {
        Self {
            q_leg: [0.0; 12],
            q_default: [0.0; 12],
            qdot_leg: [0.0; 12],
            torque: [0.0; 12],
            alpha: [0.0; 12],
            alpha_prev: [0.0; 12],
            feet: [FootState::default(); 4],
            base_linear: Vec3::zeros(),
            base_angular: Vec3::zeros(),
            ee_linear_cmd: Vec3::zeros(),
            ee_linear: Vec3::zeros(),
            ee_angular_cmd: Vec3::zeros(),
            ee_angular: Vec3::zeros(),
            base_z_axis: Vec3::z(),
        }
    }
}

impl RewardContext {
    /// `1{|v_ee| > 0.01}`, using the current end-effector linear velocity.
    fn moving(&self) -> f64 {
        if self.ee_linear.norm() > 0.01 {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    Reward,
    Penalty,
}

pub trait RewardTerm: Send + Sync {
    fn name(&self) -> &'static str;
    fn kind(&self) -> TermKind;
    fn eval(&self, ctx: &RewardContext, p: &RewardParams) -> f64;
}

/// Clamped to the smallest normal float so large errors stay strictly positive
/// instead of underflowing to 0.
pub fn tracking_kernel(x2: f64, sigma: f64) -> f64 {
    (-x2 / sigma).exp().max(f64::MIN_POSITIVE)
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn l2sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn diff(a: &[f64; 12], b: &[f64; 12]) -> [f64; 12] {
    std::array::from_fn(|i| a[i] - b[i])
}

macro_rules! term {
    ($ty:ident, $name:literal, $kind:ident, |$c:ident, $p:ident| $body:expr) => {
        struct $ty;
        impl RewardTerm for $ty {
            fn name(&self) -> &'static str {
                $name
            }
            fn kind(&self) -> TermKind {
                TermKind::$kind
            }
            #[allow(unused_variables)]
            fn eval(&self, $c: &RewardContext, $p: &RewardParams) -> f64 {
                $body
            }
        }
    };
}

term!(LinVelTracking, "ee_lin_vel_tracking", Reward, |c, p| tracking_kernel(
    (c.ee_linear_cmd - c.ee_linear).norm_squared(),
    p.sigma
));
term!(AngVelTracking, "ee_ang_vel_tracking", Reward, |c, p| tracking_kernel(
    (c.ee_angular_cmd - c.ee_angular).norm_squared(),
    p.sigma
));
// |u| is read as the elementwise absolute value summed (L1 norm).
term!(JointTorque, "joint_torque", Penalty, |c, p| l2sq(&c.torque).sqrt() + l1(&c.torque));
term!(ActionRate, "action_rate", Penalty, |c, p| p.k_a * p.k_a * l2sq(&diff(&c.alpha, &c.alpha_prev)));
term!(Energy, "energy", Penalty, |c, p| c.qdot_leg.iter().zip(&c.torque).map(|(q, u)| q.abs() * u.abs()).sum());
term!(PoseDeviation, "pose_deviation", Penalty, |c, p| tracking_kernel(l2sq(&diff(&c.q_leg, &c.q_default)), p.sigma));
term!(StandStill, "stand_still", Penalty, |c, p| {
    let still = if c.ee_linear.norm() < 0.01 { 1.0 } else { 0.0 };
    l1(&diff(&c.q_leg, &c.q_default)) * still
});
term!(LinVelZ, "lin_vel_z", Penalty, |c, p| c.base_linear.z * c.base_linear.z);
term!(AngVelXy, "ang_vel_xy", Penalty, |c, p| c.base_angular.x.powi(2) + c.base_angular.y.powi(2));
term!(FeetAirtime, "feet_airtime", Reward, |c, p| {
    let s: f64 = c.feet.iter().filter(|f| f.first_contact).map(|f| f.air_time - 0.1).sum();
    s * c.moving()
});
term!(SwingClearance, "swing_clearance", Penalty, |c, p| c
    .feet
    .iter()
    .map(|f| (f.height - p.h_max).abs() * (f.velocity_xy[0].hypot(f.velocity_xy[1])))
    .sum());
term!(SwingHeight, "swing_height", Penalty, |c, p| {
    let s: f64 = c.feet.iter().filter(|f| f.first_contact).map(|f| (f.peak_height / p.h_max - 1.0).powi(2)).sum();
    s * c.moving()
});
term!(FeetSlip, "feet_slip", Penalty, |c, p| {
    let s: f64 = c.feet.iter().filter(|f| f.contact).map(|f| f.velocity_xy[0].powi(2) + f.velocity_xy[1].powi(2)).sum();
    s * c.moving()
});
term!(Termination, "termination", Penalty, |c, p| if c.base_z_axis.dot(&Vec3::z()) < 0.0 { 1.0 } else { 0.0 });

/// Registered term names in table order.
pub const TERM_NAMES: [&str; 14] = [
    "ee_lin_vel_tracking",
    "ee_ang_vel_tracking",
    "joint_torque",
    "action_rate",
    "energy",
    "pose_deviation",
    "stand_still",
    "lin_vel_z",
    "ang_vel_xy",
    "feet_airtime",
    "swing_clearance",
    "swing_height",
    "feet_slip",
    "termination",
];

pub fn reward_registry() -> Registry<dyn RewardTerm> {
    let mut r: Registry<dyn RewardTerm> = Registry::new("reward term");
    r.register("ee_lin_vel_tracking", |_| Ok(Box::new(LinVelTracking)));
    r.register("ee_ang_vel_tracking", |_| Ok(Box::new(AngVelTracking)));
    r.register("joint_torque", |_| Ok(Box::new(JointTorque)));
    r.register("action_rate", |_| Ok(Box::new(ActionRate)));
    r.register("energy", |_| Ok(Box::new(Energy)));
    r.register("pose_deviation", |_| Ok(Box::new(PoseDeviation)));
    r.register("stand_still", |_| Ok(Box::new(StandStill)));
    r.register("lin_vel_z", |_| Ok(Box::new(LinVelZ)));
    r.register("ang_vel_xy", |_| Ok(Box::new(AngVelXy)));
    r.register("feet_airtime", |_| Ok(Box::new(FeetAirtime)));
    r.register("swing_clearance", |_| Ok(Box::new(SwingClearance)));
    r.register("swing_height", |_| Ok(Box::new(SwingHeight)));
    r.register("feet_slip", |_| Ok(Box::new(FeetSlip)));
    r.register("termination", |_| Ok(Box::new(Termination)));
    r
}

/// All terms in table order, ready for repeated evaluation.
pub struct RewardSuite {
    terms: Vec<Box<dyn RewardTerm>>,
    pub params: RewardParams,
}

impl RewardSuite {
    pub fn new(params: RewardParams) -> Self {
        let reg = reward_registry();
        let terms = TERM_NAMES.iter().map(|n| reg.create(n, &()).expect("registered")).collect();
        Self { terms, params }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.terms.iter().map(|t| t.name()).collect()
    }

    pub fn eval(&self, ctx: &RewardContext) -> [f64; 14] {
        let mut out = [0.0; 14];
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.eval(ctx, &self.params);
        }
        out
    }
}
