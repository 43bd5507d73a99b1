//! Versioned scenario documents.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admittance::AdmittanceConfig;
use crate::estimator::{Mat6, NoiseParams, RigidBodyParams, TrainConfig};
use crate::governor::grid::{GridDim, GridSpec};
use crate::governor::moas::BuildConfig;
use crate::governor::{Axis, AxisConstraints, AxisDynamics, ConstraintSet, Margins, SimSettings};
use crate::spatial::Vec6;

use super::gait::GaitSynthParams;
use super::rewards::RewardParams;
use super::tracker::BaseTrackerParams;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("unsupported scenario version {0} (expected {SCENARIO_VERSION})")]
    Version(u32),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileFrame {
    /// Components are read by the force/torque sensor directly.
    #[default]
    Sensor,
    /// Components are fixed in the world and rotated into the sensor frame.
    World,
}

/// One piece of the scripted wrench, active on `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Constant { start: f64, end: f64, wrench: [f64; 6] },
    Ramp { start: f64, end: f64, from: [f64; 6], to: [f64; 6] },
    Sine {
        start: f64,
        end: f64,
        #[serde(default)]
        offset: [f64; 6],
        amplitude: [f64; 6],
        /// Hz
        frequency: [f64; 6],
        /// rad
        #[serde(default)]
        phase: [f64; 6],
    },
}

impl Segment {
    pub fn span(&self) -> (f64, f64) {
        match *self {
            Segment::Constant { start, end, .. } | Segment::Ramp { start, end, .. } | Segment::Sine { start, end, .. } => {
                (start, end)
            }
        }
    }

    pub fn eval(&self, t: f64) -> Vec6 {
        match *self {
            Segment::Constant { wrench, .. } => Vec6::from(wrench),
            Segment::Ramp { start, end, from, to } => {
                let s = ((t - start) / (end - start)).clamp(0.0, 1.0);
                Vec6::from_fn(|i, _| from[i] + s * (to[i] - from[i]))
            }
            Segment::Sine { start, offset, amplitude, frequency, phase, .. } => Vec6::from_fn(|i, _| {
                offset[i] + amplitude[i] * (std::f64::consts::TAU * frequency[i] * (t - start) + phase[i]).sin()
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrenchProfile {
    #[serde(default)]
    pub frame: ProfileFrame,
    pub segments: Vec<Segment>,
}

impl WrenchProfile {
    pub fn zero(duration: f64) -> Self {
        Self {
            frame: ProfileFrame::Sensor,
            segments: vec![Segment::Constant { start: 0.0, end: duration, wrench: [0.0; 6] }],
        }
    }

    pub fn constant(duration: f64, wrench: [f64; 6], frame: ProfileFrame) -> Self {
        Self { frame, segments: vec![Segment::Constant { start: 0.0, end: duration, wrench }] }
    }

    /// Segments must tile `[0, duration]` in order without gaps or overlaps.
    pub fn validate(&self, duration: f64) -> Result<(), String> {
        const TOL: f64 = 1e-9;
        let first = self.segments.first().ok_or("wrench profile has no segments")?;
        if first.span().0.abs() > TOL {
            return Err(format!("first segment starts at {} instead of 0", first.span().0));
        }
        for (i, s) in self.segments.iter().enumerate() {
            let (a, b) = s.span();
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(format!("segment {i} has empty or invalid span [{a}, {b})"));
            }
            if let Some(next) = self.segments.get(i + 1) {
                let gap = next.span().0 - b;
                if gap.abs() > TOL {
                    let what = if gap > 0.0 { "gap" } else { "overlap" };
                    return Err(format!("{what} between segments {i} and {} at t={b}", i + 1));
                }
            }
            if let Segment::Sine { frequency, .. } = s {
                if frequency.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
                    return Err(format!("segment {i} has a negative or non-finite frequency"));
                }
            }
        }
        let end = self.segments.last().map(|s| s.span().1).unwrap_or(0.0);
        if end + TOL < duration {
            return Err(format!("profile ends at {end} s, before the scenario duration {duration} s"));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Vec6 {
        let seg = self
            .segments
            .iter()
            .find(|s| {
                let (a, b) = s.span();
                t >= a && t < b
            })
            .or(self.segments.last());
        seg.map(|s| s.eval(t)).unwrap_or_else(Vec6::zeros)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rates {
    /// Hz
    pub controller: f64,
    pub estimator: f64,
    pub physics: f64,
    /// Update rate of the tracking perturbation.
    pub policy: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self { controller: 40.0, estimator: 500.0, physics: 1000.0, policy: 50.0 }
    }
}

impl Rates {
    /// Physics steps per controller, estimator and policy tick.
    pub fn decimation(&self) -> Result<(usize, usize, usize), String> {
        let ratio = |name: &str, r: f64| {
            if !(r > 0.0 && r.is_finite()) {
                return Err(format!("{name} rate must be > 0"));
            }
            let n = self.physics / r;
            if (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
                return Err(format!("physics rate {} is not a multiple of the {name} rate {r}", self.physics));
            }
            Ok(n.round() as usize)
        };
        if !(self.physics > 0.0 && self.physics.is_finite()) {
            return Err("physics rate must be > 0".into());
        }
        Ok((ratio("controller", self.controller)?, ratio("estimator", self.estimator)?, ratio("policy", self.policy)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSettings {
    pub admittance: AdmittanceConfig,
    pub lambda_dls: f64,
    /// Joint-velocity servo lag of the arm, s.
    pub arm_time_constant: f64,
    /// rad/s
    pub joint_velocity_limit: f64,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self { admittance: AdmittanceConfig::default(), lambda_dls: 1e-4, arm_time_constant: 0.01, joint_velocity_limit: 3.0 }
    }
}

/// Complementary split of the end-effector command between base and arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitParams {
    /// Crossover of the low-pass sent to the base, s.
    pub time_constant: f64,
    /// Gain pulling the base back under the end effector, 1/s.
    pub recenter_gain: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self { time_constant: 0.5, recenter_gain: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GovernorSettings {
    pub enabled: bool,
    /// Axes with a governed reference; all others pass through.
    pub axes: [bool; 4],
    pub margins: Margins,
    /// Grid counts per dimension `[x, x', v, W, W']` for sets built in place.
    pub counts: [usize; 5],
    /// Half-width of the wrench dimensions of built sets.
    pub wrench_range: f64,
    pub sim: SimSettings,
}

impl Default for GovernorSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            axes: [false; 4],
            margins: Margins::default(),
            counts: [6, 6, 6, 6, 6],
            wrench_range: 40.0,
            sim: SimSettings::default(),
        }
    }
}

impl GovernorSettings {
    pub fn governed_axes(&self) -> Vec<Axis> {
        Axis::ALL.iter().copied().filter(|a| self.axes[*a as usize]).collect()
    }
}

/// Where the `kf+nn` correction comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    /// Length of the seeded excitation run recorded for training, s.
    pub duration: f64,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            duration: 10.0,
            seed: 11,
            train: TrainConfig { max_epochs: 60, loss_threshold: 0.0, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSettings {
    /// Registry name: `truth`, `kf` or `kf+nn`.
    pub mode: String,
    pub alpha_lp: f64,
    pub initial_covariance: f64,
    pub noise: NoiseParams,
    pub body: RigidBodyParams,
    /// Pretrained network; trained from a calibration run when absent.
    pub net_path: Option<String>,
    pub calibration: CalibrationSettings,
}

/// Filter noise matched to the default sensor model: gyro variance 1e-5 and
/// a process floor wide enough for the learned correction's residual.
fn sim_noise() -> NoiseParams {
    let r = Mat6::from_diagonal(&Vec6::new(1e-5, 1e-5, 1e-5, 2.5e-3, 2.5e-3, 2.5e-3));
    NoiseParams::with_floor_diag(r, [1e-4, 1e-4, 1e-4, 1e-6, 1e-6, 1e-6]).expect("valid noise")
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            mode: "truth".into(),
            alpha_lp: 0.6,
            initial_covariance: 1e-2,
            noise: sim_noise(),
            body: RigidBodyParams::default(),
            net_path: None,
            calibration: CalibrationSettings::default(),
        }
    }
}

/// Proprioceptive sensor imperfections. The force bias is what the learned
/// correction has to absorb.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorModel {
    /// Reported GRF = scale * true + offset, per leg and world axis.
    pub grf_scale: [[f64; 3]; 4],
    /// N
    pub grf_offset: [[f64; 3]; 4],
    /// Std of the body-frame foot velocity noise, m/s.
    pub foot_velocity_noise: f64,
    /// Std of the gyro noise, rad/s.
    pub gyro_noise: f64,
    /// Std of the additive force/torque sensor noise `[N, N m]`.
    pub wrench_noise: [f64; 2],
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            grf_scale: [[1.03, 0.97, 0.92], [0.98, 1.02, 1.06], [1.02, 1.01, 0.95], [0.97, 0.99, 1.04]],
            grf_offset: [[1.5, -1.0, 3.0], [-0.5, 1.5, 2.0], [1.0, 0.5, -1.5], [-1.0, -0.5, 2.5]],
            foot_velocity_noise: 0.02,
            gyro_noise: 0.003,
            wrench_noise: [0.0, 0.0],
        }
    }
}

impl SensorModel {
    pub fn ideal() -> Self {
        Self {
            grf_scale: [[1.0; 3]; 4],
            grf_offset: [[0.0; 3]; 4],
            foot_velocity_noise: 0.0,
            gyro_noise: 0.0,
            wrench_noise: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialState {
    /// World `[x, y]` of the trunk CoM, m.
    pub base_xy: [f64; 2],
    /// rad
    pub base_yaw: f64,
    pub arm_q: Vec<f64>,
}

impl Default for InitialState {
    fn default() -> Self {
        Self { base_xy: [0.0, 0.0], base_yaw: 0.0, arm_q: vec![0.0, -1.2, 2.2, 0.0, -1.0, 0.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    /// s
    pub duration: f64,
    #[serde(default)]
    pub rates: Rates,
    #[serde(default)]
    pub seed: u64,
    pub profile: WrenchProfile,
    #[serde(default)]
    pub controller: ControllerSettings,
    #[serde(default = "unbounded_set")]
    pub constraints: ConstraintSet,
    #[serde(default)]
    pub governor: GovernorSettings,
    #[serde(default)]
    pub tracker: BaseTrackerParams,
    #[serde(default)]
    pub split: SplitParams,
    #[serde(default)]
    pub gait: GaitSynthParams,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    #[serde(default)]
    pub sensor: SensorModel,
    #[serde(default)]
    pub rewards: RewardParams,
    #[serde(default)]
    pub initial: InitialState,
}

fn unbounded_set() -> ConstraintSet {
    let u = AxisConstraints::unbounded();
    ConstraintSet { x: u, y: u, z: u, yaw: u }
}

impl Scenario {
    /// Zero-wrench scenario with default settings.
    pub fn idle(duration: f64) -> Self {
        Self {
            version: SCENARIO_VERSION,
            name: "idle".into(),
            duration,
            rates: Rates::default(),
            seed: 0,
            profile: WrenchProfile::zero(duration),
            controller: ControllerSettings::default(),
            constraints: unbounded_set(),
            governor: GovernorSettings::default(),
            tracker: BaseTrackerParams::default(),
            split: SplitParams::default(),
            gait: GaitSynthParams::default(),
            estimator: EstimatorSettings::default(),
            sensor: SensorModel::default(),
            rewards: RewardParams::default(),
            initial: InitialState::default(),
        }
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self, ScenarioError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| ScenarioError::Json { path: source.to_string(), source: e })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), source: e })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| ScenarioError::Invalid(m);
        if self.version != SCENARIO_VERSION {
            return Err(ScenarioError::Version(self.version));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(bad(format!("duration must be > 0, got {}", self.duration)));
        }
        self.rates.decimation().map_err(bad)?;
        self.profile.validate(self.duration).map_err(bad)?;
        self.tracker.validate().map_err(bad)?;
        self.gait.validate().map_err(bad)?;
        self.controller.admittance.gravity.validate().map_err(|e| bad(e.to_string()))?;
        let c = &self.controller;
        if !(c.lambda_dls >= 0.0) || !(c.arm_time_constant >= 0.0) || !(c.joint_velocity_limit > 0.0) {
            return Err(bad("controller lambda_dls, arm lag and joint velocity limit must be nonnegative".into()));
        }
        if !(self.split.time_constant > 0.0) || !(self.split.recenter_gain >= 0.0) {
            return Err(bad("split time constant must be > 0 and recenter gain >= 0".into()));
        }
        self.constraints.validate().map_err(|e| bad(e.to_string()))?;
        if !["truth", "kf", "kf+nn"].contains(&self.estimator.mode.as_str()) {
            return Err(bad(format!("unknown estimator mode '{}'", self.estimator.mode)));
        }
        if self.initial.arm_q.len() != 6 {
            return Err(bad(format!("initial arm_q needs 6 joints, got {}", self.initial.arm_q.len())));
        }
        Ok(())
    }

    pub fn control_steps(&self) -> usize {
        (self.duration * self.rates.controller).round() as usize
    }

    pub fn axis_dynamics(&self, axis: Axis) -> AxisDynamics {
        AxisDynamics::from_config(&self.controller.admittance, axis)
    }

    /// Build configuration for a set spanning the axis constraints, with the
    /// reference-position dimension over the kinematic interval.
    pub fn moas_config(&self, axis: Axis) -> BuildConfig {
        let g = &self.governor;
        let c = *self.constraints.axis(axis);
        let w = g.wrench_range;
        let dims = [
            GridDim::new(c.position.lo, c.position.hi, g.counts[0]),
            GridDim::new(c.kinematic.lo, c.kinematic.hi, g.counts[1]),
            GridDim::new(c.velocity.lo, c.velocity.hi, g.counts[2]),
            GridDim::new(-w, w, g.counts[3]),
            GridDim::new(-w, w, g.counts[4]),
        ];
        BuildConfig {
            axis,
            dynamics: self.axis_dynamics(axis),
            constraints: c,
            margins: g.margins,
            grid: GridSpec { dims },
            sim: g.sim,
        }
    }
}
