//! Reference governor over per-axis output-admissible sets.
//!
//! Each axis (x, y, z translation and rotation about the gripper normal) is an
//! independent first-order system `v = sat((W - W' - K (x - x')) / D)`
//! integrated with explicit Euler. A sample point is
//! `o = [x, x', v, W, W']`; it is admissible when the closed-loop trajectory
//! from it keeps position, velocity, wrench and reference within bounds.

pub mod grid;
pub mod index;
pub mod moas;
pub mod query;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admittance::AdmittanceConfig;

pub use grid::{GridDim, GridSpec};
pub use index::{index_registry, KdTree, LinearScan, NeighborIndex};
pub use moas::{build_bundle, build_moas, AdmissibleSet, BuildConfig, BuildReport, MoasBundle, MoasError};
pub use query::{query_governor, GovernorQuery, GovernorResult, Verdict};

/// Number of coordinates in a sample point.
pub const DIM: usize = 5;
pub type Point = [f64; DIM];

pub const X_EE: usize = 0;
pub const X_REF: usize = 1;
pub const V_EE: usize = 2;
pub const WRENCH: usize = 3;
pub const WRENCH_REF: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("{axis} {name} bound has lower {lo} > upper {hi}")]
    Inverted { axis: Axis, name: &'static str, lo: f64, hi: f64 },
    #[error("{axis} {name} bound is not finite")]
    NonFinite { axis: Axis, name: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
    /// Rotation about the gripper normal (world z).
    Yaw,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::X, Axis::Y, Axis::Z, Axis::Yaw];

    /// Component of a `[linear; angular]` 6-vector governed by this axis.
    pub fn component(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
            Axis::Yaw => 5,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
            Axis::Yaw => "yaw",
        })
    }
}

/// Closed interval. `lo == hi` is allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    /// Shrinks both ends by `margin`, never past the midpoint.
    pub fn tightened(&self, margin: f64) -> Self {
        let m = margin.max(0.0).min(0.5 * (self.hi - self.lo));
        Self { lo: self.lo + m, hi: self.hi - m }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// True when `self` lies inside `outer`.
    pub fn within(&self, outer: &Interval) -> bool {
        outer.lo <= self.lo && self.hi <= outer.hi
    }
}

/// Output bounds for one axis. Units are m, m/s and N for translation axes and
/// rad, rad/s and N m for the yaw axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisConstraints {
    pub position: Interval,
    pub velocity: Interval,
    /// Bound on the controller's spring-plus-reference wrench `W' + K (x - x')`.
    pub wrench: Interval,
    /// Reachable interval for the reference position.
    pub kinematic: Interval,
}

impl AxisConstraints {
    pub fn validate(&self, axis: Axis) -> Result<(), ConstraintError> {
        for (name, iv) in self.named() {
            if !iv.lo.is_finite() || !iv.hi.is_finite() {
                return Err(ConstraintError::NonFinite { axis, name });
            }
            if iv.lo > iv.hi {
                return Err(ConstraintError::Inverted { axis, name, lo: iv.lo, hi: iv.hi });
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, Interval); 4] {
        [
            ("position", self.position),
            ("velocity", self.velocity),
            ("wrench", self.wrench),
            ("kinematic", self.kinematic),
        ]
    }

    pub fn tightened(&self, m: &Margins) -> Self {
        Self {
            position: self.position.tightened(m.position),
            velocity: self.velocity.tightened(m.velocity),
            wrench: self.wrench.tightened(m.wrench),
            kinematic: self.kinematic.tightened(m.position),
        }
    }

    /// Every interval of `self` inside the matching interval of `outer`.
    pub fn within(&self, outer: &AxisConstraints) -> bool {
        self.named().iter().zip(outer.named().iter()).all(|((_, a), (_, b))| a.within(b))
    }

    pub fn unbounded() -> Self {
        let big = Interval::new(-1e12, 1e12);
        Self { position: big, velocity: big, wrench: big, kinematic: big }
    }
}

/// Safety margins subtracted from the constraints when building the set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Margins {
    pub position: f64,
    pub velocity: f64,
    pub wrench: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub x: AxisConstraints,
    pub y: AxisConstraints,
    pub z: AxisConstraints,
    pub yaw: AxisConstraints,
}

impl ConstraintSet {
    pub fn axis(&self, a: Axis) -> &AxisConstraints {
        match a {
            Axis::X => &self.x,
            Axis::Y => &self.y,
            Axis::Z => &self.z,
            Axis::Yaw => &self.yaw,
        }
    }

    pub fn axis_mut(&mut self, a: Axis) -> &mut AxisConstraints {
        match a {
            Axis::X => &mut self.x,
            Axis::Y => &mut self.y,
            Axis::Z => &mut self.z,
            Axis::Yaw => &mut self.yaw,
        }
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        Axis::ALL.iter().try_for_each(|&a| self.axis(a).validate(a))
    }
}

/// Scalar closed-loop parameters along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisDynamics {
    pub stiffness: f64,
    pub damping: f64,
    /// Symmetric velocity clamp of the admittance output.
    pub saturation: f64,
}

impl AxisDynamics {
    pub fn from_config(cfg: &AdmittanceConfig, axis: Axis) -> Self {
        let i = axis.component();
        Self {
            stiffness: cfg.gains.stiffness()[i],
            damping: cfg.gains.damping()[i],
            saturation: if i < 3 { cfg.saturation.linear } else { cfg.saturation.angular },
        }
    }

    pub fn velocity(&self, x: f64, x_ref: f64, w: f64, w_ref: f64) -> f64 {
        ((w - w_ref - self.stiffness * (x - x_ref)) / self.damping).clamp(-self.saturation, self.saturation)
    }

    /// Wrench held by the controller: reference wrench plus spring force.
    pub fn output_wrench(&self, x: f64, x_ref: f64, w_ref: f64) -> f64 {
        w_ref + self.stiffness * (x - x_ref)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub horizon: usize,
    /// s
    pub dt: f64,
    pub settle_velocity: f64,
    pub settle_steps: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self { horizon: 400, dt: 0.025, settle_velocity: 1e-3, settle_steps: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rejection {
    Position,
    Velocity,
    Wrench,
    Kinematic,
}

impl Rejection {
    pub const ALL: [Rejection; 4] = [Rejection::Position, Rejection::Velocity, Rejection::Wrench, Rejection::Kinematic];
}

/// Simulates the closed loop from `o` and returns the first violated output,
/// or `None` when the whole trajectory is admissible.
///
/// The run stops early once `|v|` stays below the settling threshold for the
/// configured number of steps and the equilibrium (if one exists) satisfies
/// the constraints; the trajectory of a stable first-order system is monotone,
/// so the remaining samples lie between the current state and the equilibrium.
pub fn check_point(o: &Point, dynamics: &AxisDynamics, c: &AxisConstraints, s: &SimSettings) -> Option<Rejection> {
    let [mut x, x_ref, v0, w, w_ref] = *o;
    if !c.kinematic.contains(x_ref) {
        return Some(Rejection::Kinematic);
    }
    if !c.position.contains(x) {
        return Some(Rejection::Position);
    }
    if !c.velocity.contains(v0) {
        return Some(Rejection::Velocity);
    }
    if !c.wrench.contains(dynamics.output_wrench(x, x_ref, w_ref)) {
        return Some(Rejection::Wrench);
    }
    let k = dynamics.stiffness;
    let monotone = k > 0.0 && k * s.dt / dynamics.damping <= 1.0;
    let equilibrium_ok = if k > 0.0 {
        let x_eq = x_ref + (w - w_ref) / k;
        c.position.contains(x_eq) && c.wrench.contains(w) && c.velocity.contains(0.0)
    } else {
        w == w_ref && c.velocity.contains(0.0)
    };
    let mut quiet = 0;
    for _ in 0..s.horizon {
        let v = dynamics.velocity(x, x_ref, w, w_ref);
        if !c.velocity.contains(v) {
            return Some(Rejection::Velocity);
        }
        x += s.dt * v;
        if !c.position.contains(x) {
            return Some(Rejection::Position);
        }
        if !c.wrench.contains(dynamics.output_wrench(x, x_ref, w_ref)) {
            return Some(Rejection::Wrench);
        }
        if v.abs() < s.settle_velocity {
            quiet += 1;
            if quiet >= s.settle_steps && equilibrium_ok && (monotone || k == 0.0) {
                return None;
            }
        } else {
            quiet = 0;
        }
    }
    None
}

pub fn simulate_admissible(o: &Point, dynamics: &AxisDynamics, c: &AxisConstraints, s: &SimSettings) -> bool {
    check_point(o, dynamics, c, s).is_none()
}
