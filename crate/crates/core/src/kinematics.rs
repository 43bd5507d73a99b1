//! Serial-arm kinematics and the whole-body joint-velocity mapping.
//!
//! Everything here is expressed in the robot base frame unless a name says
//! otherwise. Jacobian rows follow the crate-wide `[linear; angular]` order.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::{skew, Frame, Mat3, Pose, Rotation, Twist, Vec3, Vec6};

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("arm model must have at least one joint")]
    NoJoints,
    #[error("joint {joint}: axis must be non-zero")]
    ZeroAxis { joint: usize },
    #[error("joint {joint}: lower limit {lower} is not below upper limit {upper}")]
    BadLimits { joint: usize, lower: f64, upper: f64 },
    #[error("expected {expected} joint values, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("J J^T is singular (reciprocal condition {rcond:.3e}); use a positive damping factor")]
    Singular { rcond: f64 },
    #[error("desired twist must be in the world frame, got {0}")]
    WrongFrame(Frame),
    #[error("cannot read arm model {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid arm model JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lower: f64,
    pub upper: f64,
}

impl JointLimits {
    pub fn contains(&self, q: f64) -> bool {
        q >= self.lower && q <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    /// Unit rotation axis in the joint frame.
    pub axis: Vec3,
    /// Fixed transform from the previous joint frame to this one.
    pub offset: Pose,
    pub limits: JointLimits,
}

/// Revolute serial chain, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    mount: Pose,
    joints: Vec<Joint>,
    tool: Pose,
}

/// JSON document layout for [`ArmModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmModelDoc {
    #[serde(default)]
    pub mount: FixedTransformDoc,
    pub joints: Vec<JointDoc>,
    #[serde(default)]
    pub tool: FixedTransformDoc,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixedTransformDoc {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl FixedTransformDoc {
    fn to_pose(&self) -> Pose {
        let [r, p, y] = self.rpy;
        Pose::new(Rotation::from_rpy(r, p, y), Vec3::from(self.translation))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointDoc {
    pub axis: [f64; 3],
    pub offset_translation: [f64; 3],
    #[serde(default)]
    pub offset_rpy: [f64; 3],
    pub limits: [f64; 2],
}

impl ArmModel {
    pub fn new(mount: Pose, joints: Vec<Joint>, tool: Pose) -> Result<Self, KinematicsError> {
        if joints.is_empty() {
            return Err(KinematicsError::NoJoints);
        }
        let mut joints = joints;
        for (i, j) in joints.iter_mut().enumerate() {
            let n = j.axis.norm();
            if !(n > 0.0) {
                return Err(KinematicsError::ZeroAxis { joint: i });
            }
            j.axis /= n;
            if !(j.limits.lower < j.limits.upper) {
                return Err(KinematicsError::BadLimits {
                    joint: i,
                    lower: j.limits.lower,
                    upper: j.limits.upper,
                });
            }
        }
        Ok(Self { mount, joints, tool })
    }

    pub fn from_doc(doc: &ArmModelDoc) -> Result<Self, KinematicsError> {
        let joints = doc
            .joints
            .iter()
            .map(|j| {
                let [r, p, y] = j.offset_rpy;
                Joint {
                    axis: Vec3::from(j.axis),
                    offset: Pose::new(Rotation::from_rpy(r, p, y), Vec3::from(j.offset_translation)),
                    limits: JointLimits { lower: j.limits[0], upper: j.limits[1] },
                }
            })
            .collect();
        Self::new(doc.mount.to_pose(), joints, doc.tool.to_pose())
    }

    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        Self::from_doc(&serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| KinematicsError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// Six-joint arm roughly the size of a D1-class manipulator: 0.12 m riser,
    /// 0.30 m upper arm, 0.28 m forearm, 0.10 m wrist stack. The arm points along
    /// base +x at zero configuration and sits on top of the trunk.
    pub fn default_arm() -> Self {
        let lim = |a: f64| JointLimits { lower: -a, upper: a };
        let joint = |axis: Vec3, t: Vec3, l: JointLimits| Joint {
            axis,
            offset: Pose::from_translation(t),
            limits: l,
        };
        let joints = vec![
            joint(Vec3::z(), Vec3::new(0.0, 0.0, 0.12), lim(2.7)),
            joint(Vec3::y(), Vec3::zeros(), lim(1.6)),
            joint(Vec3::y(), Vec3::new(0.30, 0.0, 0.0), lim(2.6)),
            joint(Vec3::x(), Vec3::new(0.28, 0.0, 0.0), lim(2.7)),
            joint(Vec3::y(), Vec3::zeros(), lim(1.6)),
            joint(Vec3::x(), Vec3::new(0.10, 0.0, 0.0), lim(2.7)),
        ];
        Self::new(Pose::from_translation(Vec3::new(0.10, 0.0, 0.08)), joints, Pose::identity())
            .expect("default arm is valid")
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn mount(&self) -> &Pose {
        &self.mount
    }

    pub fn tool(&self) -> &Pose {
        &self.tool
    }

    fn check_len(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch { expected: self.dof(), found: q.len() });
        }
        Ok(())
    }

    /// End-effector pose in the base frame.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Pose, KinematicsError> {
        self.check_len(q)?;
        let mut t = self.mount;
        for (j, &qi) in self.joints.iter().zip(q) {
            t = t * j.offset * Pose::new(Rotation::from_axis_angle(&j.axis, qi), Vec3::zeros());
        }
        Ok(t * self.tool)
    }

    /// Geometric Jacobian (6 x n) in the base frame, with the linear rows taken
    /// at the end-effector origin.
    pub fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>, KinematicsError> {
        Ok(self.fk_and_jacobian(q)?.1)
    }

    pub fn fk_and_jacobian(&self, q: &[f64]) -> Result<(Pose, DMatrix<f64>), KinematicsError> {
        self.check_len(q)?;
        let n = self.dof();
        let mut axes = Vec::with_capacity(n);
        let mut t = self.mount;
        for (j, &qi) in self.joints.iter().zip(q) {
            t = t * j.offset;
            axes.push((t.rotation * j.axis, t.translation));
            t = t * Pose::new(Rotation::from_axis_angle(&j.axis, qi), Vec3::zeros());
        }
        let ee = t * self.tool;
        let mut jac = DMatrix::zeros(6, n);
        for (i, (z, p)) in axes.iter().enumerate() {
            let lin = z.cross(&(ee.translation - p));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(z);
        }
        Ok((ee, jac))
    }
}

/// `J^T (J J^T + lambda^2 I)^-1`, evaluated as written.
pub fn damped_pinv(j: &DMatrix<f64>, lambda_dls: f64) -> Result<DMatrix<f64>, KinematicsError> {
    let rows = j.nrows();
    let a = j * j.transpose() + DMatrix::identity(rows, rows) * (lambda_dls * lambda_dls);
    if lambda_dls == 0.0 {
        let sv = a.singular_values();
        let max = sv.max();
        let min = sv.min();
        let rcond = if max > 0.0 { min / max } else { 0.0 };
        if rcond < 1e-13 {
            return Err(KinematicsError::Singular { rcond });
        }
    }
    // A is symmetric, so J^T A^-1 = (A^-1 J)^T.
    let solved = match a.clone().cholesky() {
        Some(ch) => ch.solve(j),
        None => a
            .lu()
            .solve(j)
            .ok_or(KinematicsError::Singular { rcond: 0.0 })?,
    };
    Ok(solved.transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
}

impl JointState {
    pub fn at_rest(positions: Vec<f64>) -> Self {
        let n = positions.len();
        Self { positions, velocities: vec![0.0; n] }
    }

    /// Euler step with limit clamping; a joint that hits a limit has its
    /// velocity component zeroed.
    pub fn integrate(&mut self, model: &ArmModel, qdot: &[f64], dt: f64) {
        for (i, joint) in model.joints().iter().enumerate() {
            let mut v = qdot[i];
            let mut q = self.positions[i] + v * dt;
            if q > joint.limits.upper {
                q = joint.limits.upper;
                v = 0.0;
            } else if q < joint.limits.lower {
                q = joint.limits.lower;
                v = 0.0;
            }
            self.positions[i] = q;
            self.velocities[i] = v;
        }
    }
}

/// Base pose and twist (world frame) plus the arm joint state.
#[derive(Debug, Clone, PartialEq)]
pub struct WholeBodyState {
    pub base_pose: Pose,
    pub base_twist: Twist,
    /// Time derivative of the base rotation.
    pub base_rotation_rate: Mat3,
    pub arm: JointState,
}

impl WholeBodyState {
    pub fn new(base_pose: Pose, base_twist: Twist, arm: JointState) -> Self {
        let base_rotation_rate = skew(&base_twist.angular) * base_pose.rotation.matrix();
        Self { base_pose, base_twist, base_rotation_rate, arm }
    }
}

/// Arm joint velocities that realize `desired` (world frame) on top of the
/// motion the base already provides.
pub fn whole_body_joint_velocities(
    state: &WholeBodyState,
    desired: &Twist,
    model: &ArmModel,
    lambda_dls: f64,
) -> Result<DVector<f64>, KinematicsError> {
    if desired.frame != Frame::World {
        return Err(KinematicsError::WrongFrame(desired.frame));
    }
    let (ee_base, jac) = model.fk_and_jacobian(&state.arm.positions)?;
    let residual_lin =
        desired.linear - state.base_twist.linear - state.base_rotation_rate * ee_base.translation;
    let residual_ang = desired.angular - state.base_twist.angular;
    let r_wb = state.base_pose.rotation.matrix().transpose();
    let mut rhs = DVector::zeros(6);
    rhs.fixed_rows_mut::<3>(0).copy_from(&(r_wb * residual_lin));
    rhs.fixed_rows_mut::<3>(3).copy_from(&(r_wb * residual_ang));
    Ok(damped_pinv(&jac, lambda_dls)? * rhs)
}

/// World-frame end-effector twist from base motion plus arm joint velocities.
pub fn end_effector_twist(
    state: &WholeBodyState,
    model: &ArmModel,
    qdot: &[f64],
) -> Result<Twist, KinematicsError> {
    let (ee_base, jac) = model.fk_and_jacobian(&state.arm.positions)?;
    let rel = &jac * DVector::from_column_slice(qdot);
    let r = state.base_pose.rotation.matrix();
    let v_rel = Vec3::new(rel[0], rel[1], rel[2]);
    let w_rel = Vec3::new(rel[3], rel[4], rel[5]);
    let linear =
        state.base_twist.linear + state.base_rotation_rate * ee_base.translation + r * v_rel;
    let angular = state.base_twist.angular + r * w_rel;
    Ok(Twist::new(linear, angular, Frame::World))
}

/// End-effector pose in the world frame.
pub fn end_effector_pose(state: &WholeBodyState, model: &ArmModel) -> Result<Pose, KinematicsError> {
    Ok(state.base_pose * model.forward_kinematics(&state.arm.positions)?)
}

pub fn twist_vector(t: &Twist) -> Vec6 {
    t.to_vector()
}
