//! Base-twist estimation: reduced trunk model, leg odometry, a Kalman filter
//! with a learned model-error correction, and an output low-pass.

pub mod dataset;
pub mod dynamics;
pub mod filter;
pub mod net;
pub mod noise;
pub mod strategy;

use nalgebra::{Matrix6, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::Vec6;

pub use dynamics::{
    feature_names, features, leg_odometry, model_increment, reduced_dynamics, FootMeasurement, LegMeasurement,
    RigidBodyParams, FEATURE_DIM, NUM_LEGS,
};
pub use filter::{kf_predict, kf_update, low_pass, KalmanFilter, Prediction};
pub use net::{ModelErrorNet, NetError, TrainConfig, TrainReport, TrainingSample};
pub use noise::{sample_observation_noise, NoiseError, NoiseSampler};
pub use strategy::{estimator_registry, EstimatorConfig, VelocityEstimator};

pub type Mat6 = Matrix6<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("measurement covariance must be symmetric positive definite (min eigenvalue {0:e})")]
    BadMeasurementCovariance(f64),
    #[error("process-noise floor must be >= 0, got {0}")]
    BadProcessFloor(f64),
    #[error("rigid-body parameters invalid: mass > 0, SPD inertia and dt > 0 required")]
    BadParams,
    #[error("low-pass coefficient must lie in [0, 1], got {0}")]
    BadAlpha(f64),
}

/// Filter state. `x` is ordered `[omega; v]`, world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub x: Vec6,
    pub p: Mat6,
    pub x_filtered: Vec6,
    pub t: f64,
}

impl EstimatorState {
    pub fn new(x: Vec6, p: Mat6) -> Self {
        Self { x, p, x_filtered: x, t: 0.0 }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.p).eigenvalues.min()
    }

    pub fn asymmetry(&self) -> f64 {
        (self.p - self.p.transpose()).amax()
    }

    pub fn angular(&self) -> [f64; 3] {
        [self.x_filtered[0], self.x_filtered[1], self.x_filtered[2]]
    }

    pub fn linear(&self) -> [f64; 3] {
        [self.x_filtered[3], self.x_filtered[4], self.x_filtered[5]]
    }
}

impl Default for EstimatorState {
    fn default() -> Self {
        Self::new(Vec6::zeros(), Mat6::identity() * 1e-2)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(try_from = "RawNoise")]
pub struct NoiseParams {
    r: Mat6,
    q_floor: Vec6,
}

#[derive(Deserialize)]
struct RawNoise {
    /// Diagonal of the measurement covariance.
    measurement_diag: Option<[f64; 6]>,
    measurement: Option<Mat6>,
    /// Scalar floor applied to every component.
    q_floor: Option<f64>,
    /// Per-component floor, `[w; v]` order; wins over `q_floor`.
    q_floor_diag: Option<[f64; 6]>,
}

impl TryFrom<RawNoise> for NoiseParams {
    type Error = EstimatorError;

    fn try_from(raw: RawNoise) -> Result<Self, Self::Error> {
        let r = match (raw.measurement, raw.measurement_diag) {
            (Some(m), _) => m,
            (None, Some(d)) => Mat6::from_diagonal(&Vec6::from_row_slice(&d)),
            (None, None) => NoiseParams::default().r,
        };
        match (raw.q_floor_diag, raw.q_floor) {
            (Some(d), _) => NoiseParams::with_floor_diag(r, d),
            (None, Some(q)) => NoiseParams::new(r, q),
            (None, None) => NoiseParams::with_floor_diag(r, NoiseParams::default().q_floor.into()),
        }
    }
}

impl Serialize for NoiseParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("NoiseParams", 2)?;
        st.serialize_field("measurement", &self.r)?;
        let d: [f64; 6] = self.q_floor.into();
        st.serialize_field("q_floor_diag", &d)?;
        st.end()
    }
}

impl NoiseParams {
    pub fn new(r: Mat6, q_floor: f64) -> Result<Self, EstimatorError> {
        Self::with_floor_diag(r, [q_floor; 6])
    }

    pub fn with_floor_diag(r: Mat6, q_floor: [f64; 6]) -> Result<Self, EstimatorError> {
        let sym = (r + r.transpose()) * 0.5;
        let min = SymmetricEigen::new(sym).eigenvalues.min();
        if !(min > 0.0) || (r - r.transpose()).amax() > 1e-12 {
            return Err(EstimatorError::BadMeasurementCovariance(min));
        }
        if let Some(bad) = q_floor.iter().find(|q| !(**q >= 0.0)) {
            return Err(EstimatorError::BadProcessFloor(*bad));
        }
        Ok(Self { r: sym, q_floor: Vec6::from_row_slice(&q_floor) })
    }

    pub fn measurement(&self) -> &Mat6 {
        &self.r
    }

    /// Diagonal PSD matrix added to `eps eps^T`.
    pub fn process_floor(&self) -> Mat6 {
        Mat6::from_diagonal(&self.q_floor)
    }
}

impl Default for NoiseParams {
    fn default() -> Self {
        let d = Vec6::new(1e-4, 1e-4, 1e-4, 2.5e-3, 2.5e-3, 2.5e-3);
        Self { r: Mat6::from_diagonal(&d), q_floor: Vec6::repeat(1e-8) }
    }
}
