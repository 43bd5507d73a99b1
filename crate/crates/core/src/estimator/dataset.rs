//! Estimation dataset CSV, filter replay and error statistics.
//!
//! One row per estimator sample:
//! `t, model_*(6), true_*(6), <37 feature columns>, meas_*(6), odom_valid`.
//! `model_*` is the reduced-model prediction from the previous true state,
//! which is also stored in the `prior_*` feature slots; `true_*` is the
//! simulator's ground-truth twist at `t`.

use std::fs::File;
use std::path::Path;

use thiserror::Error;

use crate::spatial::Vec6;

use super::dynamics::{feature_names, FEATURE_DIM};
use super::filter::KalmanFilter;
use super::net::TrainingSample;
use super::strategy::EstimatorConfig;
use super::{EstimatorState, Mat6, ModelErrorNet};

pub const COMPONENTS: [&str; 6] = ["wx", "wy", "wz", "vx", "vy", "vz"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: missing columns [{}]; unexpected columns [{}]", missing.join(", "), unexpected.join(", "))]
    Schema { path: String, missing: Vec<String>, unexpected: Vec<String> },
    #[error("{path}: row {row}, column '{column}': cannot parse '{value}'")]
    Value { path: String, row: usize, column: String, value: String },
    #[error("dataset is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationRow {
    pub t: f64,
    pub x_model: Vec6,
    pub x_true: Vec6,
    pub phi: [f64; FEATURE_DIM],
    pub y_meas: Vec6,
    pub odom_valid: bool,
}

impl EstimationRow {
    pub fn prior(&self) -> Vec6 {
        Vec6::from_column_slice(&self.phi[..6])
    }

    /// Observed model error: ground truth minus model prediction.
    pub fn model_error(&self) -> Vec6 {
        self.x_true - self.x_model
    }
}

pub fn header() -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(COMPONENTS.iter().map(|c| format!("model_{c}")));
    h.extend(COMPONENTS.iter().map(|c| format!("true_{c}")));
    h.extend(feature_names());
    h.extend(COMPONENTS.iter().map(|c| format!("meas_{c}")));
    h.push("odom_valid".into());
    h
}

pub fn write_dataset(path: &Path, rows: &[EstimationRow]) -> Result<(), DatasetError> {
    let err = |source| DatasetError::Csv { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header()).map_err(err)?;
    for r in rows {
        let mut rec: Vec<String> = Vec::with_capacity(57);
        rec.push(r.t.to_string());
        rec.extend(r.x_model.iter().map(f64::to_string));
        rec.extend(r.x_true.iter().map(f64::to_string));
        rec.extend(r.phi.iter().map(f64::to_string));
        rec.extend(r.y_meas.iter().map(f64::to_string));
        rec.push(if r.odom_valid { "1".into() } else { "0".into() });
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

pub fn read_dataset(path: &Path) -> Result<Vec<EstimationRow>, DatasetError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| DatasetError::Csv { path: p.clone(), source: e.into() })?;
    let mut rd = csv::Reader::from_reader(file);
    let found: Vec<String> = rd
        .headers()
        .map_err(|source| DatasetError::Csv { path: p.clone(), source })?
        .iter()
        .map(str::to_string)
        .collect();
    let expected = header();
    if found != expected {
        let missing = expected.iter().filter(|c| !found.contains(c)).cloned().collect();
        let unexpected = found.iter().filter(|c| !expected.contains(c)).cloned().collect();
        return Err(DatasetError::Schema { path: p, missing, unexpected });
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|source| DatasetError::Csv { path: p.clone(), source })?;
        let mut vals = Vec::with_capacity(rec.len());
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| DatasetError::Value {
                path: p.clone(),
                row: i + 1,
                column: expected[j].clone(),
                value: field.to_string(),
            })?;
            vals.push(v);
        }
        let mut phi = [0.0; FEATURE_DIM];
        phi.copy_from_slice(&vals[13..13 + FEATURE_DIM]);
        rows.push(EstimationRow {
            t: vals[0],
            x_model: Vec6::from_column_slice(&vals[1..7]),
            x_true: Vec6::from_column_slice(&vals[7..13]),
            phi,
            y_meas: Vec6::from_column_slice(&vals[50..56]),
            odom_valid: vals[56] != 0.0,
        });
    }
    Ok(rows)
}

pub fn training_samples(rows: &[EstimationRow]) -> Vec<TrainingSample> {
    rows.iter()
        .map(|r| TrainingSample { features: r.phi.to_vec(), target: r.model_error() })
        .collect()
}

/// Runs the filter over logged increments and measurements. Returns the
/// filtered estimate per row.
pub fn replay(rows: &[EstimationRow], net: &ModelErrorNet, cfg: &EstimatorConfig) -> Result<Vec<Vec6>, DatasetError> {
    let first = rows.first().ok_or(DatasetError::Empty)?;
    let init = EstimatorState::new(first.prior(), Mat6::identity() * cfg.initial_covariance);
    let mut kf = KalmanFilter::new(cfg.params, cfg.noise.clone(), cfg.alpha_lp, net.clone(), init)
        .expect("estimator config validated by caller");
    Ok(rows
        .iter()
        .map(|r| {
            let increment = r.x_model - r.prior();
            kf.step_logged(&increment, &r.phi, &r.y_meas, r.odom_valid).x_filtered
        })
        .collect())
}

/// Per-component mean absolute error, RMSE and standard deviation of the error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mae: [f64; 6],
    pub rmse: [f64; 6],
    pub std: [f64; 6],
}

impl ErrorStats {
    pub fn compute(estimates: &[Vec6], truth: &[Vec6]) -> Self {
        let n = estimates.len().min(truth.len()).max(1) as f64;
        let mut s = ErrorStats { mae: [0.0; 6], rmse: [0.0; 6], std: [0.0; 6] };
        let mut mean = [0.0; 6];
        for (e, t) in estimates.iter().zip(truth) {
            for i in 0..6 {
                let d = e[i] - t[i];
                s.mae[i] += d.abs();
                s.rmse[i] += d * d;
                mean[i] += d;
            }
        }
        for i in 0..6 {
            s.mae[i] /= n;
            mean[i] /= n;
            s.rmse[i] = (s.rmse[i] / n).sqrt();
            s.std[i] = (s.rmse[i] * s.rmse[i] - mean[i] * mean[i]).max(0.0).sqrt();
        }
        s
    }

    /// RMS of the linear-velocity error over all three axes.
    pub fn linear_rmse(&self) -> f64 {
        ((self.rmse[3].powi(2) + self.rmse[4].powi(2) + self.rmse[5].powi(2)) / 3.0).sqrt()
    }

    /// Rows MAE, RMSE, STD; columns omega x/y/z then v x/y/z.
    pub fn table(&self) -> String {
        let mut out = format!("{:<6}", "");
        for c in ["w_x", "w_y", "w_z", "v_x", "v_y", "v_z"] {
            out.push_str(&format!("{c:>10}"));
        }
        out.push('\n');
        for (label, vals) in [("MAE", &self.mae), ("RMSE", &self.rmse), ("STD", &self.std)] {
            out.push_str(&format!("{label:<6}"));
            for v in vals {
                out.push_str(&format!("{v:>10.4}"));
            }
            out.push('\n');
        }
        out
    }
}
