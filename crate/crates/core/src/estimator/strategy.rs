//! Runtime-selectable base-twist estimators.

use std::sync::Arc;

use crate::registry::Registry;
use crate::spatial::Vec6;

use super::dynamics::{LegMeasurement, RigidBodyParams};
use super::filter::KalmanFilter;
use super::net::ModelErrorNet;
use super::{EstimatorState, Mat6, NoiseParams};

pub trait VelocityEstimator: Send {
    fn name(&self) -> &'static str;
    fn reset(&mut self, initial: &Vec6);
    /// Advances one estimator sample; returns the filtered `[omega; v]`.
    /// `truth` is only consulted by the oracle estimator.
    fn step(&mut self, legs: &LegMeasurement, truth: &Vec6) -> Vec6;
    fn state(&self) -> Option<&EstimatorState>;
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub params: RigidBodyParams,
    pub noise: NoiseParams,
    pub alpha_lp: f64,
    pub initial_covariance: f64,
    /// Required by `kf+nn`.
    pub net: Option<Arc<ModelErrorNet>>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            params: RigidBodyParams::default(),
            noise: NoiseParams::default(),
            alpha_lp: 0.3,
            initial_covariance: 1e-2,
            net: None,
        }
    }
}

struct Truth {
    state: EstimatorState,
}

impl VelocityEstimator for Truth {
    fn name(&self) -> &'static str {
        "truth"
    }

    fn reset(&mut self, initial: &Vec6) {
        self.state = EstimatorState::new(*initial, Mat6::zeros());
    }

    fn step(&mut self, _legs: &LegMeasurement, truth: &Vec6) -> Vec6 {
        self.state.x = *truth;
        self.state.x_filtered = *truth;
        *truth
    }

    fn state(&self) -> Option<&EstimatorState> {
        Some(&self.state)
    }
}

struct Filtered {
    name: &'static str,
    kf: KalmanFilter,
    p0: f64,
}

impl VelocityEstimator for Filtered {
    fn name(&self) -> &'static str {
        self.name
    }

    fn reset(&mut self, initial: &Vec6) {
        self.kf.state = EstimatorState::new(*initial, Mat6::identity() * self.p0);
    }

    fn step(&mut self, legs: &LegMeasurement, _truth: &Vec6) -> Vec6 {
        self.kf.step(legs).x_filtered
    }

    fn state(&self) -> Option<&EstimatorState> {
        Some(&self.kf.state)
    }
}

fn filtered(name: &'static str, cfg: &EstimatorConfig, net: ModelErrorNet) -> Result<Box<dyn VelocityEstimator>, String> {
    let init = EstimatorState::new(Vec6::zeros(), Mat6::identity() * cfg.initial_covariance);
    let kf = KalmanFilter::new(cfg.params, cfg.noise.clone(), cfg.alpha_lp, net, init).map_err(|e| e.to_string())?;
    Ok(Box::new(Filtered { name, kf, p0: cfg.initial_covariance }))
}

/// `truth`, `kf` (zeroed network) and `kf+nn` (trained network).
pub fn estimator_registry() -> Registry<dyn VelocityEstimator, EstimatorConfig> {
    let mut r: Registry<dyn VelocityEstimator, EstimatorConfig> = Registry::new("estimator");
    r.register("truth", |_| Ok(Box::new(Truth { state: EstimatorState::new(Vec6::zeros(), Mat6::zeros()) })));
    r.register("kf", |cfg| filtered("kf", cfg, ModelErrorNet::zeroed()));
    r.register("kf+nn", |cfg| {
        let net = cfg.net.as_ref().ok_or("a trained model-error network is required")?;
        filtered("kf+nn", cfg, (**net).clone())
    });
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::dynamics::FootMeasurement;
    use crate::spatial::{Rotation, Vec3};

    #[test]
    fn registry_names_and_requirements() {
        let r = estimator_registry();
        assert_eq!(r.names(), vec!["kf", "kf+nn", "truth"]);
        assert!(r.create("kf+nn", &EstimatorConfig::default()).is_err());
        let cfg = EstimatorConfig { net: Some(Arc::new(ModelErrorNet::zeroed())), ..Default::default() };
        assert_eq!(r.create("kf+nn", &cfg).unwrap().name(), "kf+nn");
    }

    #[test]
    fn truth_passes_through() {
        let mut e = estimator_registry().create("truth", &EstimatorConfig::default()).unwrap();
        let legs = LegMeasurement::new([FootMeasurement::default(); 4], Vec3::zeros(), Rotation::identity());
        let t = Vec6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        assert_eq!(e.step(&legs, &t), t);
    }
}
