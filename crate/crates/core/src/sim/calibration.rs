//! Seeded excitation runs that record estimation data and fit the
//! model-error network used by `kf+nn`.

use std::path::Path;
use std::sync::Arc;

use crate::estimator::dataset::{training_samples, EstimationRow};
use crate::estimator::{ModelErrorNet, TrainReport};
use crate::governor::{build_bundle, MoasBundle};

use super::harness::{SimError, SimResources, Simulation};
use super::scenario::{ProfileFrame, Scenario, Segment, WrenchProfile};

/// Planar pushes and a yaw twist at incommensurate frequencies.
pub fn excitation_profile(duration: f64) -> WrenchProfile {
    WrenchProfile {
        frame: ProfileFrame::World,
        segments: vec![Segment::Sine {
            start: 0.0,
            end: duration,
            offset: [0.0; 6],
            amplitude: [9.0, 7.0, 0.0, 0.0, 0.0, 0.8],
            frequency: [0.21, 0.33, 0.0, 0.0, 0.0, 0.17],
            phase: [0.0, 1.0, 0.0, 0.0, 0.0, 0.5],
        }],
    }
}

/// Same robot, sensors and controller as `s`, driven by the excitation
/// profile with the oracle estimator and no governor.
pub fn calibration_scenario(s: &Scenario) -> Scenario {
    let cal = &s.estimator.calibration;
    let mut c = s.clone();
    c.name = format!("{}-calibration", s.name);
    c.duration = cal.duration;
    c.seed = cal.seed;
    c.profile = excitation_profile(cal.duration);
    c.governor.enabled = false;
    c.governor.axes = [false; 4];
    c.estimator.mode = "truth".into();
    c.estimator.net_path = None;
    c
}

pub fn record_calibration(s: &Scenario) -> Result<Vec<EstimationRow>, SimError> {
    let c = calibration_scenario(s);
    let mut sim = Simulation::new(c.clone(), SimResources::default())?;
    sim.record_estimation(true);
    for _ in 0..c.control_steps() {
        sim.advance()?;
    }
    Ok(sim.take_estimation_rows())
}

pub fn train_from_rows(rows: &[EstimationRow], s: &Scenario) -> Result<(ModelErrorNet, TrainReport), SimError> {
    Ok(ModelErrorNet::train(&training_samples(rows), &s.estimator.calibration.train)?)
}

pub fn train_for_scenario(s: &Scenario) -> Result<(ModelErrorNet, TrainReport), SimError> {
    train_from_rows(&record_calibration(s)?, s)
}

/// Loads or trains the network when the estimator needs one, and builds
/// admissible sets for governed axes unless a bundle is supplied.
pub fn prepare_resources(
    s: &Scenario,
    base_dir: Option<&Path>,
    moas: Option<Arc<MoasBundle>>,
) -> Result<SimResources, SimError> {
    let net = if s.estimator.mode == "kf+nn" {
        let net = match &s.estimator.net_path {
            Some(p) => {
                let path = match base_dir {
                    Some(d) if Path::new(p).is_relative() => d.join(p),
                    _ => Path::new(p).to_path_buf(),
                };
                ModelErrorNet::load(&path)?
            }
            None => train_for_scenario(s)?.0,
        };
        Some(Arc::new(net))
    } else {
        None
    };
    let axes = s.governor.governed_axes();
    let moas = match moas {
        Some(b) => Some(b),
        None if !axes.is_empty() => {
            let cfgs: Vec<_> = axes.iter().map(|a| s.moas_config(*a)).collect();
            let (bundle, _) = build_bundle(&cfgs)?;
            Some(Arc::new(bundle))
        }
        None => None,
    };
    Ok(SimResources { net, moas })
}
