//! First-order base-velocity tracker standing in for the locomotion policy.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Planar base channels: `[vx, vy, wz]`.
pub const PLANAR: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseTrackerParams {
    /// Lag time constants for `[vx, vy, wz]`, s.
    pub time_constants: [f64; PLANAR],
    /// Symmetric saturation for `[vx, vy, wz]`.
    pub saturation: [f64; PLANAR],
    /// Tracking noise std as a fraction of the commanded magnitude per channel.
    pub noise: [f64; PLANAR],
}

impl Default for BaseTrackerParams {
    fn default() -> Self {
        Self { time_constants: [0.12, 0.12, 0.15], saturation: [1.0, 0.8, 1.5], noise: [0.05, 0.05, 0.05] }
    }
}

impl BaseTrackerParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.time_constants.iter().any(|t| !(*t > 0.0)) {
            return Err("tracker time constants must be > 0".into());
        }
        if self.saturation.iter().chain(&self.noise).any(|v| !(*v >= 0.0)) {
            return Err("tracker saturation and noise must be >= 0".into());
        }
        Ok(())
    }

    /// Draws a target perturbation scaled by the command; a zero command stays exact.
    pub fn sample_noise<R: Rng + ?Sized>(&self, command: &[f64; PLANAR], rng: &mut R) -> [f64; PLANAR] {
        std::array::from_fn(|i| self.noise[i] * command[i].abs() * rng.sample::<f64, _>(StandardNormal))
    }
}

/// One Euler step of `tau dv/dt = target - v`, then saturation. The gain is
/// capped at 1 so `tau <= dt` reaches the target in a single step.
pub fn base_tracker_step(
    params: &BaseTrackerParams,
    current: &[f64; PLANAR],
    command: &[f64; PLANAR],
    perturbation: &[f64; PLANAR],
    dt: f64,
) -> [f64; PLANAR] {
    std::array::from_fn(|i| {
        let a = (dt / params.time_constants[i]).min(1.0);
        let target = command[i] + perturbation[i];
        let s = params.saturation[i];
        (current[i] + a * (target - current[i])).clamp(-s, s)
    })
}
