//! Closed-loop simulation of the legged manipulator under external wrenches.

pub mod calibration;
pub mod gait;
pub mod harness;
pub mod log;
pub mod rewards;
pub mod scenario;
pub mod tracker;

pub use gait::{FootSample, GaitSynth, GaitSynthParams, TrunkState};
pub use rewards::{reward_registry, FootState, RewardContext, RewardParams, RewardSuite, RewardTerm, TermKind, TERM_NAMES};
pub use tracker::{base_tracker_step, BaseTrackerParams, PLANAR};
pub use harness::{run_scenario, RunMetrics, SimError, SimResources, Simulation, StepRecord};
pub use scenario::{Scenario, ScenarioError};
