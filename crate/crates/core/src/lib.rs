pub mod admittance;
pub mod estimator;
pub mod governor;
pub mod kinematics;
pub mod registry;
pub mod sim;
pub mod spatial;
