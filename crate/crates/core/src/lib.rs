//! Simulation and stability analysis of a pump-current actuated 1064 nm
//! laser locked to a molecular iodine hyperfine line with 3f detection.

pub mod analysis;
pub mod calibration;
pub mod iodine_reference;
pub mod detection;
pub mod laser;
pub mod runner;
pub mod servo;
