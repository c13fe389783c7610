//! Dynamic state estimation for fault detection in inverter-fed RL loads.

pub mod error;
pub mod estimator;
pub mod linalg;
pub mod models;
pub mod protection;
pub mod simulator;
pub mod waveform;

pub use error::{Error, Result};
