//! Expert-consistency estimation.
//!
//! Fits a model of expert decisions, measures how much each expert's cases
//! move a prediction, and marks the cases where the experts agree robustly.
//! Those decisions can stand in for outcome labels (amalgamation), route
//! predictions between two models (hybrid) or hand cases back to experts
//! (deferral).

pub mod amalgamation;
pub mod calibration;
pub mod consistency;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod glm;
pub mod influence;
pub mod oracles;
pub mod pipeline;
pub mod scenario;

pub use error::{Error, Result};
