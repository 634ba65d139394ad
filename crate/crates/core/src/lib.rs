//! Model-based reinforcement learning for two-zone HVAC setpoint control.

pub mod agent;
mod codec;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod experience;
pub mod imitation;
pub mod mpc;
pub mod nn;
pub mod plant;
pub mod report;
pub mod types;

pub use error::{Error, Result};
pub use types::{Observation, RawAction, ACT_DIM, OBS_DIM};
