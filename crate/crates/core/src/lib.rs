//! Tactical mesh simulation with a synchronized digital twin, federated
//! multi-agent reinforcement learning and generative scenario training.

pub mod agent;
pub mod bench;
pub mod error;
pub mod fed;
pub mod netsim;
pub mod nn;
pub mod rng;
pub mod scengen;
pub mod trainer;
pub mod twin;

pub use error::{Error, Result};
