//! Deterministic simulation of fleet-scale silent data corruption testing:
//! maintenance-window scanning versus always-on in-production slices.

pub mod analytics;
pub mod config;
pub mod error;
pub mod fleet;
pub mod hash;
pub mod model;
pub mod par;
pub mod pattern;
pub mod ripple;
pub mod rng;
pub mod scanner;
pub mod selfcheck;
pub mod sim;

pub use config::SimConfig;
pub use error::{Error, Result};
