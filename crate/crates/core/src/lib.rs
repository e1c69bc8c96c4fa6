//! Data-driven voltage control for radial distribution feeders.
//!
//! Line reactances are re-estimated from a sliding window of voltage and
//! injection measurements, and a linear program dispatches DER reactive
//! power against the estimated linearized model.

pub mod bundled;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod lindistflow;
pub mod metrics;
pub mod network;
pub mod plant;
pub mod scenario;
pub mod trace;

pub use error::{Error, Result};
