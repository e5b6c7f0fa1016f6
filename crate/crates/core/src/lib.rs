//! Distributed estimation of oscillation modes with consensus ADMM, and
//! detection of local estimators that inject bias into their reports.

pub mod admm;
pub mod attacks;
pub mod detection;
pub mod error;
pub mod harness;
pub mod prony;
pub mod signalgen;

pub use error::{Error, Result};
