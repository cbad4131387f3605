//! Fault-aware retraining toolkit for weight-stationary systolic arrays.
//!
//! The crate is organised around the three stages of resilience-driven
//! retraining:
//!
//! 1. [`resilience::profile`] injects random permanent PE faults at several
//!    fault rates and measures how many epochs of masked retraining a
//!    pre-trained classifier needs to get back to an accuracy target.
//! 2. [`resilience::select_budget`] turns that table into a per-chip epoch
//!    budget from the chip's own fault rate.
//! 3. [`numnet::train_masked`] performs the retraining with the chip's
//!    fault-aware pruning masks enforced.
//!
//! [`fleet`] runs the whole flow over a population of simulated chips and
//! compares it with fixed-epoch retraining. [`faultsim`] owns the fault model
//! and [`dataio`] provides the datasets.

pub mod dataio;
pub mod error;
pub mod faultsim;
pub mod fleet;
pub mod numnet;
pub mod resilience;
pub mod seed;

pub use error::{Error, Result};
