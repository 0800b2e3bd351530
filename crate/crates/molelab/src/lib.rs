//! molelab: a laboratory for studying availability attacks that poison a
//! classifier with its own most confusable training samples.
//!
//! The crate trains small softmax MLPs from scratch, ranks "mole" samples by
//! the probability the victim assigns them to another class, assembles
//! class-balanced poison batches, and measures the damage in both offline and
//! class-incremental settings. See the `examples/` directory for one runnable
//! walkthrough per capability.

pub mod attack;
pub mod cl;
pub mod data;
pub mod error;
pub mod idx;
pub mod model;
pub mod moles;
pub mod optimize;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
