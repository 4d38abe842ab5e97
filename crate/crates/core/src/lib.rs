//! Personalized learning with joint differential privacy: data model,
//! losses, privacy accounting, training paradigms and an experiment harness.

#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod domain;
pub mod error;
pub mod harness;
pub mod loss;
pub mod optim;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
