//! Targeted data generation for text classifiers.
//!
//! Finds subgroups of a validation set where a trained classifier fails,
//! estimates which of them are amenable to augmentation (generalization vs.
//! interference in context), and augments the chosen ones with generated,
//! oracle- or human-labeled examples.

pub mod amenability;
pub mod augment;
pub mod baselines;
pub mod data;
pub mod discovery;
pub mod embed;
pub mod error;
pub mod model;
pub mod run;
pub mod session;
pub mod synthetic;
pub mod util;

pub use error::{Result, TdgError};
