//! Superclass-guided robust classification.
//!
//! A variational encoder splits its latent code into a superclass-relevant
//! half and an irrelevant half. Gradient attribution maps of a classifier on
//! each half are aligned with guidance maps (and their complements) from a
//! frozen guidance model, and only the relevant half is used for prediction.
//! Robustness is measured as worst-group accuracy over (label, attribute)
//! groups.

pub mod attribution;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod kv;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
