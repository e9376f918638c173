//! Multimodal PMI embedding laboratory.
//!
//! The crate simulates two-modality patient token data from a log-linear
//! model, reduces it to summary-level co-occurrence counts, estimates
//! embeddings with three association-matrix estimators and their gradient
//! counterparts, and evaluates the results.

pub mod contrast;
pub mod cooc;
pub mod error;
pub mod evalkit;
pub mod gen;
pub mod harness;
pub mod linalg;
pub mod pmi;
pub mod seed;
pub mod spectral;

pub use error::{ClaimeError, Result};
