//! Joint scene parsing and dense correspondence estimation with a shared
//! encoder, iterative GRU refinement and uncertainty-gated self-training.

pub mod backbone;
pub mod config;
pub mod correlation;
pub mod cta;
pub mod data;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plan;
pub mod refinement;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
