//! Player-engagement modelling: corpus ingestion, windowing and labelling,
//! time-conditioned classifiers and the cross-validated evaluation harness.

pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod preprocess;
pub mod synth;
pub mod timecond;

pub use error::{Error, Result};
