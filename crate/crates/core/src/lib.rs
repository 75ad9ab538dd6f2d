//! Dynamic mesh trajectory compression, text-conditioned rectified-flow
//! animation, dataset curation and 4D mesh metrics.

pub mod checkpoint;
pub mod cli;
pub mod chunking;
pub mod config;
pub mod dataset;
pub mod error;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod selftest;
pub mod sgtt;
pub mod tensor;
pub mod topology;
pub mod toy;
pub mod vae;

pub use error::{Error, Result};
