pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod synthgen;
pub mod taskmodels;

pub use error::{Error, Result};
