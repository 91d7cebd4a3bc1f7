//! Review service and command-line front end for the fin pipeline.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod service;

pub use error::{AppError, Result};
pub use pipeline::{DetectionParams, DetectorKind, Pipeline};
