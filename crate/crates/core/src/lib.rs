//! Gaussian-splatting guided mixture of experts for weakly supervised
//! temporal anomaly detection.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`signal`]: peak detection on score series and Gaussian pseudo-label rendering
//! - [`losses`]: top-k multiple-instance terms, BCE and the splatting loss
//! - [`nn`]: tensors, a reverse-mode tape, and transformer layers
//! - [`model`]: task encoder, experts, gate and the soft-MoE variant
//! - [`data`]: synthetic weakly-labelled videos, resampling, batching, containers
//! - [`metrics`]: ROC AUC, average precision and their abnormal-only variants
//! - [`train`]: AdamW, k-means and the three-stage training pipeline

pub mod data;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod signal;
pub mod train;

pub use error::{ContainerError, Error, Result};
