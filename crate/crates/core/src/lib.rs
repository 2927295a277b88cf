//! HLGFA: high-low resolution guided feature alignment for unsupervised
//! anomaly detection.
//!
//! Normality is learned by aligning the feature pyramid of a downsampled
//! view of an image to the pyramid of the full-resolution view, both
//! produced by a shared frozen extractor. At inference, anomalies surface
//! as regions where that cross-resolution alignment breaks down.

pub mod archive;
pub mod augment;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod guidance;
pub mod metrics;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
