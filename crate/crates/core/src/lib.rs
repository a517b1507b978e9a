//! Multimodal semantic segmentation with reliability-weighted cross-modal
//! interaction inside a shared encoder and a per-stage fusion module.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod interaction;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod par;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
