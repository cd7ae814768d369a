//! Temporal action detection trained from single-timestamp narrations.
//!
//! The crate covers the full pipeline: multimodal feature ingest and early
//! fusion, a class-aware attention MIL detector (plus class-agnostic and
//! frame-supervised baselines), intensity-based post-processing with NMS,
//! mAP@tIoU evaluation, and a synthetic benchmark generator.

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod ingest;
pub mod kvconfig;
pub mod model;
pub mod numkernel;
pub mod postprocess;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
