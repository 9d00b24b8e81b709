//! mtrlab — a desk-scale multimodal motion prediction lab.
//!
//! The crate implements the full pipeline: synthetic traffic scenarios,
//! agent-centric scene encoding with a local-attention transformer encoder,
//! a motion-query-pair transformer decoder emitting Gaussian-mixture
//! trajectories, the training objective, post-processing (NMS, joint
//! combination, ensembling) and evaluation metrics. Everything runs at
//! 64-bit precision on CPU so analytic gradients can be validated against
//! finite differences.

pub mod ablation;
pub mod autodiff;
pub mod evaluation;
pub mod generator;
pub mod intention;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod polyline;
pub mod postprocess;
pub mod scene;
pub mod trainer;
pub mod decoder;
pub mod encoder;
pub mod error;

pub use error::{Error, Result};
