//! Self-supervised pre-training for point cloud video.
//!
//! The pipeline masks spatio-temporal point tubes, reconstructs the masked
//! geometry with a shared decoder, and aligns latent / motion / global
//! representations against an EMA momentum encoder. Everything runs on a
//! small reverse-mode autodiff substrate ([`autodiff`]) so the whole stack is
//! gradient-checked end to end, and a synthetic point-cloud-video generator
//! ([`dataio`]) feeds the evaluation harness (linear probe, fine-tune,
//! few-shot, segmentation).

pub mod autodiff;
pub mod backbone;
pub mod dataio;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod masking;
pub mod metrics;
pub mod objectives;
pub mod rng;

pub use error::{Error, Result};
