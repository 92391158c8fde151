//! Temporally decoupled diffusion planning.
//!
//! Trajectories are split into temporal segments grouped into macro-groups,
//! each noised at its own diffusion time. A transformer denoiser with
//! per-group adaptive layer normalization refines k-means trajectory anchors,
//! and inference fuses a full-sequence path with a path conditioned on a
//! weakly-noised far-term prior.

pub mod error;
pub mod guidance;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod scene;
pub mod schedule;
pub mod training;
pub mod vocabulary;

pub use error::{Error, Result};
