//! Domain-adapted regression of mid-level perceptual music features.
//!
//! The pipeline has three model-building steps: a supervised
//! receptive-field-regularized residual regressor, adversarial domain
//! adaptation through a gradient reversal layer, and teacher-student
//! distillation with ensemble-averaged pseudo-labels. Supporting modules
//! cover data manifests, spectrogram extraction and evaluation metrics.

#![allow(clippy::field_reassign_with_default, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod cli;
pub mod da;
pub mod data;
pub mod distill;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
