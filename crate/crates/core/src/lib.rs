//! Multimodal few-shot temporal action detection.
//!
//! Videos arrive as precomputed snippet features. An episode pairs a few
//! annotated support videos per class with unlabeled query videos; the model
//! turns support videos and class names into multimodal prototypes, uses the
//! support foreground to regulate query features, and predicts per-snippet
//! class probabilities plus one temporal mask per snippet.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod episode;
pub mod error;
pub mod head;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod prompt;
pub mod protocol;
pub mod regulation;
pub mod tensor;
pub mod training;

pub use config::{ExperimentConfig, Mode, ModelConfig};
pub use error::{Error, Result};
pub use tensor::Matrix;
