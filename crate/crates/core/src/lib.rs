//! Desk-scale video-language pre-training on detector region features, with
//! global video-sentence contrastive alignment and bidirectional region-word
//! alignment, plus the data plumbing, training loop, and retrieval metrics
//! around it.

pub mod alignment;
pub mod config;
pub mod datamodel;
pub mod dataset;
pub mod encoders;
pub mod cost;
pub mod error;
pub mod export;
pub mod graph;
pub mod retrieval;
pub mod synthetic;
pub mod training;
pub mod tensor;

pub use config::ModelConfig;
pub use error::{DataError, ModelError};
pub use tensor::Tensor;
