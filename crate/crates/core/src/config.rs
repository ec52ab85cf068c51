//! Model configuration and presets.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Hyperparameters shared by the encoders, the loss, and checkpoint layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden size of both encoders and of region features.
    pub d: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Token-id space of the text encoder (0=PAD, 1=CLS, 2=UNK, content >= 3).
    pub vocab_size: usize,
    /// Rows of the temporal position table: the most frames a sample may use.
    pub max_frames: usize,
    /// Rows of the word position table: the longest token sequence
    /// (CLS included) the text encoder accepts.
    pub max_words: usize,
    /// Per-frame region budget for selection.
    pub object_num: usize,
    /// Temperature of all four contrastive losses.
    pub sigma: f64,
    pub use_refinement: bool,
    pub use_local_losses: bool,
    /// Dropout probability on attention weights and MLP hidden activations
    /// during training. 0 keeps every forward pass deterministic.
    pub dropout: f64,
}

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
/// First id available to content tokens.
pub const FIRST_CONTENT_ID: u32 = 3;

impl ModelConfig {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d: 32,
            video_layers: 2,
            text_layers: 2,
            heads: 4,
            vocab_size,
            max_frames: 8,
            max_words: 32,
            object_num: 30,
            sigma: 0.05,
            use_refinement: true,
            use_local_losses: true,
            dropout: 0.0,
        }
    }

    /// Mirror of the ViT-base / DistilBERT scale the full method targets.
    pub fn full(vocab_size: usize) -> Self {
        ModelConfig {
            d: 768,
            video_layers: 12,
            text_layers: 6,
            heads: 12,
            vocab_size,
            max_frames: 8,
            max_words: 64,
            object_num: 30,
            sigma: 0.05,
            use_refinement: true,
            use_local_losses: true,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "heads ({}) must divide hidden size d ({})",
                self.heads, self.d
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(ModelError::BadConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.vocab_size <= FIRST_CONTENT_ID as usize {
            return Err(ModelError::BadConfig(format!(
                "vocab_size {} leaves no room for content tokens",
                self.vocab_size
            )));
        }
        if self.max_frames == 0 || self.max_words < 2 {
            return Err(ModelError::BadConfig(
                "max_frames must be >= 1 and max_words >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} out of [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}
