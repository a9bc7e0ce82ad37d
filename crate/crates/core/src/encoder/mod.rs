//! Tiny dual encoder: an image tower over pre-patchified feature grids and a
//! text tower over class-label token sequences, trained contrastively.
//! Both towers expose per-layer injection hooks for prompt residuals.

pub(crate) mod attention;
mod model;
mod tokenizer;

pub use attention::{AttentionInjection, NoInjection};
pub use model::{contrastive_loss, classify, DualEncoder, EmbeddingBatch, ImageBatch, TextBatch};
pub use tokenizer::Tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and objective hyperparameters shared by both towers.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vision_depth: usize,
    pub text_depth: usize,
    /// Embedding dimension d.
    pub width: usize,
    pub heads: usize,
    /// Image tokens per side; an image carries patch_grid^2 patches.
    pub patch_grid: usize,
    /// Feature channels per patch.
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub contrastive_temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vision_depth: 4,
            text_depth: 4,
            width: 64,
            heads: 4,
            patch_grid: 4,
            patch_dim: 16,
            vocab_size: 256,
            max_text_len: 16,
            contrastive_temperature: 0.07,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vision_depth", self.vision_depth),
            ("text_depth", self.text_depth),
            ("width", self.width),
            ("heads", self.heads),
            ("patch_grid", self.patch_grid),
            ("patch_dim", self.patch_dim),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.contrastive_temperature <= 0.0 {
            return Err(Error::Config(
                "encoder.contrastive_temperature must be > 0".to_string(),
            ));
        }
        if self.vocab_size <= tokenizer::RESERVED_TOKENS {
            return Err(Error::Config(format!(
                "encoder.vocab_size must exceed the {} reserved ids",
                tokenizer::RESERVED_TOKENS
            )));
        }
        Ok(())
    }

    /// Image tokens per instance.
    pub fn image_tokens(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    /// Feed-forward hidden width.
    pub fn mlp_hidden(&self) -> usize {
        2 * self.width
    }
}
