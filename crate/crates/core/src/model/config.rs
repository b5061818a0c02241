use serde::{Deserialize, Serialize};

use crate::error::{LvrError, Result};

/// Transformation applied to a final hidden state before it is compared with a
/// visual target or fed back as the next latent input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LvrHeadKind {
    Identity,
    /// Two d→d linear layers with a GELU between them.
    Mlp2,
    /// Gated linear unit with a 3·d intermediate width.
    Glu3x,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub patch_size: usize,
    pub image_channels: usize,
    pub lvr_head_kind: LvrHeadKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 64,
            max_seq_len: 64,
            patch_size: 28,
            image_channels: 3,
            lvr_head_kind: LvrHeadKind::Identity,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 32,
            max_seq_len: 48,
            patch_size: 4,
            image_channels: 3,
            lvr_head_kind: LvrHeadKind::Identity,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(LvrError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(LvrError::Config("n_layers, vocab_size and max_seq_len must be positive".into()));
        }
        if self.patch_size == 0 || self.image_channels == 0 {
            return Err(LvrError::Config("patch_size and image_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }
}
