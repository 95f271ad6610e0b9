use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the toy denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Width of the latent token stream.
    pub model_dim: usize,
    /// Text embedding width `d`.
    pub text_dim: usize,
    /// Query/key width `a` of cross-attention.
    pub attn_dim: usize,
    /// Value width `v` of cross-attention.
    pub value_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    /// Text sequence length `n`.
    pub max_tokens: usize,
    pub train_timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 16,
            width: 16,
            channels: 4,
            model_dim: 32,
            text_dim: 32,
            attn_dim: 32,
            value_dim: 32,
            heads: 2,
            blocks: 4,
            ff_mult: 4,
            max_tokens: 16,
            train_timesteps: 200,
        }
    }
}

impl ModelConfig {
    /// Small two-block variant used for gradient verification.
    pub fn tiny() -> Self {
        ModelConfig {
            height: 4,
            width: 4,
            channels: 2,
            model_dim: 8,
            text_dim: 8,
            attn_dim: 8,
            value_dim: 8,
            heads: 2,
            blocks: 2,
            ff_mult: 2,
            max_tokens: 6,
            train_timesteps: 20,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("model_dim", self.model_dim),
            ("text_dim", self.text_dim),
            ("attn_dim", self.attn_dim),
            ("value_dim", self.value_dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("ff_mult", self.ff_mult),
            ("max_tokens", self.max_tokens),
            ("train_timesteps", self.train_timesteps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("attn_dim", self.attn_dim),
            ("value_dim", self.value_dim),
        ] {
            if v % self.heads != 0 {
                return Err(Error::config(
                    format!("model.{name}"),
                    format!("{v} is not divisible by {} heads", self.heads),
                ));
            }
        }
        Ok(())
    }
}
