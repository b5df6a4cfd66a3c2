// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::GPT2_VOCAB_SIZE;

/// Names accepted by [`ModelConfig::preset`].
pub const PRESET_NAMES: [&str; 4] = ["gpt2-small", "gpt2-medium", "gpt2-large", "tiny-test"];

/// Architecture hyperparameters of a GPT-2-family decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub n_ctx: usize,
    pub vocab_size: usize,
    pub layer_norm_eps: f32,
}

impl ModelConfig {
    fn gpt2(n_layers: usize, d_model: usize, n_heads: usize) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_head: d_model / n_heads,
            d_mlp: 4 * d_model,
            n_ctx: 1024,
            vocab_size: GPT2_VOCAB_SIZE,
            layer_norm_eps: 1e-5,
        }
    }

    /// Looks up a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "gpt2-small" | "gpt2" => Self::gpt2(12, 768, 12),
            "gpt2-medium" => Self::gpt2(24, 1024, 16),
            "gpt2-large" => Self::gpt2(36, 1280, 20),
            // Full GPT-2 vocabulary so the real tokenizer drives fixtures.
            "tiny-test" => ModelConfig {
                n_ctx: 128,
                ..Self::gpt2(2, 16, 2)
            },
            other => {
                return Err(Error::Domain(format!(
                    "unknown model preset `{other}` (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_ctx == 0 || self.vocab_size == 0 {
            return Err(Error::Domain(format!("degenerate model config {self:?}")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Domain(format!(
                "n_heads ({}) * d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        Ok(())
    }

    /// Parameter count, excluding the tied unembedding.
    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * self.d_mlp + self.d_mlp)
            + (self.d_mlp * d + d);
        self.vocab_size * d + self.n_ctx * d + self.n_layers * per_block + 2 * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        for name in PRESET_NAMES {
            let cfg = ModelConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.d_mlp, 4 * cfg.d_model);
        }
        let small = ModelConfig::preset("gpt2-small").unwrap();
        assert_eq!((small.n_layers, small.d_model), (12, 768));
        assert_eq!(small.n_params(), 124_439_808);
        let large = ModelConfig::preset("gpt2-large").unwrap();
        assert_eq!((large.n_layers, large.d_model, large.n_heads), (36, 1280, 20));
        let tiny = ModelConfig::preset("tiny-test").unwrap();
        assert_eq!((tiny.n_layers, tiny.d_model), (2, 16));
    }

    #[test]
    fn unknown_preset() {
        assert!(ModelConfig::preset("llama").is_err());
    }
}
