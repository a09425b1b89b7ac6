use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator of the per-anchor contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Positive plus negatives (InfoNCE).
    #[default]
    WithPositive,
    /// Negatives only, as the objective is literally written.
    NegativesOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Learned projections on sentence and patch states before the dot product.
    pub projected: bool,
    /// Divide co-attention logits by `sqrt(d_model)`.
    pub scaled: bool,
}

/// Architecture and objective shape shared by every module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_text_layers: usize,
    pub n_image_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    /// Longest token, patch or target sequence any positional table covers.
    pub max_len: usize,
    /// Raw patch feature width.
    pub patch_dim: usize,
    pub vocab_size: usize,
    /// Contrastive temperature.
    pub tau: f64,
    pub denominator: Denominator,
    pub fusion: FusionConfig,
    /// Add learned positions to text tokens. Off only for diagnostics.
    pub text_positions: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_text_layers: 2,
            n_image_layers: 2,
            n_decoder_layers: 2,
            d_ff: 128,
            max_len: 256,
            patch_dim: 16,
            vocab_size: 64,
            tau: 0.05,
            denominator: Denominator::WithPositive,
            fusion: FusionConfig::default(),
            text_positions: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_text_layers", self.n_text_layers),
            ("n_image_layers", self.n_image_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("patch_dim", self.patch_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_shape() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_image_layers, c.n_decoder_layers);
        assert!(c.d_ff > c.d_model);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn parses_partial_toml() {
        let c: ModelConfig = toml::from_str("d_model = 32\n[fusion]\nscaled = true\n").unwrap();
        assert_eq!(c.d_model, 32);
        assert!(c.fusion.scaled);
        assert_eq!(c.n_heads, 4);
    }
}
