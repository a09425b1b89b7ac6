//! Visual extractor, text encoder and image encoder.
//!
//! The visual extractor projects raw patch features into model width and adds a
//! learned position per patch. The text encoder embeds the framed findings and
//! reads one sentence state per `[CLS]`. The image encoder runs Transformer
//! layers over the projected patches.

pub mod blocks;
mod config;

use rand::Rng;

pub use blocks::{causal_mask, key_padding_mask, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention, MASKED};
pub use config::{Denominator, FusionConfig, ModelConfig};

use crate::corpus::{PatchFeatures, PAD};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct VisualExtractor {
    pub projection: Linear,
    pub positions: ParamId,
}

impl VisualExtractor {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            projection: Linear::new(store, "visual.projection", cfg.patch_dim, cfg.d_model, cfg.init_std, rng)?,
            positions: store.add_randn("visual.positions", &[cfg.max_len, cfg.d_model], cfg.init_std, rng)?,
        })
    }

    /// `im_proj = patches · W + b + position[0..P]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        patches: &PatchFeatures,
    ) -> Result<Var> {
        let max_len = store.value(self.positions).rows();
        if patches.count() > max_len {
            return Err(Error::Length(format!(
                "{} patches exceed max_len {max_len}",
                patches.count()
            )));
        }
        let expected = store.value(self.projection.weight).rows();
        if patches.width() != expected {
            return Err(Error::Shape(format!(
                "patch width {} but the extractor expects {expected}",
                patches.width()
            )));
        }
        let x = tape.constant(patches.tensor().clone());
        let proj = self.projection.forward(tape, store, x)?;
        let table = tape.param(store, self.positions);
        let idx: Vec<usize> = (0..patches.count()).collect();
        let pos = tape.gather_rows(table, &idx)?;
        tape.add(proj, pos)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub use_positions: bool,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let tokens = store.add_randn("text.tokens", &[cfg.vocab_size, cfg.d_model], cfg.init_std, rng)?;
        let positions = store.add_randn("text.positions", &[cfg.max_len, cfg.d_model], cfg.init_std, rng)?;
        let layers = (0..cfg.n_text_layers)
            .map(|i| {
                EncoderLayer::new(store, &format!("text.layer{i}"), cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.init_std, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tokens,
            positions,
            layers,
            final_norm: LayerNorm::new(store, "text.final_norm", cfg.d_model)?,
            use_positions: cfg.text_positions,
        })
    }

    /// Returns `(h, h_cls)`: every token state, and the states at `cls_positions`.
    /// PAD tokens are masked out as attention keys.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        token_ids: &[usize],
        cls_positions: &[usize],
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<(Var, Var)> {
        let n = token_ids.len();
        let max_len = store.value(self.positions).rows();
        if n == 0 {
            return Err(Error::Empty("text encoder input has no tokens".into()));
        }
        if n > max_len {
            return Err(Error::Length(format!("{n} tokens exceed max_len {max_len}")));
        }
        let table = tape.param(store, self.tokens);
        let mut x = tape.embedding(table, token_ids)?;
        if self.use_positions {
            let pos_table = tape.param(store, self.positions);
            let idx: Vec<usize> = (0..n).collect();
            let pos = tape.gather_rows(pos_table, &idx)?;
            x = tape.add(x, pos)?;
        }
        let pads: Vec<bool> = token_ids.iter().map(|&t| t == PAD).collect();
        let mask = pads.iter().any(|&p| p).then(|| key_padding_mask(n, &pads));
        for layer in &self.layers {
            x = layer.forward(tape, store, x, mask.as_ref(), trace.as_deref_mut())?;
        }
        let h = self.final_norm.forward(tape, store, x)?;
        let h_cls = tape.gather_rows(h, cls_positions)?;
        Ok((h, h_cls))
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

impl ImageEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let layers = (0..cfg.n_image_layers)
            .map(|i| {
                EncoderLayer::new(store, &format!("image.layer{i}"), cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.init_std, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            final_norm: LayerNorm::new(store, "image.final_norm", cfg.d_model)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        im_proj: Var,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let mut x = im_proj;
        for layer in &self.layers {
            x = layer.forward(tape, store, x, None, trace.as_deref_mut())?;
        }
        self.final_norm.forward(tape, store, x)
    }
}

/// Encoder outputs for one report, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct EncodedPair {
    /// `n × d_model` token states.
    pub h: Var,
    /// `M × d_model` sentence states.
    pub h_cls: Var,
    /// `P × d_model` image states.
    pub c: Var,
    /// `P × d_model` projected patches.
    pub im_proj: Var,
}

#[cfg(test)]
mod tests;
