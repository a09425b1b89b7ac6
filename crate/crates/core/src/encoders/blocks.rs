//! Pre-norm Transformer building blocks shared by the encoders and the decoder.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Additive logit used to mask attention; `exp` of it underflows to exactly 0.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_randn(format!("{name}.weight"), &[d_in, d_out], std, rng)?,
            bias: store.add_zeros(format!("{name}.bias"), &[d_out])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_ones(format!("{name}.gain"), &[d])?,
            bias: store.add_zeros(format!("{name}.bias"), &[d])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, std, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, std, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, std, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, std, rng)?,
            n_heads,
        })
    }

    /// Scaled dot-product attention of `queries` over `keys_values`.
    ///
    /// `mask`, when given, is added to every head's `[n_q × n_kv]` logits.
    /// Per-head attention weights are pushed onto `trace` when provided.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        keys_values: Var,
        mask: Option<&Tensor>,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let q = self.query.forward(tape, store, queries)?;
        let k = self.key.forward(tape, store, keys_values)?;
        let v = self.value.forward(tape, store, keys_values)?;
        let d = tape.value(q).cols();
        let dk = d / self.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let logits = tape.matmul_nt(qh, kh)?;
            let mut logits = tape.scale(logits, scale);
            if let Some(m) = mask {
                logits = tape.add_const(logits, m)?;
            }
            let weights = tape.softmax(logits);
            if let Some(t) = trace.as_deref_mut() {
                t.push(weights);
            }
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.output.forward(tape, store, joined)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_ff: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, d_ff, std, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d, std, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.outer.forward(tape, store, h)
    }
}

/// `x + SelfAttn(LN(x))`, then `x + FF(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        d_ff: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, n_heads, std, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d, d_ff, std, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: Option<&Tensor>,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let n = self.attn_norm.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n, n, mask, trace)?;
        let x = tape.add(x, a)?;
        let n = self.ff_norm.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, n)?;
        tape.add(x, f)
    }
}

/// `[n × n]` mask hiding the listed key columns from every query.
pub fn key_padding_mask(n: usize, hidden_keys: &[bool]) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for r in 0..n {
        for (c, &hide) in hidden_keys.iter().enumerate() {
            if hide {
                m.data_mut()[r * n + c] = MASKED;
            }
        }
    }
    m
}

/// `[n × n]` mask letting position `t` see only positions `≤ t`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for r in 0..n {
        for c in r + 1..n {
            m.data_mut()[r * n + c] = MASKED;
        }
    }
    m
}
