//! Impression decoder: causal self-attention, cross-attention over the memory
//! `e = [c_fused, h_cls_fused, h]`, teacher-forced loss and greedy/beam search.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, BOS, CLS, EOS, PAD, SEP};
use crate::encoders::{causal_mask, FeedForward, LayerNorm, Linear, ModelConfig, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_in_place, ParamId, ParamStore, Tape, Tensor, Var};

/// Length normalization exponent for beam scores.
pub const BEAM_ALPHA: f64 = 0.7;

/// Tokens never emitted during generation.
const BLOCKED: [usize; 4] = [PAD, BOS, CLS, SEP];

/// Row-concatenated decoder memory.
#[derive(Clone, Copy, Debug)]
pub struct DecoderMemory {
    pub e: Var,
    /// Start offsets of the patch, sentence and token segments.
    pub segment_bounds: [usize; 3],
    pub rows: usize,
}

/// Concatenates the present segments in the order patches, sentences, tokens.
/// An absent segment has zero length; a present segment must have rows.
pub fn build_memory(
    tape: &mut Tape,
    c: Option<Var>,
    h_cls: Option<Var>,
    h: Option<Var>,
) -> Result<DecoderMemory> {
    let mut parts = Vec::new();
    let mut bounds = [0; 3];
    let mut offset = 0;
    let mut width = None;
    for (slot, (name, seg)) in [("patch", c), ("sentence", h_cls), ("token", h)].into_iter().enumerate() {
        bounds[slot] = offset;
        let Some(v) = seg else { continue };
        let shape = tape.shape(v).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("{name} segment must be a matrix, got {shape:?}")));
        }
        if shape[0] == 0 {
            return Err(Error::Empty(format!("{name} segment has no rows")));
        }
        match width {
            Some(w) if w != shape[1] => {
                return Err(Error::Shape(format!("{name} segment width {} vs {w}", shape[1])));
            }
            _ => width = Some(shape[1]),
        }
        offset += shape[0];
        parts.push(v);
    }
    if parts.is_empty() {
        return Err(Error::Empty("decoder memory has no segments".into()));
    }
    let e = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };
    Ok(DecoderMemory {
        e,
        segment_bounds: bounds,
        rows: offset,
    })
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, std) = (cfg.d_model, cfg.init_std);
        Ok(Self {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.n_heads, std, rng)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.n_heads, std, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.d_ff, std, rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, memory: Var, mask: &Tensor) -> Result<Var> {
        let n = self.self_norm.forward(tape, store, x)?;
        let a = self.self_attn.forward(tape, store, n, n, Some(mask), None)?;
        let x = tape.add(x, a)?;
        let n = self.cross_norm.forward(tape, store, x)?;
        let a = self.cross_attn.forward(tape, store, n, memory, None, None)?;
        let x = tape.add(x, a)?;
        let n = self.ff_norm.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, n)?;
        tape.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub output: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let tokens = store.add_randn("decoder.tokens", &[cfg.vocab_size, cfg.d_model], cfg.init_std, rng)?;
        let positions = store.add_randn("decoder.positions", &[cfg.max_len, cfg.d_model], cfg.init_std, rng)?;
        let layers = (0..cfg.n_decoder_layers)
            .map(|i| DecoderLayer::new(store, &format!("decoder.layer{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            tokens,
            positions,
            layers,
            final_norm: LayerNorm::new(store, "decoder.final_norm", cfg.d_model)?,
            output: Linear::new(store, "decoder.output", cfg.d_model, cfg.vocab_size, cfg.init_std, rng)?,
        })
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.value(self.tokens).rows()
    }

    /// Next-token logits for every prefix of `input_ids`: row `t` sees
    /// `input_ids[..=t]` and the whole memory.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, memory: Var, input_ids: &[usize]) -> Result<Var> {
        let n = input_ids.len();
        let max_len = store.value(self.positions).rows();
        if n == 0 {
            return Err(Error::Empty("decoder input has no tokens".into()));
        }
        if n > max_len {
            return Err(Error::Length(format!("{n} decoder positions exceed max_len {max_len}")));
        }
        if tape.value(memory).rows() == 0 {
            return Err(Error::Empty("decoder memory has no rows".into()));
        }
        let table = tape.param(store, self.tokens);
        let x = tape.embedding(table, input_ids)?;
        let pos_table = tape.param(store, self.positions);
        let idx: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(pos_table, &idx)?;
        let mut x = tape.add(x, pos)?;
        let mask = causal_mask(n);
        for layer in &self.layers {
            x = layer.forward(tape, store, x, memory, &mask)?;
        }
        let x = self.final_norm.forward(tape, store, x)?;
        self.output.forward(tape, store, x)
    }

    /// Teacher-forced logits for a framed target `BOS y_1 … y_L EOS`:
    /// `(L + 1) × |V|`, row `t` predicting target token `t + 1`.
    pub fn decode_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: &DecoderMemory,
        target_ids: &[usize],
    ) -> Result<Var> {
        check_framed(target_ids)?;
        self.forward(tape, store, memory.e, &target_ids[..target_ids.len() - 1])
    }

    /// Mean negative log-likelihood of the shifted target, PAD ignored.
    pub fn generation_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: &DecoderMemory,
        target_ids: &[usize],
    ) -> Result<Var> {
        let logits = self.decode_forward(tape, store, memory, target_ids)?;
        tape.cross_entropy(logits, &target_ids[1..], Some(PAD))
    }

    /// Log-probabilities of the next token after `prefix`, blocked tokens at −∞.
    fn next_log_probs(&self, store: &ParamStore, memory: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mem = tape.constant(memory.clone());
        let logits = self.forward(&mut tape, store, mem, prefix)?;
        let v = tape.value(logits);
        let mut row = v.row(v.rows() - 1).to_vec();
        for &b in &BLOCKED {
            if b < row.len() {
                row[b] = f64::NEG_INFINITY;
            }
        }
        log_softmax_in_place(&mut row);
        Ok(row)
    }

    /// Decodes an impression from fixed memory values.
    pub fn generate(
        &self,
        store: &ParamStore,
        memory: &Tensor,
        mode: DecodeMode,
        max_gen_len: usize,
        vocab: Option<&Vocab>,
    ) -> Result<GeneratedImpression> {
        if memory.rows() == 0 {
            return Err(Error::Empty("decoder memory has no rows".into()));
        }
        let max_len = store.value(self.positions).rows();
        let cap = max_gen_len.min(max_len.saturating_sub(1));
        let greedy = self.greedy(store, memory, cap)?;
        let best = match mode {
            DecodeMode::Greedy => greedy,
            DecodeMode::Beam { width } => {
                let beam = self.beam(store, memory, cap, width.max(1))?;
                if beam.score >= greedy.score {
                    beam
                } else {
                    greedy
                }
            }
        };
        let text = vocab.map(|v| v.decode(&best.tokens)).unwrap_or_default();
        Ok(GeneratedImpression {
            token_ids: best.tokens,
            text,
            terminated: best.terminated,
            score: best.score,
        })
    }

    fn greedy(&self, store: &ParamStore, memory: &Tensor, cap: usize) -> Result<Hypothesis> {
        let mut prefix = vec![BOS];
        let mut logp = 0.0;
        let mut terminated = false;
        while prefix.len() - 1 < cap {
            let lp = self.next_log_probs(store, memory, &prefix)?;
            let tok = argmax(&lp);
            logp += lp[tok];
            if tok == EOS {
                terminated = true;
                break;
            }
            prefix.push(tok);
        }
        Ok(Hypothesis::finish(prefix, logp, terminated))
    }

    fn beam(&self, store: &ParamStore, memory: &Tensor, cap: usize, width: usize) -> Result<Hypothesis> {
        let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
        let mut done: Vec<Hypothesis> = Vec::new();
        for _ in 0..cap {
            if alive.is_empty() || done.len() >= width {
                break;
            }
            // (logp, token, parent)
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (pi, (prefix, lp0)) in alive.iter().enumerate() {
                let lp = self.next_log_probs(store, memory, prefix)?;
                for (tok, &l) in lp.iter().enumerate() {
                    if l.is_finite() {
                        cands.push((lp0 + l, tok, pi));
                    }
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(width);
            for (lp, tok, pi) in cands {
                if next.len() >= width {
                    break;
                }
                let mut prefix = alive[pi].0.clone();
                if tok == EOS {
                    done.push(Hypothesis::finish(prefix, lp, true));
                    if done.len() >= width {
                        break;
                    }
                } else {
                    prefix.push(tok);
                    next.push((prefix, lp));
                }
            }
            alive = next;
        }
        done.extend(alive.into_iter().map(|(p, lp)| Hypothesis::finish(p, lp, false)));
        done.into_iter()
            .fold(None::<Hypothesis>, |best, h| match best {
                Some(b) if b.score >= h.score => Some(b),
                _ => Some(h),
            })
            .ok_or_else(|| Error::Empty("beam search produced no hypothesis".into()))
    }
}

fn check_framed(target_ids: &[usize]) -> Result<()> {
    if target_ids.len() < 2 || target_ids[0] != BOS || !target_ids.contains(&EOS) {
        return Err(Error::Validation("target must be framed BOS … EOS".into()));
    }
    Ok(())
}

/// First index of the maximum; ties go to the lowest token id.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

struct Hypothesis {
    tokens: Vec<usize>,
    terminated: bool,
    score: f64,
}

impl Hypothesis {
    /// `prefix` starts with BOS; the score is `logp / steps^α` where `steps`
    /// counts emitted tokens, EOS included.
    fn finish(prefix: Vec<usize>, logp: f64, terminated: bool) -> Self {
        let tokens = prefix[1..].to_vec();
        let steps = tokens.len() + usize::from(terminated);
        Self {
            tokens,
            terminated,
            score: length_normalized(logp, steps),
        }
    }
}

pub fn length_normalized(logp: f64, steps: usize) -> f64 {
    if steps == 0 {
        0.0
    } else {
        logp / (steps as f64).powf(BEAM_ALPHA)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam { width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImpression {
    /// Emitted tokens without BOS or EOS.
    pub token_ids: Vec<usize>,
    pub text: String,
    pub terminated: bool,
    /// Length-normalized log-probability.
    pub score: f64,
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_decoder_layers: 1,
            d_ff: 12,
            max_len: 16,
            vocab_size: 10,
            init_std: 0.5,
            ..ModelConfig::default()
        }
    }

    fn setup(seed: u64) -> (ParamStore, Decoder, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &small(), &mut rng).unwrap();
        let mem = Tensor::randn(&[5, 8], 1.0, &mut rng);
        (store, dec, mem)
    }

    fn logits(store: &ParamStore, dec: &Decoder, mem: &Tensor, target: &[usize]) -> Tensor {
        let mut tape = Tape::new();
        let m = tape.constant(mem.clone());
        let memory = build_memory(&mut tape, Some(m), None, None).unwrap();
        let l = dec.decode_forward(&mut tape, store, &memory, target).unwrap();
        tape.value(l).clone()
    }

    #[test]
    fn memory_layout() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 3], 1.0));
        let s = tape.constant(Tensor::full(&[1, 3], 2.0));
        let h = tape.constant(Tensor::full(&[4, 3], 3.0));
        let m = build_memory(&mut tape, Some(c), Some(s), Some(h)).unwrap();
        assert_eq!(m.rows, 7);
        assert_eq!(m.segment_bounds, [0, 2, 3]);
        assert_eq!(tape.value(m.e).at(2, 0), 2.0);

        let swapped = build_memory(&mut tape, Some(h), Some(s), Some(c)).unwrap();
        assert_ne!(tape.value(swapped.e), tape.value(m.e));

        let empty = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(build_memory(&mut tape, Some(c), Some(empty), Some(h)), Err(Error::Empty(_))));
        let narrow = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(build_memory(&mut tape, Some(c), Some(narrow), None), Err(Error::Shape(_))));
    }

    #[test]
    fn logits_are_causal() {
        let (store, dec, mem) = setup(0);
        let target = [BOS, 6, 7, 8, 9, EOS];
        let base = logits(&store, &dec, &mem, &target);
        assert_eq!(base.shape(), &[5, 10]);
        for t in 1..5 {
            let mut edited = target;
            edited[t] = if target[t] == 6 { 7 } else { 6 };
            let other = logits(&store, &dec, &mem, &edited);
            for r in 0..5 {
                let diff: f64 = base.row(r).iter().zip(other.row(r)).map(|(a, b)| (a - b).abs()).sum();
                if r < t {
                    assert_eq!(diff, 0.0, "row {r} moved after editing {t}");
                } else {
                    assert!(diff > 0.0);
                }
            }
        }
        assert_eq!(base, logits(&store, &dec, &mem, &target));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let cfg = ModelConfig {
            vocab_size: 4,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &cfg, &mut rng).unwrap();
        store.set_value(dec.output.weight, Tensor::zeros(&[8, 4])).unwrap();
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::full(&[2, 8], 0.3));
        let memory = build_memory(&mut tape, Some(m), None, None).unwrap();
        let l = dec.generation_loss(&mut tape, &store, &memory, &[BOS, 3, 3, EOS]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_targets_and_overflow() {
        let (store, dec, mem) = setup(0);
        let mut tape = Tape::new();
        let m = tape.constant(mem);
        let memory = build_memory(&mut tape, Some(m), None, None).unwrap();
        assert!(dec.decode_forward(&mut tape, &store, &memory, &[6, 7]).is_err());
        let long: Vec<usize> = std::iter::once(BOS).chain(std::iter::repeat(6).take(20)).chain([EOS]).collect();
        assert!(matches!(dec.decode_forward(&mut tape, &store, &memory, &long), Err(Error::Length(_))));
    }

    #[test]
    fn beam_of_one_matches_greedy() {
        for seed in 0..6 {
            let (store, dec, mem) = setup(seed);
            let g = dec.generate(&store, &mem, DecodeMode::Greedy, 8, None).unwrap();
            let b = dec.generate(&store, &mem, DecodeMode::Beam { width: 1 }, 8, None).unwrap();
            assert_eq!(g, b);
        }
    }

    #[test]
    fn wider_beam_scores_at_least_greedy() {
        for seed in 0..6 {
            let (store, dec, mem) = setup(seed);
            let g = dec.generate(&store, &mem, DecodeMode::Greedy, 8, None).unwrap();
            let b = dec.generate(&store, &mem, DecodeMode::Beam { width: 3 }, 8, None).unwrap();
            assert!(b.score >= g.score);
        }
    }

    #[test]
    fn eos_peaked_model_emits_nothing() {
        let (mut store, dec, mem) = setup(1);
        let mut bias = vec![0.0; 10];
        bias[EOS] = 100.0;
        store.set_value(dec.output.bias, Tensor::vector(bias)).unwrap();
        let g = dec.generate(&store, &mem, DecodeMode::Greedy, 8, None).unwrap();
        assert!(g.token_ids.is_empty());
        assert!(g.terminated);
    }

    #[test]
    fn cap_limits_length() {
        let (mut store, dec, mem) = setup(1);
        let mut bias = vec![0.0; 10];
        bias[7] = 100.0;
        store.set_value(dec.output.bias, Tensor::vector(bias)).unwrap();
        for mode in [DecodeMode::Greedy, DecodeMode::Beam { width: 2 }] {
            let g = dec.generate(&store, &mem, mode, 5, None).unwrap();
            assert_eq!(g.token_ids, vec![7; 5]);
            assert!(!g.terminated);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (store, dec, mem) = setup(2);
        let err = grad_check(
            |t, v| {
                let memory = build_memory(t, Some(v[0]), None, None)?;
                dec.generation_loss(t, &store, &memory, &[BOS, 6, 8, EOS])
            },
            &[mem],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
