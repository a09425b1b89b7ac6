use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{CLS, SEP};
use crate::tensor::{grad_check, Tensor};

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_text_layers: 2,
        n_image_layers: 2,
        d_ff: 12,
        max_len: 24,
        patch_dim: 4,
        vocab_size: 12,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

struct Parts {
    store: ParamStore,
    visual: VisualExtractor,
    text: TextEncoder,
    image: ImageEncoder,
}

fn build(cfg: &ModelConfig, seed: u64) -> Parts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let visual = VisualExtractor::new(&mut store, cfg, &mut rng).unwrap();
    let text = TextEncoder::new(&mut store, cfg, &mut rng).unwrap();
    let image = ImageEncoder::new(&mut store, cfg, &mut rng).unwrap();
    Parts {
        store,
        visual,
        text,
        image,
    }
}

fn patches(p: usize, seed: u64) -> PatchFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchFeatures::new(Tensor::randn(&[p, 4], 1.0, &mut rng)).unwrap()
}

fn encode_text(parts: &Parts, ids: &[usize], cls: &[usize]) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let (h, hc) = parts.text.forward(&mut tape, &parts.store, ids, cls, None).unwrap();
    (tape.value(h).clone(), tape.value(hc).clone())
}

fn encode_image(parts: &Parts, p: &PatchFeatures) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let im = parts.visual.forward(&mut tape, &parts.store, p).unwrap();
    let c = parts.image.forward(&mut tape, &parts.store, im, None).unwrap();
    (tape.value(im).clone(), tape.value(c).clone())
}

const THREE_SENTENCES: [usize; 10] = [CLS, 6, 7, SEP, CLS, 8, SEP, CLS, 9, SEP];
const CLS_AT: [usize; 3] = [0, 4, 7];

#[test]
fn shapes_follow_the_input() {
    let parts = build(&small(), 0);
    let (h, hc) = encode_text(&parts, &THREE_SENTENCES, &CLS_AT);
    assert_eq!(h.shape(), &[10, 8]);
    assert_eq!(hc.shape(), &[3, 8]);
    for (r, &pos) in CLS_AT.iter().enumerate() {
        assert_eq!(hc.row(r), h.row(pos));
    }
    let (h1, _) = encode_text(&parts, &[7], &[0]);
    assert_eq!(h1.shape(), &[1, 8]);

    let (im, c) = encode_image(&parts, &patches(1, 0));
    assert_eq!(im.shape(), &[1, 8]);
    assert_eq!(c.shape(), &[1, 8]);
    let (_, c) = encode_image(&parts, &patches(6, 0));
    assert_eq!(c.shape(), &[6, 8]);
    assert!(c.is_finite());
}

#[test]
fn zero_patches_give_positions_plus_bias() {
    let mut parts = build(&small(), 1);
    let bias = Tensor::vector((0..8).map(|i| i as f64 * 0.1).collect());
    parts.store.set_value(parts.visual.projection.bias, bias.clone()).unwrap();
    let zero = PatchFeatures::new(Tensor::zeros(&[3, 4])).unwrap();
    let (im, _) = encode_image(&parts, &zero);
    let pos = parts.store.value(parts.visual.positions);
    for r in 0..3 {
        for j in 0..8 {
            assert_eq!(im.at(r, j), pos.at(r, j) + bias.data()[j]);
        }
    }
}

#[test]
fn encoding_is_deterministic_and_input_sensitive() {
    let parts = build(&small(), 2);
    let a = encode_image(&parts, &patches(4, 5));
    assert_eq!(a, encode_image(&parts, &patches(4, 5)));
    assert_ne!(a.1, encode_image(&parts, &patches(4, 6)).1);
    assert_eq!(encode_text(&parts, &THREE_SENTENCES, &CLS_AT), encode_text(&parts, &THREE_SENTENCES, &CLS_AT));
    let twin = build(&small(), 2);
    assert_eq!(encode_image(&twin, &patches(4, 5)), a);
}

#[test]
fn length_limits_are_enforced() {
    let parts = build(&small(), 0);
    let mut tape = Tape::new();
    let long = vec![6; 25];
    assert!(matches!(
        parts.text.forward(&mut tape, &parts.store, &long, &[0], None),
        Err(Error::Length(_))
    ));
    assert!(matches!(
        parts.visual.forward(&mut tape, &parts.store, &patches(25, 0)),
        Err(Error::Length(_))
    ));
    let wide = PatchFeatures::new(Tensor::zeros(&[2, 5])).unwrap();
    assert!(matches!(parts.visual.forward(&mut tape, &parts.store, &wide), Err(Error::Shape(_))));
}

#[test]
fn without_positions_sentence_swaps_permute_cls_rows() {
    let cfg = ModelConfig {
        text_positions: false,
        ..small()
    };
    let parts = build(&cfg, 3);
    let ids = [CLS, 6, 7, SEP, CLS, 8, 9, SEP];
    let swapped = [CLS, 8, 9, SEP, CLS, 6, 7, SEP];
    let (_, a) = encode_text(&parts, &ids, &[0, 4]);
    let (_, b) = encode_text(&parts, &swapped, &[0, 4]);
    for j in 0..8 {
        assert!((a.at(0, j) - b.at(1, j)).abs() < 1e-12);
        assert!((a.at(1, j) - b.at(0, j)).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let parts = build(&small(), 4);
    let mut tape = Tape::new();
    let mut trace = Vec::new();
    parts
        .text
        .forward(&mut tape, &parts.store, &[CLS, 6, 7, SEP, PAD, PAD], &[0], Some(&mut trace))
        .unwrap();
    let im = parts.visual.forward(&mut tape, &parts.store, &patches(5, 1)).unwrap();
    parts.image.forward(&mut tape, &parts.store, im, Some(&mut trace)).unwrap();
    assert_eq!(trace.len(), 2 * 2 + 2 * 2);
    for w in trace {
        let w = tape.value(w);
        for r in 0..w.rows() {
            let s: f64 = w.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn pad_embeddings_do_not_leak() {
    let mut parts = build(&small(), 5);
    let ids = [CLS, 6, 7, SEP, PAD, PAD];
    let (before, _) = encode_text(&parts, &ids, &[0]);
    let mut table = parts.store.value(parts.text.tokens).clone();
    for j in 0..8 {
        table.data_mut()[PAD * 8 + j] += 3.0 + j as f64;
    }
    parts.store.set_value(parts.text.tokens, table).unwrap();
    let (after, _) = encode_text(&parts, &ids, &[0]);
    for r in 0..4 {
        for j in 0..8 {
            assert!((before.at(r, j) - after.at(r, j)).abs() < 1e-10);
        }
    }
}

#[test]
fn encoder_stack_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        n_text_layers: 1,
        n_image_layers: 1,
        ..small()
    };
    let parts = build(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[3, 8], 0.5, &mut rng);
    let probe = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let err = grad_check(
        |t, v| {
            let c = parts.image.forward(t, &parts.store, v[0], None)?;
            let w = t.constant(probe.clone());
            let y = t.mul(c, w)?;
            Ok(t.sum(y))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
