//! Shared fixtures for the benchmarks under `benches/`.

use anatomist_core::corpus::{build_vocab, synth_generate, EncodedReport, SynthConfig, Vocab};
use anatomist_core::encoders::ModelConfig;
use anatomist_core::trainer::encode_all;
use anatomist_core::{Ablation, Model, Result};

/// A small synthetic batch encoded for `ablation`, with its vocabulary.
pub fn synth_batch(size: usize, ablation: Ablation) -> Result<(Vec<EncodedReport>, Vocab)> {
    let reports = synth_generate(&SynthConfig {
        corpus_size: size,
        ..SynthConfig::default()
    })?;
    let vocab = build_vocab(&reports, 1);
    let data = encode_all(&reports, &vocab, ablation)?;
    Ok((data, vocab))
}

/// Model at width `d` sized for `vocab`.
pub fn small_model(d: usize, vocab: &Vocab) -> Result<Model> {
    Model::new(
        ModelConfig {
            d_model: d,
            d_ff: 2 * d,
            vocab_size: vocab.len(),
            ..ModelConfig::default()
        },
        0,
    )
}

pub const ROUGE_REFERENCE: &str = "small left pleural effusion with adjacent atelectasis . no pneumothorax . \
                                   heart size is normal and the mediastinal contour is unchanged from the prior study";
pub const ROUGE_CANDIDATE: &str = "left pleural effusion is small with atelectasis nearby . heart size normal . \
                                   no pneumothorax and mediastinal contours are stable compared with prior";
