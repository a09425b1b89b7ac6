//! Full summarizer: encoders, alignment branch, co-attention and decoder,
//! wired according to the selected ablation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::pool;
use crate::corpus::{EncodedReport, TextView, Vocab};
use crate::decoder::{build_memory, DecodeMode, Decoder, DecoderMemory, GeneratedImpression};
use crate::encoders::{ImageEncoder, ModelConfig, TextEncoder, VisualExtractor};
use crate::error::{Error, Result};
use crate::fusion::{co_attend_on, FusionParams};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// The six model variants compared in the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Image only.
    BaseImage,
    /// Findings only.
    BaseFindings,
    /// Both modalities with co-attention.
    Base,
    /// `Base` plus the contrastive alignment loss.
    BaseDca,
    /// `Base` with anatomy-prompted findings.
    BaseAp,
    /// Prompts and alignment loss.
    #[default]
    BaseApDca,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::BaseImage,
        Ablation::BaseFindings,
        Ablation::Base,
        Ablation::BaseDca,
        Ablation::BaseAp,
        Ablation::BaseApDca,
    ];

    pub fn uses_image(self) -> bool {
        self != Ablation::BaseFindings
    }

    pub fn uses_text(self) -> bool {
        self != Ablation::BaseImage
    }

    pub fn uses_prompts(self) -> bool {
        matches!(self, Ablation::BaseAp | Ablation::BaseApDca)
    }

    pub fn uses_alignment(self) -> bool {
        matches!(self, Ablation::BaseDca | Ablation::BaseApDca)
    }

    pub fn text_view(self) -> TextView {
        if self.uses_prompts() {
            TextView::Prompted
        } else {
            TextView::Raw
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::BaseImage => "base_image",
            Ablation::BaseFindings => "base_findings",
            Ablation::Base => "base",
            Ablation::BaseDca => "base_dca",
            Ablation::BaseAp => "base_ap",
            Ablation::BaseApDca => "base_ap_dca",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub visual: VisualExtractor,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub fusion: Option<FusionParams>,
    pub decoder: Decoder,
}

/// Tape nodes produced for one report.
#[derive(Clone, Copy, Debug)]
pub struct ReportGraph {
    pub memory: DecoderMemory,
    /// Pooled pre-fusion image states, when the image branch is active.
    pub z_image: Option<Var>,
    /// Pooled pre-fusion sentence states, when the text branch is active.
    pub z_text: Option<Var>,
}

impl Model {
    /// Seeded initialization. Parameter creation order is fixed, so two models
    /// built from the same config and seed are bit-identical.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let visual = VisualExtractor::new(&mut store, &config, &mut rng)?;
        let text = TextEncoder::new(&mut store, &config, &mut rng)?;
        let image = ImageEncoder::new(&mut store, &config, &mut rng)?;
        let fusion = if config.fusion.projected {
            Some(FusionParams::new(&mut store, config.d_model, config.init_std, &mut rng)?)
        } else {
            None
        };
        let decoder = Decoder::new(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            visual,
            text,
            image,
            fusion,
            decoder,
        })
    }

    /// Records the encoders, co-attention and memory for one report.
    pub fn encode(&self, tape: &mut Tape, report: &EncodedReport, ablation: Ablation) -> Result<ReportGraph> {
        let store = &self.store;
        let image = if ablation.uses_image() {
            let im = self.visual.forward(tape, store, &report.patches)?;
            Some(self.image.forward(tape, store, im, None)?)
        } else {
            None
        };
        let text = if ablation.uses_text() {
            Some(self.text.forward(tape, store, &report.token_ids, &report.cls_positions, None)?)
        } else {
            None
        };
        let z_image = image.map(|c| pool(tape, c)).transpose()?;
        let z_text = text.map(|(_, h_cls)| pool(tape, h_cls)).transpose()?;
        let memory = match (image, text) {
            (Some(c), Some((h, h_cls))) => {
                let f = co_attend_on(tape, store, self.fusion.as_ref(), self.config.fusion, h_cls, c)?;
                build_memory(tape, Some(f.c_fused), Some(f.h_cls_fused), Some(h))?
            }
            (Some(c), None) => build_memory(tape, Some(c), None, None)?,
            (None, Some((h, h_cls))) => build_memory(tape, None, Some(h_cls), Some(h))?,
            (None, None) => unreachable!("every ablation keeps one modality"),
        };
        Ok(ReportGraph { memory, z_image, z_text })
    }

    /// Teacher-forced generation loss for one report.
    pub fn report_loss(&self, tape: &mut Tape, report: &EncodedReport, ablation: Ablation) -> Result<(Var, ReportGraph)> {
        let g = self.encode(tape, report, ablation)?;
        let loss = self.decoder.generation_loss(tape, &self.store, &g.memory, &report.target_ids)?;
        Ok((loss, g))
    }

    /// Decoder memory values for one report.
    pub fn memory(&self, report: &EncodedReport, ablation: Ablation) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.encode(&mut tape, report, ablation)?;
        Ok(tape.value(g.memory.e).clone())
    }

    /// Pooled pre-fusion `(z_image, z_text)` for one report.
    pub fn pooled(&self, report: &EncodedReport) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let g = self.encode(&mut tape, report, Ablation::Base)?;
        match (g.z_image, g.z_text) {
            (Some(i), Some(t)) => Ok((tape.value(i).clone(), tape.value(t).clone())),
            _ => unreachable!("base uses both modalities"),
        }
    }

    pub fn generate(
        &self,
        report: &EncodedReport,
        ablation: Ablation,
        mode: DecodeMode,
        max_gen_len: usize,
        vocab: Option<&Vocab>,
    ) -> Result<GeneratedImpression> {
        let memory = self.memory(report, ablation)?;
        self.decoder.generate(&self.store, &memory, mode, max_gen_len, vocab)
    }
}
