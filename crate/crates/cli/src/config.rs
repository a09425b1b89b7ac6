use std::path::{Path, PathBuf};

use anatomist_core::corpus::SynthConfig;
use anatomist_core::encoders::ModelConfig;
use anatomist_core::trainer::TrainConfig;
use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Corpus handling shared by the training-side subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Share of the corpus, taken from the end, held out for validation.
    pub val_fraction: f64,
    /// Share held out for testing by `ablate`, taken just before validation.
    pub test_fraction: f64,
    pub min_freq: usize,
    /// Reports whose framed findings exceed this many tokens are dropped.
    pub max_findings_tokens: Option<usize>,
    /// Lexicon file; the built-in one when absent.
    pub lexicon: Option<PathBuf>,
    /// Contrastive weights tried by `ablate` for variants with alignment.
    pub lambdas: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            test_fraction: 0.1,
            min_freq: 1,
            max_findings_tokens: None,
            lexicon: None,
            lambdas: vec![0.1, 0.5, 1.0],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        let ok = |f: f64| (0.0..1.0).contains(&f);
        if !ok(self.val_fraction) || !ok(self.test_fraction) || self.val_fraction + self.test_fraction >= 1.0 {
            return Err(anatomist_core::Error::Config(
                "val_fraction and test_fraction must be in [0, 1) and sum below 1".into(),
            )
            .into());
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(anatomist_core::Error::Config("lambdas must be finite and ≥ 0".into()).into());
        }
        Ok(())
    }
}

/// Everything a run can be configured with; every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| anatomist_core::Error::Config(format!("{}: {e}", path.display())).into())
    }

    /// Applies the global seed to every seeded section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
            self.synth.seed = s;
        }
        self
    }

    /// SHA-256 of the effective configuration, as lowercase hex.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: RunConfig = toml::from_str("[train]\nepochs = 3\n[model]\nd_model = 16\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
        assert_eq!(cfg.data, DataConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3\n").is_err());
    }

    #[test]
    fn hash_tracks_content_and_seed() {
        let a = RunConfig::default();
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), a.clone().with_seed(Some(9)).hash());
    }
}
