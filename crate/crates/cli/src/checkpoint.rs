//! Trained model on disk: the binary parameter file plus a JSON sidecar
//! holding what is needed to rebuild and run it.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anatomist_core::corpus::Vocab;
use anatomist_core::encoders::ModelConfig;
use anatomist_core::tensor::checkpoint::{load_into, write_params};
use anatomist_core::{Ablation, Model};
use anyhow::Context;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub max_gen_len: usize,
    pub vocab: Vocab,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn save(model: &Model, sidecar: &Sidecar, path: &Path) -> anyhow::Result<PathBuf> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_params(&model.store, BufWriter::new(f))?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string(sidecar)?)?;
    Ok(side)
}

pub fn load(path: &Path) -> anyhow::Result<(Model, Sidecar)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?;
    let mut sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| anatomist_core::Error::Checkpoint(format!("{}: {e}", side.display())))?;
    sidecar.vocab.reindex();
    let mut model = Model::new(sidecar.model.clone(), 0)?;
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    load_into(&mut model.store, BufReader::new(f))?;
    Ok((model, sidecar))
}
