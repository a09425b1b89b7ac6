use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub anatomist: String,
    pub checkpoint_format: u32,
}

/// Record of one invocation, written beside its primary output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn begin(command: &str, config: &RunConfig) -> Self {
        let now = Utc::now();
        Self {
            command: command.to_string(),
            config_hash: config.hash(),
            seed: config.train.seed,
            versions: Versions {
                anatomist: env!("CARGO_PKG_VERSION").to_string(),
                checkpoint_format: anatomist_core::tensor::checkpoint::VERSION,
            },
            started_at: now,
            finished_at: now,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.to_path_buf());
        self
    }

    /// Stamps the finish time and writes `<primary>.manifest.json`.
    pub fn finish(mut self, primary: &Path) -> anyhow::Result<PathBuf> {
        self.finished_at = Utc::now();
        let path = manifest_path(primary);
        std::fs::write(&path, serde_json::to_string_pretty(&self)?)?;
        Ok(path)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
