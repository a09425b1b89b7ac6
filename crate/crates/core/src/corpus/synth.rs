//! Seeded synthetic paired corpora.
//!
//! Each report samples one observation code per anatomy (0 = normal). The
//! image is a grid of regions; region `r` shows anatomy `r`'s code as a fixed
//! ±1 pattern plus Gaussian noise. Findings describe each anatomy with one
//! templated sentence using a randomly chosen lexicon synonym, in shuffled
//! order, except that abnormal observations are independently left out with
//! probability `hide_in_image_rate` so they are visible only in the image.
//! The impression lists every abnormal observation, hidden or not.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{patchify_raw, Report, MIN_FINDINGS_WORDS};
use crate::anatomy::Lexicon;
use crate::error::{Error, Result};

/// `(label, synonyms)` for every anatomy the generator can describe. Labels
/// and synonyms all come from the default lexicon, so prompting recovers the label.
pub const SYNTH_ANATOMIES: &[(&str, &[&str])] = &[
    ("lungs", &["lungs", "lung", "pulmonary", "perihilar", "bibasilar", "suprahilar"]),
    ("heart", &["heart", "cardiac", "pericardial", "cardiomediastinal"]),
    ("pleural spaces", &["pleural"]),
    ("osseous structures", &["osseous", "bony", "bone", "thoracic", "glenohumeral"]),
    ("mediastinum", &["mediastinal", "mediastinum"]),
    ("tube", &["tube", "catheter"]),
];

/// Abnormal observation words; code `k ≥ 1` uses entry `k − 1`.
pub const SYNTH_OBSERVATIONS: &[&str] = &[
    "opacity",
    "effusion",
    "enlargement",
    "thickening",
    "lesion",
    "calcification",
    "nodule",
    "widening",
];

const ABNORMAL_TEMPLATES: &[&str] = &[
    "{syn} {obs}.",
    "{obs} of the {syn}.",
    "mild {syn} {obs}.",
];

const NORMAL_TEMPLATES: &[&str] = &[
    "{syn} unremarkable.",
    "no {syn} abnormality seen.",
    "there are no {syn} findings.",
];

const CONTEXT_SENTENCES: &[&str] = &[
    "pa and lateral views of the chest.",
    "comparison to the prior study.",
];

pub const NO_FINDING_IMPRESSION: &str = "no acute cardiopulmonary process";

const PATTERN_SEED: u64 = 0x5EED_0F_1A6E;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_anatomies: usize,
    /// Codes per anatomy including the normal code 0.
    pub n_observations: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Pixels per region side; patch width is `tile²`.
    pub tile: usize,
    pub corpus_size: usize,
    /// Probability that an anatomy is abnormal.
    pub abnormal_rate: f64,
    pub hide_in_image_rate: f64,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_anatomies: 5,
            n_observations: 5,
            grid_rows: 2,
            grid_cols: 3,
            tile: 4,
            corpus_size: 256,
            abnormal_rate: 0.35,
            hide_in_image_rate: 0.5,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_anatomies == 0 || self.n_anatomies > SYNTH_ANATOMIES.len() {
            return bad(format!("n_anatomies must be in 1..={}", SYNTH_ANATOMIES.len()));
        }
        if self.n_observations < 2 || self.n_observations > SYNTH_OBSERVATIONS.len() + 1 {
            return bad(format!(
                "n_observations must be in 2..={}",
                SYNTH_OBSERVATIONS.len() + 1
            ));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.tile == 0 || self.corpus_size == 0 {
            return bad("grid, tile and corpus sizes must be ≥ 1".into());
        }
        if self.n_anatomies > self.grid_rows * self.grid_cols {
            return bad("more anatomies than image regions".into());
        }
        for (name, p) in [
            ("abnormal_rate", self.abnormal_rate),
            ("hide_in_image_rate", self.hide_in_image_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and ≥ 0, got {}", self.noise));
        }
        Ok(())
    }
}

/// Fixed pattern for an observation code: zeros for normal, distinct ±1 vectors otherwise.
fn code_pattern(code: usize, len: usize) -> Vec<f64> {
    if code == 0 {
        return vec![0.0; len];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED.wrapping_add(code as u64));
    (0..len)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

fn fill(template: &str, syn: &str, obs: &str) -> String {
    template.replace("{syn}", syn).replace("{obs}", obs)
}

/// Impression for a set of codes, one clause per abnormal anatomy in anatomy order.
pub fn impression_for(codes: &[usize]) -> String {
    let clauses: Vec<String> = codes
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(a, &c)| format!("{} in {}", SYNTH_OBSERVATIONS[c - 1], SYNTH_ANATOMIES[a].0))
        .collect();
    if clauses.is_empty() {
        NO_FINDING_IMPRESSION.to_string()
    } else {
        clauses.join(", ")
    }
}

/// Comma-separated clauses of an impression as a set, for exact-match scoring.
pub fn observation_clauses(impression: &str) -> BTreeSet<String> {
    impression
        .to_lowercase()
        .split([',', '.', ';'])
        .map(|c| c.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|c| !c.is_empty())
        .collect()
}

/// Generates `corpus_size` reports; identical configs give identical corpora.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<Report>> {
    config.validate()?;
    let lexicon = Lexicon::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise).expect("validated noise");
    let px = config.tile * config.tile;
    let patterns: Vec<Vec<f64>> = (0..config.n_observations).map(|c| code_pattern(c, px)).collect();
    let (h, w) = (config.grid_rows * config.tile, config.grid_cols * config.tile);

    let mut reports = Vec::with_capacity(config.corpus_size);
    for idx in 0..config.corpus_size {
        let codes: Vec<usize> = (0..config.n_anatomies)
            .map(|_| {
                if rng.gen_bool(config.abnormal_rate) {
                    rng.gen_range(1..config.n_observations)
                } else {
                    0
                }
            })
            .collect();

        let mut sentences = Vec::with_capacity(config.n_anatomies + 2);
        let first = rng.gen_range(0..CONTEXT_SENTENCES.len());
        sentences.push(CONTEXT_SENTENCES[first].to_string());
        for (a, &code) in codes.iter().enumerate() {
            let syns = SYNTH_ANATOMIES[a].1;
            let syn = syns[rng.gen_range(0..syns.len())];
            if code == 0 {
                let t = NORMAL_TEMPLATES[rng.gen_range(0..NORMAL_TEMPLATES.len())];
                sentences.push(fill(t, syn, ""));
            } else {
                let hidden = rng.gen_bool(config.hide_in_image_rate);
                let t = ABNORMAL_TEMPLATES[rng.gen_range(0..ABNORMAL_TEMPLATES.len())];
                if !hidden {
                    sentences.push(fill(t, syn, SYNTH_OBSERVATIONS[code - 1]));
                }
            }
        }
        // keep every report above the ingestion word floor
        if sentences.iter().map(|s| s.split_whitespace().count()).sum::<usize>() < MIN_FINDINGS_WORDS {
            sentences.push(CONTEXT_SENTENCES[(first + 1) % CONTEXT_SENTENCES.len()].to_string());
        }
        sentences.shuffle(&mut rng);

        let mut grid = vec![vec![0.0; w]; h];
        for region in 0..config.grid_rows * config.grid_cols {
            let code = codes.get(region).copied().unwrap_or(0);
            let (br, bc) = (region / config.grid_cols, region % config.grid_cols);
            for r in 0..config.tile {
                for c in 0..config.tile {
                    grid[br * config.tile + r][bc * config.tile + c] =
                        patterns[code][r * config.tile + c] + noise.sample(&mut rng);
                }
            }
        }
        let image = patchify_raw(&grid, config.tile)?;
        let findings = sentences.join(" ");
        reports.push(Report::new(
            format!("synth-{}-{idx:05}", config.seed),
            findings,
            impression_for(&codes),
            image,
            &lexicon,
        ));
    }
    Ok(reports)
}
