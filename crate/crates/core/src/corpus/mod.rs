//! Reports, vocabulary, token framing and image patch features.

mod synth;
mod vocab;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anatomy::{plan_prompts, LabeledSentence, Lexicon};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{observation_clauses, synth_generate, SynthConfig, SYNTH_ANATOMIES, SYNTH_OBSERVATIONS};
pub use vocab::{detokenize, tokenize, Vocab, BOS, CLS, EOS, PAD, RESERVED, SEP, UNK};

/// Minimum whitespace words in findings for a report to be kept.
pub const MIN_FINDINGS_WORDS: usize = 10;
/// Minimum whitespace words in an impression for a report to be kept.
pub const MIN_IMPRESSION_WORDS: usize = 2;

/// `P × D_v` regional image features, all finite, `P ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    patches: Tensor,
}

impl PatchFeatures {
    pub fn new(patches: Tensor) -> Result<Self> {
        if patches.rank() != 2 || patches.rows() == 0 || patches.cols() == 0 {
            return Err(Error::Validation(format!(
                "patch features must be a non-empty P×D matrix, got {:?}",
                patches.shape()
            )));
        }
        if !patches.is_finite() {
            return Err(Error::Validation("patch features contain non-finite values".into()));
        }
        Ok(Self { patches })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn count(&self) -> usize {
        self.patches.rows()
    }

    pub fn width(&self) -> usize {
        self.patches.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.patches
    }
}

/// Cuts an `H × W` grid into non-overlapping `tile × tile` blocks, row-major,
/// each flattened row-major into a vector of length `tile²`.
pub fn patchify_raw(image: &[Vec<f64>], tile: usize) -> Result<PatchFeatures> {
    let h = image.len();
    let w = image.first().map_or(0, Vec::len);
    if tile == 0 || h == 0 || w == 0 || h % tile != 0 || w % tile != 0 {
        return Err(Error::Validation(format!(
            "tile {tile} does not evenly divide a {h}×{w} image"
        )));
    }
    if image.iter().any(|r| r.len() != w) {
        return Err(Error::Validation("image rows have unequal lengths".into()));
    }
    let mut rows = Vec::with_capacity((h / tile) * (w / tile));
    for br in 0..h / tile {
        for bc in 0..w / tile {
            let mut v = Vec::with_capacity(tile * tile);
            for r in 0..tile {
                v.extend_from_slice(&image[br * tile + r][bc * tile..(bc + 1) * tile]);
            }
            rows.push(v);
        }
    }
    PatchFeatures::from_rows(&rows)
}

/// One examination.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub id: String,
    pub findings_raw: String,
    pub sentences: Vec<LabeledSentence>,
    pub impression: String,
    pub image: PatchFeatures,
}

impl Report {
    pub fn new(
        id: impl Into<String>,
        findings: impl Into<String>,
        impression: impl Into<String>,
        image: PatchFeatures,
        lexicon: &Lexicon,
    ) -> Self {
        let findings_raw = findings.into();
        let sentences = plan_prompts(&findings_raw, lexicon);
        Self {
            id: id.into(),
            findings_raw,
            sentences,
            impression: impression.into(),
            image,
        }
    }

    pub fn to_record(&self) -> CorpusRecord {
        CorpusRecord {
            id: self.id.clone(),
            findings: self.findings_raw.clone(),
            impression: self.impression.clone(),
            image: Some(ImagePayload::Patches {
                patches: self.image.tensor().to_rows(),
            }),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ImagePayload {
    Patches { patches: Vec<Vec<f64>> },
    Grid { grid: Vec<Vec<f64>>, tile: usize },
}

impl ImagePayload {
    pub fn to_features(&self) -> Result<PatchFeatures> {
        match self {
            ImagePayload::Patches { patches } => PatchFeatures::from_rows(patches),
            ImagePayload::Grid { grid, tile } => patchify_raw(grid, *tile),
        }
    }
}

/// One JSONL line of a corpus file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusRecord {
    pub id: String,
    pub findings: String,
    pub impression: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImagePayload>,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Drop reports whose framed findings exceed this many tokens.
    pub max_findings_tokens: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct LoadOutcome {
    pub reports: Vec<Report>,
    pub dropped: usize,
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Turns a record into a report, or `None` when it fails the length filters.
pub fn record_to_report(
    rec: &CorpusRecord,
    lexicon: &Lexicon,
    opts: &LoadOptions,
) -> Result<Option<Report>> {
    let image = rec.image.as_ref().ok_or_else(|| Error::Record {
        id: rec.id.clone(),
        msg: "missing image payload".into(),
    })?;
    let image = image.to_features().map_err(|e| Error::Record {
        id: rec.id.clone(),
        msg: e.to_string(),
    })?;
    if word_count(&rec.findings) < MIN_FINDINGS_WORDS
        || word_count(&rec.impression) < MIN_IMPRESSION_WORDS
    {
        return Ok(None);
    }
    let report = Report::new(&rec.id, &rec.findings, &rec.impression, image, lexicon);
    if report.sentences.is_empty() {
        return Ok(None);
    }
    if let Some(max) = opts.max_findings_tokens {
        let framed: usize = report
            .sentences
            .iter()
            .map(|s| tokenize(&s.prompted_text).len() + 2)
            .sum();
        if framed > max {
            return Ok(None);
        }
    }
    Ok(Some(report))
}

/// Reads a JSONL corpus, prompting each findings section with `lexicon`.
pub fn load_corpus(path: &Path, lexicon: &Lexicon, opts: &LoadOptions) -> Result<LoadOutcome> {
    let file = std::fs::File::open(path)?;
    read_corpus(BufReader::new(file), lexicon, opts)
}

pub fn read_corpus<R: BufRead>(
    reader: R,
    lexicon: &Lexicon,
    opts: &LoadOptions,
) -> Result<LoadOutcome> {
    let mut reports = Vec::new();
    let mut dropped = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        match record_to_report(&rec, lexicon, opts)? {
            Some(r) => reports.push(r),
            None => dropped += 1,
        }
    }
    Ok(LoadOutcome { reports, dropped })
}

pub fn write_corpus<W: Write>(reports: &[Report], mut w: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, &r.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Which findings text feeds the text encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextView {
    /// Sentences as written.
    Raw,
    /// `"anatomy: sentence"`.
    Prompted,
}

/// Vocabulary over prompted findings and impressions.
pub fn build_vocab(reports: &[Report], min_freq: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in reports {
        let texts = r
            .sentences
            .iter()
            .map(|s| s.prompted_text.as_str())
            .chain(std::iter::once(r.impression.as_str()));
        for t in texts {
            for tok in tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    Vocab::from_counts(&counts, min_freq)
}

/// Model-ready ids for one report.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedReport {
    pub id: String,
    /// `[CLS]_i tokens_i [SEP]_i` for every sentence, concatenated.
    pub token_ids: Vec<usize>,
    pub cls_positions: Vec<usize>,
    /// `BOS impression EOS`.
    pub target_ids: Vec<usize>,
    pub patches: PatchFeatures,
}

pub fn encode_report(report: &Report, vocab: &Vocab) -> Result<EncodedReport> {
    encode_report_view(report, vocab, TextView::Prompted)
}

pub fn encode_report_view(report: &Report, vocab: &Vocab, view: TextView) -> Result<EncodedReport> {
    if report.sentences.is_empty() {
        return Err(Error::Validation(format!("report {} has no sentences", report.id)));
    }
    let mut token_ids = Vec::new();
    let mut cls_positions = Vec::with_capacity(report.sentences.len());
    for s in &report.sentences {
        let text = match view {
            TextView::Raw => &s.text,
            TextView::Prompted => &s.prompted_text,
        };
        cls_positions.push(token_ids.len());
        token_ids.push(CLS);
        token_ids.extend(vocab.encode(text));
        token_ids.push(SEP);
    }
    let mut target_ids = vec![BOS];
    target_ids.extend(vocab.encode(&report.impression));
    target_ids.push(EOS);
    Ok(EncodedReport {
        id: report.id.clone(),
        token_ids,
        cls_positions,
        target_ids,
        patches: report.image.clone(),
    })
}
