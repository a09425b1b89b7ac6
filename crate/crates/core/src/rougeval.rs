//! ROUGE-1, ROUGE-2 and ROUGE-L F1 over whole summaries.
//!
//! N-gram overlap uses clipped counts, ROUGE-L uses one LCS over the full token
//! sequences, and corpus scores are plain arithmetic means. No stemming and no
//! stopword removal.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Score {
    fn from_counts(hit: usize, cand: usize, refr: usize) -> Self {
        if cand == 0 || refr == 0 {
            return Self::default();
        }
        let precision = hit as f64 / cand as f64;
        let recall = hit as f64 / refr as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram overlap. Panics-free for any `n ≥ 1`; callers use 1 or 2.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> Score {
    if n == 0 {
        return Score::default();
    }
    let c = ngrams(candidate, n);
    let r = ngrams(reference, n);
    let hit: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    Score::from_counts(hit, c.values().sum(), r.values().sum())
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Score {
    Score::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: Score,
    pub rouge2: Score,
    pub rouge_l: Score,
}

/// Scores two texts after tokenization.
pub fn score_pair(candidate: &str, reference: &str) -> RougeScores {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    RougeScores {
        rouge1: rouge_n(&c, &r, 1),
        rouge2: rouge_n(&c, &r, 2),
        rouge_l: rouge_l(&c, &r),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    #[serde(flatten)]
    pub scores: RougeScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub examples: Vec<ExampleScore>,
    pub mean: RougeScores,
}

/// `(id, text)` predictions scored against `(id, text)` references, matched by
/// id. Both lists must hold the same ids.
pub fn evaluate_corpus(predictions: &[(String, String)], references: &[(String, String)]) -> Result<RougeReport> {
    if predictions.len() != references.len() {
        return Err(Error::Alignment(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    let refs: HashMap<&str, &str> = references.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    if refs.len() != references.len() {
        return Err(Error::Alignment("duplicate reference ids".into()));
    }
    let mut examples = Vec::with_capacity(predictions.len());
    for (id, text) in predictions {
        let r = refs
            .get(id.as_str())
            .ok_or_else(|| Error::Alignment(format!("prediction {id} has no reference")))?;
        examples.push(ExampleScore {
            id: id.clone(),
            scores: score_pair(text, r),
        });
    }
    let mean = mean_scores(examples.iter().map(|e| &e.scores));
    Ok(RougeReport { examples, mean })
}

fn mean_scores<'a>(items: impl Iterator<Item = &'a RougeScores>) -> RougeScores {
    let mut acc = RougeScores::default();
    let mut n = 0usize;
    for s in items {
        n += 1;
        for (a, b) in [(&mut acc.rouge1, s.rouge1), (&mut acc.rouge2, s.rouge2), (&mut acc.rouge_l, s.rouge_l)] {
            a.precision += b.precision;
            a.recall += b.recall;
            a.f1 += b.f1;
        }
    }
    if n > 0 {
        let k = n as f64;
        for a in [&mut acc.rouge1, &mut acc.rouge2, &mut acc.rouge_l] {
            a.precision /= k;
            a.recall /= k;
            a.f1 /= k;
        }
    }
    acc
}
