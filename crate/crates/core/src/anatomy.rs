//! Rule-based anatomy prompting of findings sentences.
//!
//! Findings are split into sentences, each sentence is matched against an
//! ordered lexicon of anatomy types, and the winning type is prepended as
//! `"anatomy: sentence"`. Lexicon order is the priority ranking: a sentence
//! matching several types takes the first, one matching none is tagged
//! [`OTHER_OBSERVATIONS`].

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label for sentences that match no lexicon entry.
pub const OTHER_OBSERVATIONS: &str = "other observations";

const DEFAULT_LEXICON: &str = include_str!("../data/default_lexicon.txt");

/// Marker separating the two halves of a gap pattern in lexicon files.
const GAP: &str = "...";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rule {
    /// Exact consecutive word phrase, e.g. `["there", "are", "no"]`.
    Keyword(Vec<String>),
    /// `first` occurs strictly before `second` in the same sentence, any gap.
    GapPattern { first: Vec<String>, second: Vec<String> },
}

impl Rule {
    fn matches(&self, words: &[String]) -> bool {
        match self {
            Rule::Keyword(phrase) => find_phrase(words, phrase, 0).is_some(),
            Rule::GapPattern { first, second } => find_phrase(words, first, 0)
                .is_some_and(|at| find_phrase(words, second, at + first.len()).is_some()),
        }
    }
}

fn find_phrase(words: &[String], phrase: &[String], from: usize) -> Option<usize> {
    if phrase.is_empty() || words.len() < phrase.len() {
        return None;
    }
    (from..=words.len() - phrase.len()).find(|&i| words[i..i + phrase.len()] == *phrase)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexiconEntry {
    pub anatomy: String,
    pub rules: Vec<Rule>,
}

/// Anatomy types in priority order, each with at least one rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
}

impl Default for Lexicon {
    /// The built-in lexicon, holding exactly the keywords printed for each type.
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("built-in lexicon parses")
    }
}

impl Lexicon {
    pub fn new(entries: Vec<LexiconEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.anatomy.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate anatomy label {:?}",
                    e.anatomy
                )));
            }
            if e.rules.is_empty() {
                return Err(Error::Validation(format!("anatomy {:?} has no rules", e.anatomy)));
            }
        }
        Ok(Self { entries })
    }

    /// Reads a lexicon file; `None` yields the built-in default.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::parse(&std::fs::read_to_string(p)?),
        }
    }

    /// Parses the line-oriented lexicon format: `[label]` headers in priority
    /// order, one rule per line, `a ... b` for gap patterns, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<LexiconEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let label = rest.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {line_no}: unterminated section header"))
                })?;
                let label = label.trim();
                if label.is_empty() {
                    return Err(Error::Config(format!("line {line_no}: empty anatomy label")));
                }
                entries.push(LexiconEntry {
                    anatomy: label.to_string(),
                    rules: Vec::new(),
                });
                continue;
            }
            let entry = entries.last_mut().ok_or_else(|| {
                Error::Config(format!("line {line_no}: rule before any [anatomy] header"))
            })?;
            entry.rules.push(parse_rule(line, line_no)?);
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.anatomy.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn parse_rule(line: &str, line_no: usize) -> Result<Rule> {
    let halves: Vec<&str> = line.split(GAP).collect();
    match halves.as_slice() {
        [phrase] => {
            let words = words(phrase);
            if words.is_empty() {
                return Err(Error::Config(format!("line {line_no}: rule has no words")));
            }
            Ok(Rule::Keyword(words))
        }
        [a, b] => {
            let (first, second) = (words(a), words(b));
            if first.is_empty() || second.is_empty() {
                return Err(Error::Config(format!(
                    "line {line_no}: gap pattern needs words on both sides of `...`"
                )));
            }
            Ok(Rule::GapPattern { first, second })
        }
        _ => Err(Error::Config(format!(
            "line {line_no}: at most one `...` per rule"
        ))),
    }
}

/// Lowercased alphanumeric words; anything else is a boundary.
fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Tokens before which a period does not end a sentence.
const ABBREVIATIONS: &[&str] = &["dr", "mr", "mrs", "ms", "st", "vs", "etc", "approx", "fig"];

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Splits findings on `.`, `!` or `?` followed by whitespace or end of text.
///
/// A period right after a single letter, a numeral or a common abbreviation
/// does not split. Segments are trimmed and empty ones dropped.
pub fn split_sentences(findings: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = findings.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for (k, &(pos, c)) in chars.iter().enumerate() {
        if !is_terminator(c) {
            continue;
        }
        let next = chars.get(k + 1).map(|&(_, n)| n);
        if next.is_some_and(|n| !n.is_whitespace()) {
            continue;
        }
        if c == '.' && guarded(&findings[start..pos]) {
            continue;
        }
        let end = pos + c.len_utf8();
        push_trimmed(&mut out, &findings[start..end]);
        start = end;
    }
    push_trimmed(&mut out, &findings[start..]);
    out
}

fn guarded(before: &str) -> bool {
    let token = before
        .rsplit(char::is_whitespace)
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| !c.is_alphanumeric());
    if token.is_empty() {
        return false;
    }
    let single_letter = token.chars().count() == 1 && token.chars().all(char::is_alphabetic);
    let numeral = token.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',')
        && token.chars().any(|c| c.is_ascii_digit());
    single_letter || numeral || ABBREVIATIONS.contains(&token.to_lowercase().as_str())
}

fn push_trimmed(out: &mut Vec<String>, seg: &str) {
    let seg = seg.trim();
    if !seg.is_empty() {
        out.push(seg.to_string());
    }
}

/// Every lexicon label with at least one matching rule, in priority order.
pub fn match_anatomy<'a>(sentence: &str, lexicon: &'a Lexicon) -> Vec<&'a str> {
    let words = words(sentence);
    lexicon
        .entries
        .iter()
        .filter(|e| e.rules.iter().any(|r| r.matches(&words)))
        .map(|e| e.anatomy.as_str())
        .collect()
}

/// Single match → that label; several → highest priority; none → [`OTHER_OBSERVATIONS`].
pub fn classify_sentence<'a>(sentence: &str, lexicon: &'a Lexicon) -> &'a str {
    let words = words(sentence);
    lexicon
        .entries
        .iter()
        .find(|e| e.rules.iter().any(|r| r.matches(&words)))
        .map(|e| e.anatomy.as_str())
        .unwrap_or(OTHER_OBSERVATIONS)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub index: usize,
    pub text: String,
    pub anatomy: String,
    pub prompted_text: String,
}

impl LabeledSentence {
    pub fn new(index: usize, text: impl Into<String>, anatomy: impl Into<String>) -> Self {
        let text = text.into();
        let anatomy = anatomy.into();
        let prompted_text = format!("{anatomy}: {text}");
        Self {
            index,
            text,
            anatomy,
            prompted_text,
        }
    }
}

/// Splits findings and rewrites each sentence as `"anatomy: sentence"`, keeping order.
pub fn plan_prompts(findings: &str, lexicon: &Lexicon) -> Vec<LabeledSentence> {
    split_sentences(findings)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let label = classify_sentence(&s, lexicon);
            LabeledSentence::new(i, s, label)
        })
        .collect()
}
