//! NLI triples and the sentence-level aggregation rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability mass an NLI model assigns to each of its three labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentTriple {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl EntailmentTriple {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(entailment: f64, neutral: f64, contradiction: f64) -> Self {
        Self {
            entailment,
            neutral,
            contradiction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.entailment, self.neutral, self.contradiction];
        let in_range = parts.iter().all(|p| (0.0..=1.0).contains(p));
        let sum: f64 = parts.iter().sum();
        if in_range && (sum - 1.0).abs() <= Self::SUM_TOLERANCE {
            Ok(())
        } else {
            Err(Error::InvalidTriple {
                entailment: self.entailment,
                neutral: self.neutral,
                contradiction: self.contradiction,
            })
        }
    }

    /// Most probable label. Ties resolve to neutral first, then
    /// contradiction, so a label only counts as decisive when it wins outright
    /// over neutral and entailment never wins a tie.
    pub fn argmax(&self) -> NliLabel {
        if self.neutral >= self.entailment && self.neutral >= self.contradiction {
            NliLabel::Neutral
        } else if self.contradiction >= self.entailment {
            NliLabel::Contradiction
        } else {
            NliLabel::Entailment
        }
    }
}

fn validate_all(triples: &[EntailmentTriple]) -> Result<()> {
    triples.iter().try_for_each(EntailmentTriple::validate)
}

/// Conservative aggregation: any contradicting sentence scores 0; otherwise
/// the strongest supporting sentence's entailment mass; no support scores 0.
pub fn aggregate_conservative(per_sentence: &[EntailmentTriple]) -> Result<f64> {
    validate_all(per_sentence)?;
    if per_sentence.iter().any(|t| t.argmax() == NliLabel::Contradiction) {
        return Ok(0.0);
    }
    Ok(per_sentence
        .iter()
        .filter(|t| t.argmax() == NliLabel::Entailment)
        .map(|t| t.entailment)
        .fold(0.0, f64::max))
}

/// Mean entailment mass over the sentences whose label is not neutral; 0 if
/// every sentence is neutral.
pub fn aggregate_average(per_sentence: &[EntailmentTriple]) -> Result<f64> {
    validate_all(per_sentence)?;
    let (sum, count) = per_sentence
        .iter()
        .filter(|t| t.argmax() != NliLabel::Neutral)
        .fold((0.0, 0usize), |(s, c), t| (s + t.entailment, c + 1));
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Splits a reference into sentences at `.`, `!` or `?` followed by
/// whitespace. Fragments shorter than three characters are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    let end = i + c.len_utf8();
                    out.push(&text[start..end]);
                    start = end;
                }
            }
        }
    }
    out.push(&text[start..]);
    out.into_iter()
        .map(str::trim)
        .filter(|s| s.chars().count() >= 3)
        .map(str::to_string)
        .collect()
}
