//! Prompt templates and lenient parsing of model replies.
//!
//! Templates ship as text assets. Placeholders are `{name}` tokens with
//! lowercase ASCII names; every placeholder present in a template must be
//! supplied when rendering. Substituted values are never re-scanned, so claim
//! text containing braces is inserted as-is.

use std::collections::BTreeMap;

use regex::Regex;
use serde_json::Value;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::model::DatasetTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    GeneratorWithReference,
    GeneratorWithoutReference,
    Parser,
    Labeler,
    LabelerGroundTruth,
    Attacker,
    Confusee,
    Confidence,
    MergerFactscore,
    MergerNq,
    MergerMath,
    Correctness,
    SufficientCorrectness,
    MathReference,
}

impl Template {
    pub const ALL: [Template; 14] = [
        Template::GeneratorWithReference,
        Template::GeneratorWithoutReference,
        Template::Parser,
        Template::Labeler,
        Template::LabelerGroundTruth,
        Template::Attacker,
        Template::Confusee,
        Template::Confidence,
        Template::MergerFactscore,
        Template::MergerNq,
        Template::MergerMath,
        Template::Correctness,
        Template::SufficientCorrectness,
        Template::MathReference,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Template::GeneratorWithReference => include_str!("../assets/prompts/generator_with_reference.txt"),
            Template::GeneratorWithoutReference => include_str!("../assets/prompts/generator_without_reference.txt"),
            Template::Parser => include_str!("../assets/prompts/parser.txt"),
            Template::Labeler => include_str!("../assets/prompts/labeler.txt"),
            Template::LabelerGroundTruth => include_str!("../assets/prompts/labeler_ground_truth.txt"),
            Template::Attacker => include_str!("../assets/prompts/attacker.txt"),
            Template::Confusee => include_str!("../assets/prompts/confusee.txt"),
            Template::Confidence => include_str!("../assets/prompts/confidence.txt"),
            Template::MergerFactscore => include_str!("../assets/prompts/merger_factscore.txt"),
            Template::MergerNq => include_str!("../assets/prompts/merger_nq.txt"),
            Template::MergerMath => include_str!("../assets/prompts/merger_math.txt"),
            Template::Correctness => include_str!("../assets/prompts/correctness.txt"),
            Template::SufficientCorrectness => include_str!("../assets/prompts/sufficient_correctness.txt"),
            Template::MathReference => include_str!("../assets/prompts/math_reference.txt"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::GeneratorWithReference => "generator_with_reference",
            Template::GeneratorWithoutReference => "generator_without_reference",
            Template::Parser => "parser",
            Template::Labeler => "labeler",
            Template::LabelerGroundTruth => "labeler_ground_truth",
            Template::Attacker => "attacker",
            Template::Confusee => "confusee",
            Template::Confidence => "confidence",
            Template::MergerFactscore => "merger_factscore",
            Template::MergerNq => "merger_nq",
            Template::MergerMath => "merger_math",
            Template::Correctness => "correctness",
            Template::SufficientCorrectness => "sufficient_correctness",
            Template::MathReference => "math_reference",
        }
    }

    /// Merger template for a dataset. Synthetic corpora use the open-ended one.
    pub fn merger_for(tag: DatasetTag) -> Template {
        match tag {
            DatasetTag::Math => Template::MergerMath,
            DatasetTag::Nq => Template::MergerNq,
            DatasetTag::Factscore | DatasetTag::Synthetic => Template::MergerFactscore,
        }
    }

    pub fn render(self, vars: &[(&str, &str)]) -> Result<String> {
        render(self.text(), vars)
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("static regex"))
}

/// Placeholder names appearing in a template, sorted and deduplicated.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut names: Vec<String> = placeholder_re()
        .captures_iter(template)
        .map(|c| c[1].to_string())
        .collect();
    names.sort();
    names.dedup();
    names
}

/// Single-pass substitution of `{name}` tokens.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String> {
    let map: BTreeMap<&str, &str> = vars.iter().copied().collect();
    let mut out = String::with_capacity(template.len() + 256);
    let mut last = 0;
    for cap in placeholder_re().captures_iter(template) {
        let whole = cap.get(0).expect("group 0");
        let name = &cap[1];
        let value = map
            .get(name)
            .ok_or_else(|| Error::UnresolvedPlaceholder(name.to_string()))?;
        out.push_str(&template[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&template[last..]);
    Ok(out)
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.split_once('\n').map_or("", |(_, body)| body);
        return rest.trim_end().strip_suffix("```").unwrap_or(rest).trim();
    }
    t
}

fn parse_json5(s: &str) -> Option<Value> {
    json5::from_str::<Value>(s).ok()
}

/// Extracts the first JSON5 object or array from a model reply, tolerating
/// code fences and prose around it.
pub fn extract_json(raw: &str) -> Option<Value> {
    let body = strip_fences(raw);
    if let Some(v) = parse_json5(body) {
        return Some(v);
    }
    // A fenced block may sit in the middle of prose.
    if let Some(start) = raw.find("```") {
        let inner = &raw[start..];
        if let Some(end) = inner[3..].find("```") {
            if let Some(v) = parse_json5(strip_fences(&inner[..end + 6])) {
                return Some(v);
            }
        }
    }
    const MAX_TRIES: usize = 16;
    for (open, close) in [('{', '}'), ('[', ']')] {
        let starts: Vec<usize> = body.match_indices(open).map(|(i, _)| i).take(MAX_TRIES).collect();
        let ends: Vec<usize> = body.rmatch_indices(close).map(|(i, _)| i).take(MAX_TRIES).collect();
        for &s in &starts {
            for &e in &ends {
                if e <= s {
                    break;
                }
                if let Some(v) = parse_json5(&body[s..=e]) {
                    return Some(v);
                }
            }
        }
    }
    None
}

/// Reads a boolean-ish JSON value: `true`/`false`, `"true"`/`"false"`, `1`/`0`.
pub fn as_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::Number(n) => match n.as_f64() {
            Some(1.0) => Some(true),
            Some(0.0) => Some(false),
            _ => None,
        },
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "1" => Some(true),
            "false" | "0" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

/// Reads a numeric JSON value, accepting numeric strings.
pub fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}
