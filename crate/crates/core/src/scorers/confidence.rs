//! Verbalized model-confidence scoring: prompt construction over the five
//! prompting dimensions, reply parsing and consistency averaging.

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::model::Claim;
use crate::prompts::{as_bool, as_f64, extract_json, render};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Scalar,
    Boolean,
}

/// The prompting dimensions of the confidence scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub include_reference: bool,
    pub highlight_evidence: bool,
    pub chain_of_thought: bool,
    pub output_granularity: Granularity,
    pub consistency_samples: u32,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            include_reference: true,
            highlight_evidence: true,
            chain_of_thought: true,
            output_granularity: Granularity::Scalar,
            consistency_samples: 5,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.highlight_evidence && !self.include_reference {
            return Err(Error::Config(
                "highlight_evidence requires include_reference".into(),
            ));
        }
        if self.consistency_samples == 0 {
            return Err(Error::Config("consistency_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// All 2 x 2 x 2 x 2 x 2 combinations that pass validation.
    pub fn grid() -> Vec<PromptConfig> {
        let mut out = Vec::new();
        for include_reference in [true, false] {
            for highlight_evidence in [true, false] {
                for chain_of_thought in [true, false] {
                    for output_granularity in [Granularity::Scalar, Granularity::Boolean] {
                        for consistency_samples in [1, 5] {
                            let cfg = PromptConfig {
                                include_reference,
                                highlight_evidence,
                                chain_of_thought,
                                output_granularity,
                                consistency_samples,
                            };
                            if cfg.validate().is_ok() {
                                out.push(cfg);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

const JSON5_RULES: &str = r#"JSON5 Rules:
- Use DOUBLE QUOTES (") for all keys and all string values.
- Escape double quotes inside string values as \".
- Escape backslashes as \\\.
- No trailing commas in objects or arrays.
- Follow the schema exactly.
"#;

/// Renders the confidence prompt for one claim. With every dimension on and
/// scalar output this is exactly the shipped confidence template.
pub fn build_confidence_prompt(cfg: &PromptConfig, query: &str, reference: &str, claim: &Claim) -> Result<String> {
    cfg.validate()?;
    let r = cfg.include_reference;
    let boolean = cfg.output_granularity == Granularity::Boolean;
    let mut p = String::with_capacity(2048);

    p.push_str(if boolean {
        "You are an AI assistant tasked with assigning a label to a claim based on its factuality.\n\n"
    } else {
        "You are an AI assistant tasked with assigning a confidence score to a claim based on its factuality.\n\n"
    });
    p.push_str("Instructions:\n1. You are given:\n");
    if r {
        p.push_str("- A reference text for the query.\n");
    }
    p.push_str("- A query.\n- A claim made in response to the query.\n");

    match (boolean, r) {
        (false, true) => p.push_str(
            "2. Rate the factuality of the claim with a numeric score in [0.0, 1.0]:\n\
             - 0.0 -> The claim is false, contradicts the reference, or is not well-supported.\n\
             - 1.0 -> The claim is factual and well-supported by the reference, or can be logically deduced from the reference and query.\n",
        ),
        (false, false) => p.push_str(
            "2. Rate the factuality of the claim with a numeric score in [0.0, 1.0]:\n\
             - 0.0 -> The claim is false or is not well-supported.\n\
             - 1.0 -> The claim is factual, or can be logically deduced from the query.\n",
        ),
        (true, true) => p.push_str(
            "2. Rate the factuality of the claim as a boolean:\n\
             - true -> The claim is factual and well-supported by the reference, or can be logically deduced from the reference and query.\n\
             - false -> The claim is false, contradicts the reference, or is not well-supported.\n",
        ),
        (true, false) => p.push_str(
            "2. Rate the factuality of the claim as a boolean:\n\
             - true -> The claim is factual, or can be logically deduced from the query.\n\
             - false -> The claim is false or is not well-supported.\n",
        ),
    }

    p.push_str("3. Provide:\n");
    p.push_str(if boolean { "- An answer.\n" } else { "- A score.\n" });
    if cfg.highlight_evidence {
        p.push_str("- The parts of the reference text that directly support your scoring decision.\n");
    }
    if cfg.chain_of_thought {
        p.push_str("- A reasoning statement describing your rationale.\n");
    }
    p.push_str(if boolean {
        "4. You must assign either true or false. Never return null or None.\n\n"
    } else {
        "4. You must assign a numeric score. Never return null, None, or a non-numeric value.\n\n"
    });

    let verdict = if boolean { "(answer true)" } else { "(score 1.0)" };
    if r {
        p.push_str(&format!(
            "Important: A claim should be considered true {verdict} if it is either:\n\
             - Directly stated in the reference text, OR\n\
             - Can be logically deduced or calculated from the information provided in the reference text and query.\n"
        ));
    } else {
        p.push_str(&format!(
            "Important: A claim should be considered true {verdict} if it is factually correct, \
             or can be logically deduced or calculated from the information provided in the query.\n"
        ));
    }
    p.push_str("For mathematical claims, perform the necessary calculations based on the given data.\n");

    p.push_str("Output Requirements:\n- Output ONLY a single VALID JSON5 object with EXACTLY these keys:\n{\n");
    let mut keys = Vec::new();
    if cfg.highlight_evidence {
        p.push_str("  \"highlighted_text\": \"Part(s) of the reference text that support the decision.\",\n");
        keys.push("\"highlighted_text\"");
    }
    if cfg.chain_of_thought {
        p.push_str("  \"reasoning\": \"A reasoning statement describing your rationale.\",\n");
        keys.push("\"reasoning\"");
    }
    if boolean {
        p.push_str("  \"answer\": true\n}\n- \"answer\" must be a boolean (true/false).\n\n");
        keys.push("\"answer\"");
    } else {
        p.push_str("  \"score\": 0.0-1.0\n}\n\n");
        keys.push("\"score\"");
    }

    p.push_str(JSON5_RULES);
    p.push_str("\nDo NOT include:\n- Any text, explanations, comments, or formatting outside of the JSON5.\n\n");
    p.push_str("Input:\n");
    if r {
        p.push_str("Reference Text: {reference}\n");
    }
    p.push_str("Query: {query}\nClaim: {claim}\n\n");
    p.push_str("Reiteration of Instructions:\n");
    p.push_str(&format!("Return a single JSON5 object with {}. ", keys.join(", ")));
    p.push_str(if boolean {
        "Assign true or false\u{2014}never null/None.\n\n"
    } else {
        "Assign a numeric score\u{2014}never null/None.\n\n"
    });
    p.push_str("Output:\n");

    let mut vars = vec![("query", query), ("claim", claim.text.as_str())];
    if r {
        vars.push(("reference", reference));
    }
    render(&p, &vars)
}

/// A parsed confidence reply. `parse_failed` marks replies that fell back to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedScore {
    pub score: f64,
    pub parse_failed: bool,
}

/// Reads the score out of a reply; anything unreadable scores 0 and is flagged.
pub fn parse_confidence_response(raw: &str, granularity: Granularity) -> ParsedScore {
    let value = extract_json(raw);
    let score = value.as_ref().and_then(|v| match granularity {
        Granularity::Scalar => v.get("score").and_then(as_f64).filter(|s| !s.is_nan()).map(|s| s.clamp(0.0, 1.0)),
        Granularity::Boolean => v.get("answer").and_then(as_bool).map(|b| if b { 1.0 } else { 0.0 }),
    });
    match score {
        Some(score) => ParsedScore {
            score,
            parse_failed: false,
        },
        None => {
            debug!(reply = raw, "unparseable confidence reply");
            ParsedScore {
                score: 0.0,
                parse_failed: true,
            }
        }
    }
}

/// Mean over the consistency samples.
pub fn consistency_average(scores: &[f64], cfg: &PromptConfig) -> Result<f64> {
    if scores.len() != cfg.consistency_samples as usize {
        return Err(Error::Config(format!(
            "expected {} consistency samples, got {}",
            cfg.consistency_samples,
            scores.len()
        )));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
