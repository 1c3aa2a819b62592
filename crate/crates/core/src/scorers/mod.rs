//! Claim scoring functions.
//!
//! Two families: entailment scorers that ask an NLI model whether the
//! reference supports a claim (whole-document, or per sentence with a
//! conservative or averaging aggregation), and verbalized model-confidence
//! scorers that prompt an LLM. A synthetic label-conditional scorer backs the
//! simulations. All scores lie in `[0, 1]`.

mod confidence;
mod entailment;
mod synthetic;

pub use confidence::{
    build_confidence_prompt, consistency_average, parse_confidence_response, Granularity, ParsedScore, PromptConfig,
};
pub use entailment::{
    aggregate_average, aggregate_conservative, split_sentences, EntailmentTriple, NliLabel,
};
pub use synthetic::{sample_score, synthetic_score, truncated_normal, SyntheticScoreParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Claim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    DocumentEntailment,
    ConservativeEntailment,
    AverageEntailment,
    ModelConfidence,
    Synthetic,
}

impl ScorerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::DocumentEntailment => "document_entailment",
            ScorerKind::ConservativeEntailment => "conservative_entailment",
            ScorerKind::AverageEntailment => "average_entailment",
            ScorerKind::ModelConfidence => "model_confidence",
            ScorerKind::Synthetic => "synthetic",
        }
    }

    pub fn is_entailment(self) -> bool {
        matches!(
            self,
            ScorerKind::DocumentEntailment | ScorerKind::ConservativeEntailment | ScorerKind::AverageEntailment
        )
    }
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "document_entailment" => ScorerKind::DocumentEntailment,
            "conservative_entailment" => ScorerKind::ConservativeEntailment,
            "average_entailment" => ScorerKind::AverageEntailment,
            "model_confidence" => ScorerKind::ModelConfidence,
            "synthetic" => ScorerKind::Synthetic,
            other => return Err(Error::Config(format!("unknown scorer kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerSpec {
    pub kind: ScorerKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub prompt_config: Option<PromptConfig>,
    /// Parameters of the synthetic scorer; defaults apply when absent.
    #[serde(default)]
    pub synthetic: Option<SyntheticScoreParams>,
}

impl ScorerSpec {
    pub fn synthetic(params: SyntheticScoreParams) -> Self {
        Self {
            kind: ScorerKind::Synthetic,
            endpoint: None,
            model_id: None,
            prompt_config: None,
            synthetic: Some(params),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let missing = |what: &str| Error::Config(format!("{} scorer requires {what}", self.kind.as_str()));
        if self.kind.is_entailment() && self.endpoint.is_none() {
            return Err(missing("an endpoint"));
        }
        if self.kind == ScorerKind::ModelConfidence {
            if self.endpoint.is_none() {
                return Err(missing("an endpoint"));
            }
            if self.model_id.is_none() {
                return Err(missing("a model_id"));
            }
            self.prompt_config.ok_or_else(|| missing("a prompt_config"))?.validate()?;
        }
        if let Some(p) = &self.synthetic {
            p.validate()?;
        }
        Ok(())
    }

    /// Identifier recorded with every score; distinguishes model and prompt
    /// variants so calibration and test sets can be checked for agreement.
    pub fn scorer_id(&self) -> String {
        match (self.kind, &self.model_id, &self.prompt_config) {
            (ScorerKind::ModelConfidence, Some(m), Some(p)) => format!(
                "model_confidence:{m}:ref={}:hl={}:cot={}:{}:n={}",
                u8::from(p.include_reference),
                u8::from(p.highlight_evidence),
                u8::from(p.chain_of_thought),
                match p.output_granularity {
                    Granularity::Scalar => "scalar",
                    Granularity::Boolean => "boolean",
                },
                p.consistency_samples
            ),
            (kind, Some(m), _) if kind.is_entailment() => format!("{}:{m}", kind.as_str()),
            (kind, _, _) => kind.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailPair {
    pub premise: String,
    pub hypothesis: String,
}

/// Anything that maps premise/hypothesis pairs to NLI triples, in order.
pub trait Entailer: Send + Sync {
    fn entail(&self, pairs: &[EntailPair]) -> Result<Vec<EntailmentTriple>>;
}

fn entail_checked(nli: &dyn Entailer, pairs: &[EntailPair]) -> Result<Vec<EntailmentTriple>> {
    let triples = nli.entail(pairs)?;
    if triples.len() != pairs.len() {
        return Err(Error::Protocol(format!(
            "sent {} pairs, received {} triples",
            pairs.len(),
            triples.len()
        )));
    }
    for t in &triples {
        t.validate().map_err(|e| Error::Protocol(e.to_string()))?;
    }
    Ok(triples)
}

/// Entailment mass of the whole reference for the claim.
pub fn score_document_entailment(claim: &Claim, reference: &str, nli: &dyn Entailer) -> Result<f64> {
    if reference.trim().is_empty() {
        return Err(Error::Config("document entailment requires a non-empty reference".into()));
    }
    let pair = EntailPair {
        premise: reference.to_string(),
        hypothesis: claim.text.clone(),
    };
    Ok(entail_checked(nli, std::slice::from_ref(&pair))?[0].entailment)
}

/// Per-sentence NLI followed by the conservative or averaging rule.
pub fn score_sentence_entailment(claim: &Claim, reference: &str, nli: &dyn Entailer, kind: ScorerKind) -> Result<f64> {
    let pairs: Vec<EntailPair> = split_sentences(reference)
        .into_iter()
        .map(|premise| EntailPair {
            premise,
            hypothesis: claim.text.clone(),
        })
        .collect();
    let triples = if pairs.is_empty() {
        Vec::new()
    } else {
        entail_checked(nli, &pairs)?
    };
    match kind {
        ScorerKind::ConservativeEntailment => aggregate_conservative(&triples),
        ScorerKind::AverageEntailment => aggregate_average(&triples),
        other => Err(Error::Config(format!("{} is not a sentence-level scorer", other.as_str()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Fixed {
        triple: EntailmentTriple,
        seen: Mutex<Vec<EntailPair>>,
    }

    impl Fixed {
        fn new(e: f64, n: f64, c: f64) -> Self {
            Self {
                triple: EntailmentTriple::new(e, n, c),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl Entailer for Fixed {
        fn entail(&self, pairs: &[EntailPair]) -> Result<Vec<EntailmentTriple>> {
            self.seen.lock().unwrap().extend_from_slice(pairs);
            Ok(vec![self.triple; pairs.len()])
        }
    }

    struct Down;

    impl Entailer for Down {
        fn entail(&self, _: &[EntailPair]) -> Result<Vec<EntailmentTriple>> {
            Err(Error::Transport("connection refused".into()))
        }
    }

    struct Short;

    impl Entailer for Short {
        fn entail(&self, _: &[EntailPair]) -> Result<Vec<EntailmentTriple>> {
            Ok(Vec::new())
        }
    }

    fn claim() -> Claim {
        Claim::new("c", "Paris is in France.")
    }

    #[test]
    fn document_entailment_passes_through_mass() {
        assert_eq!(score_document_entailment(&claim(), "ref", &Fixed::new(0.7, 0.2, 0.1)).unwrap(), 0.7);
        assert_eq!(score_document_entailment(&claim(), "ref", &Fixed::new(0.0, 0.0, 1.0)).unwrap(), 0.0);
        let third = 1.0 / 3.0;
        let s = score_document_entailment(&claim(), "ref", &Fixed::new(third, third, third)).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn document_entailment_orientation() {
        let nli = Fixed::new(0.7, 0.2, 0.1);
        score_document_entailment(&claim(), "The reference.", &nli).unwrap();
        let seen = nli.seen.lock().unwrap();
        assert_eq!(seen[0].premise, "The reference.");
        assert_eq!(seen[0].hypothesis, "Paris is in France.");
    }

    #[test]
    fn transport_and_protocol_errors() {
        assert!(matches!(score_document_entailment(&claim(), "r", &Down), Err(Error::Transport(_))));
        assert!(matches!(score_document_entailment(&claim(), "r", &Short), Err(Error::Protocol(_))));
        let bad = Fixed::new(0.9, 0.9, 0.9);
        assert!(matches!(score_document_entailment(&claim(), "r", &bad), Err(Error::Protocol(_))));
    }

    #[test]
    fn sentence_scorers_query_each_sentence() {
        let nli = Fixed::new(0.8, 0.1, 0.1);
        let s = score_sentence_entailment(&claim(), "One here. Two there.", &nli, ScorerKind::AverageEntailment).unwrap();
        assert_eq!(s, 0.8);
        assert_eq!(nli.seen.lock().unwrap().len(), 2);
        let empty = score_sentence_entailment(&claim(), "", &nli, ScorerKind::ConservativeEntailment).unwrap();
        assert_eq!(empty, 0.0);
    }

    #[test]
    fn spec_validation() {
        let mut spec = ScorerSpec {
            kind: ScorerKind::ModelConfidence,
            endpoint: Some("http://x".into()),
            model_id: None,
            prompt_config: Some(PromptConfig::default()),
            synthetic: None,
        };
        assert!(spec.validate().is_err());
        spec.model_id = Some("m".into());
        spec.validate().unwrap();
        assert_eq!(spec.scorer_id(), "model_confidence:m:ref=1:hl=1:cot=1:scalar:n=5");
        let doc = ScorerSpec {
            kind: ScorerKind::DocumentEntailment,
            endpoint: None,
            model_id: None,
            prompt_config: None,
            synthetic: None,
        };
        assert!(doc.validate().is_err());
        ScorerSpec::synthetic(SyntheticScoreParams::default()).validate().unwrap();
    }

    #[test]
    fn kind_parse_roundtrip() {
        for k in [
            ScorerKind::DocumentEntailment,
            ScorerKind::ConservativeEntailment,
            ScorerKind::AverageEntailment,
            ScorerKind::ModelConfidence,
            ScorerKind::Synthetic,
        ] {
            assert_eq!(k.as_str().parse::<ScorerKind>().unwrap(), k);
        }
    }
}
