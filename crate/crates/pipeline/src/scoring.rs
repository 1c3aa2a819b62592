//! Binds a [`ScorerSpec`] to live clients and scores claims.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use confilter_core::model::{Claim, QueryRecord, ScoredClaimSet};
use confilter_core::robustness::Rescorer;
use confilter_core::rng;
use confilter_core::scorers::{
    build_confidence_prompt, consistency_average, parse_confidence_response, score_document_entailment,
    score_sentence_entailment, synthetic_score, Entailer, ScorerKind, ScorerSpec,
};
use confilter_core::{Error, Result};

use crate::llm::{ChatClient, Gateway, Role};
use crate::nli::CachedEntailer;

const TAG_SCORE: u64 = 0x5c0e;

pub struct ScoringEngine<'a> {
    spec: &'a ScorerSpec,
    scorer_id: String,
    seed: u64,
    gateway: &'a Gateway,
    chat: Option<&'a dyn ChatClient>,
    nli: Option<CachedEntailer<'a>>,
    parse_failures: AtomicU64,
}

impl<'a> ScoringEngine<'a> {
    pub fn new(
        spec: &'a ScorerSpec,
        seed: u64,
        gateway: &'a Gateway,
        chat: Option<&'a dyn ChatClient>,
        nli: Option<Arc<dyn Entailer>>,
    ) -> Result<Self> {
        spec.validate()?;
        let nli = match (spec.kind.is_entailment(), nli) {
            (true, Some(inner)) => Some(CachedEntailer {
                inner,
                model_id: spec.model_id.clone().unwrap_or_else(|| "default".into()),
                gateway,
            }),
            (true, None) => return Err(Error::Config("entailment scorer needs an NLI client".into())),
            (false, _) => None,
        };
        if spec.kind == ScorerKind::ModelConfidence && chat.is_none() {
            return Err(Error::Config("model_confidence scorer needs a chat client".into()));
        }
        Ok(Self {
            spec,
            scorer_id: spec.scorer_id(),
            seed,
            gateway,
            chat,
            nli,
            parse_failures: AtomicU64::new(0),
        })
    }

    pub fn scorer_id(&self) -> &str {
        &self.scorer_id
    }

    /// Confidence replies that could not be read and scored 0.
    pub fn parse_failures(&self) -> u64 {
        self.parse_failures.load(Ordering::SeqCst)
    }

    pub fn score_claim(&self, record: &QueryRecord, claim: &Claim) -> Result<f64> {
        match self.spec.kind {
            ScorerKind::Synthetic => synthetic_score(
                claim,
                &self.spec.synthetic.unwrap_or_default(),
                rng::derive_seed(self.seed, &[TAG_SCORE, rng::hash_str(&record.id)]),
            ),
            ScorerKind::DocumentEntailment => {
                score_document_entailment(claim, &record.reference, self.nli.as_ref().expect("checked in new"))
            }
            ScorerKind::ConservativeEntailment | ScorerKind::AverageEntailment => score_sentence_entailment(
                claim,
                &record.reference,
                self.nli.as_ref().expect("checked in new"),
                self.spec.kind,
            ),
            ScorerKind::ModelConfidence => self.confidence(record, claim),
        }
    }

    fn confidence(&self, record: &QueryRecord, claim: &Claim) -> Result<f64> {
        let cfg = self.spec.prompt_config.expect("validated");
        let model = self.spec.model_id.as_deref().expect("validated");
        let client = self.chat.expect("checked in new");
        let prompt = build_confidence_prompt(&cfg, &record.query, &record.reference, claim)?;
        let temperature = if cfg.consistency_samples > 1 { 1.0 } else { 0.0 };
        let mut scores = Vec::with_capacity(cfg.consistency_samples as usize);
        for sample in 0..cfg.consistency_samples {
            let raw = self
                .gateway
                .complete(client, Role::Scorer, model, &prompt, temperature, sample)?;
            let parsed = parse_confidence_response(&raw, cfg.output_granularity);
            if parsed.parse_failed {
                self.parse_failures.fetch_add(1, Ordering::SeqCst);
            }
            scores.push(parsed.score);
        }
        consistency_average(&scores, &cfg)
    }

    pub fn score_set(&self, record: &QueryRecord, claims: &[Claim]) -> Result<ScoredClaimSet> {
        let mut set = ScoredClaimSet::new(record.id.clone(), self.scorer_id.clone());
        for c in claims {
            set.push(c.clone(), self.score_claim(record, c)?);
        }
        Ok(set)
    }
}

/// Rescores injected distractors against their own record.
pub struct RecordRescorer<'a> {
    pub engine: &'a ScoringEngine<'a>,
    pub records: HashMap<&'a str, &'a QueryRecord>,
}

impl Rescorer for RecordRescorer<'_> {
    fn score(&self, record_id: &str, claim: &Claim) -> Result<f64> {
        let record = self
            .records
            .get(record_id)
            .ok_or_else(|| Error::Config(format!("no record `{record_id}` to rescore against")))?;
        self.engine.score_claim(record, claim)
    }
}
