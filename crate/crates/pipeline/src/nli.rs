//! Client for the NLI service and a caching wrapper around any entailer.
//!
//! Wire protocol: `POST /v1/entail` with `{"pairs": [{"premise", "hypothesis"}], "model"?}`
//! answered by `{"triples": [{"entailment", "neutral", "contradiction"}], "model", "latency_ms"}`.

use std::sync::Arc;

use confilter_core::scorers::{EntailPair, Entailer, EntailmentTriple};
use confilter_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::http::{self, RetryPolicy};
use crate::ledger::{approx_tokens, Ledger, Usage};
use crate::llm::{Gateway, Role};

pub const DEFAULT_BATCH_CAP: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailRequest {
    pub pairs: Vec<EntailPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailResponse {
    pub triples: Vec<EntailmentTriple>,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub latency_ms: f64,
}

pub struct HttpEntailer {
    url: String,
    model: Option<String>,
    batch_cap: usize,
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpEntailer {
    pub fn new(base_url: &str, model: Option<String>, retry: RetryPolicy) -> Result<Self> {
        Ok(Self {
            url: http::join_url(base_url, "/v1/entail"),
            model,
            batch_cap: DEFAULT_BATCH_CAP,
            http: http::client(&retry)?,
            retry,
        })
    }

    pub fn with_batch_cap(mut self, cap: usize) -> Self {
        self.batch_cap = cap.max(1);
        self
    }
}

impl Entailer for HttpEntailer {
    fn entail(&self, pairs: &[EntailPair]) -> Result<Vec<EntailmentTriple>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.batch_cap) {
            let body = EntailRequest {
                pairs: chunk.to_vec(),
                model: self.model.clone(),
            };
            let reply: EntailResponse = http::post_json(&self.http, &self.retry, &self.url, None, &body)?;
            if reply.triples.len() != chunk.len() {
                return Err(Error::Protocol(format!(
                    "{}: sent {} pairs, received {} triples",
                    self.url,
                    chunk.len(),
                    reply.triples.len()
                )));
            }
            for t in &reply.triples {
                t.validate().map_err(|e| Error::Protocol(format!("{}: {e}", self.url)))?;
            }
            out.extend(reply.triples);
        }
        Ok(out)
    }
}

/// Caches triples per pair and meters processed tokens.
pub struct CachedEntailer<'a> {
    pub inner: Arc<dyn Entailer>,
    pub model_id: String,
    pub gateway: &'a Gateway,
}

impl CachedEntailer<'_> {
    fn key(&self, p: &EntailPair) -> String {
        Cache::key(&("nli", &self.model_id, &p.premise, &p.hypothesis))
    }

    fn ledger(&self) -> &Ledger {
        &self.gateway.ledger
    }
}

fn pair_usage(p: &EntailPair) -> Usage {
    Usage {
        prompt_tokens: approx_tokens(&p.premise) + approx_tokens(&p.hypothesis),
        completion_tokens: 0,
        approximate: true,
    }
}

impl Entailer for CachedEntailer<'_> {
    fn entail(&self, pairs: &[EntailPair]) -> Result<Vec<EntailmentTriple>> {
        let keys: Vec<String> = pairs.iter().map(|p| self.key(p)).collect();
        let mut out: Vec<Option<EntailmentTriple>> = keys
            .iter()
            .map(|k| self.gateway.cache.get::<EntailmentTriple>("nli", k))
            .collect();
        let missing: Vec<usize> = (0..pairs.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            self.gateway.count_network_call();
            let batch: Vec<EntailPair> = missing.iter().map(|&i| pairs[i].clone()).collect();
            let fresh = self.inner.entail(&batch)?;
            if fresh.len() != batch.len() {
                return Err(Error::Protocol(format!(
                    "sent {} pairs, received {} triples",
                    batch.len(),
                    fresh.len()
                )));
            }
            for (&i, t) in missing.iter().zip(fresh) {
                self.gateway.cache.put("nli", &keys[i], &t)?;
                out[i] = Some(t);
            }
        }
        for (i, p) in pairs.iter().enumerate() {
            self.ledger()
                .record(Role::Nli.as_str(), &self.model_id, pair_usage(p), !missing.contains(&i));
        }
        Ok(out.into_iter().map(|t| t.expect("filled above")).collect())
    }
}
