//! OpenAI-compatible chat client and the cached, metered gateway in front
//! of it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use confilter_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::http::{self, RetryPolicy};
use crate::ledger::{approx_tokens, Ledger, Usage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub n: u32,
}

impl ChatRequest {
    pub fn user(model: &str, prompt: &str, temperature: f64) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![Message {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature,
            n: 1,
        }
    }

    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

pub trait ChatClient: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<Completion>;
}

#[derive(Debug, Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

pub struct OpenAiClient {
    url: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl OpenAiClient {
    /// `base_url` is the server root, with or without a trailing `/v1`.
    pub fn new(base_url: &str, api_key: Option<String>, retry: RetryPolicy) -> Result<Self> {
        let root = base_url.trim_end_matches('/').trim_end_matches("/v1");
        Ok(Self {
            url: http::join_url(root, "/v1/chat/completions"),
            api_key,
            http: http::client(&retry)?,
            retry,
        })
    }
}

impl ChatClient for OpenAiClient {
    fn chat(&self, req: &ChatRequest) -> Result<Completion> {
        let reply: WireReply = http::post_json(&self.http, &self.retry, &self.url, self.api_key.as_deref(), req)?;
        let text = reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Protocol(format!("{}: reply has no message content", self.url)))?;
        let usage = match reply.usage {
            Some(u) => Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
                approximate: false,
            },
            None => Usage {
                prompt_tokens: approx_tokens(&req.prompt_text()),
                completion_tokens: approx_tokens(&text),
                approximate: true,
            },
        };
        Ok(Completion { text, usage })
    }
}

/// Which part of the pipeline issued a call. Used in cache keys and cost
/// accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Parser,
    Labeler,
    Scorer,
    Merger,
    Attacker,
    Confusee,
    Judge,
    Nli,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Parser => "parser",
            Role::Labeler => "labeler",
            Role::Scorer => "scorer",
            Role::Merger => "merger",
            Role::Attacker => "attacker",
            Role::Confusee => "confusee",
            Role::Judge => "judge",
            Role::Nli => "nli",
        }
    }
}

/// Routes every model call through the prompt cache and the cost ledger.
pub struct Gateway {
    pub cache: Cache,
    pub ledger: Arc<Ledger>,
    network_calls: AtomicU64,
}

#[derive(Serialize)]
struct LlmKey<'a> {
    role: &'a str,
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    sample: u32,
}

impl Gateway {
    pub fn new(cache: Cache, ledger: Arc<Ledger>) -> Self {
        Self {
            cache,
            ledger,
            network_calls: AtomicU64::new(0),
        }
    }

    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub(crate) fn count_network_call(&self) {
        self.network_calls.fetch_add(1, Ordering::SeqCst);
    }

    /// One completion. `sample` distinguishes repeated draws of the same
    /// prompt so each gets its own cache entry.
    pub fn complete(
        &self,
        client: &dyn ChatClient,
        role: Role,
        model: &str,
        prompt: &str,
        temperature: f64,
        sample: u32,
    ) -> Result<String> {
        let key = Cache::key(&LlmKey {
            role: role.as_str(),
            model,
            prompt,
            temperature,
            sample,
        });
        if let Some(hit) = self.cache.get::<Completion>("llm", &key) {
            self.ledger.record(role.as_str(), model, hit.usage, true);
            return Ok(hit.text);
        }
        self.count_network_call();
        let done = client.chat(&ChatRequest::user(model, prompt, temperature))?;
        self.cache.put("llm", &key, &done)?;
        self.ledger.record(role.as_str(), model, done.usage, false);
        Ok(done.text)
    }
}
