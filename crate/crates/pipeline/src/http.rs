//! Blocking HTTP plumbing shared by the LLM and NLI clients.

use std::thread;
use std::time::Duration;

use confilter_core::{Error, Result};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_backoff_ms: 250,
            max_backoff_ms: 8_000,
            timeout_secs: 120,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

/// Outcome of one attempt that did not succeed.
pub enum Failure {
    Retryable(Error),
    Fatal(Error),
}

/// Runs `attempt` until it succeeds, fails fatally, or the policy runs out.
pub fn with_retry<T>(policy: &RetryPolicy, mut attempt: impl FnMut() -> Result<T, Failure>) -> Result<T> {
    let max = policy.max_attempts.max(1);
    for n in 1..=max {
        match attempt() {
            Ok(v) => return Ok(v),
            Err(Failure::Fatal(e)) => return Err(e),
            Err(Failure::Retryable(e)) if n == max => return Err(e),
            Err(Failure::Retryable(e)) => {
                tracing::warn!(attempt = n, error = %e, "retrying request");
                thread::sleep(policy.backoff(n));
            }
        }
    }
    unreachable!("the final attempt always returns")
}

pub fn client(policy: &RetryPolicy) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(policy.timeout_secs))
        .build()
        .map_err(|e| Error::Transport(e.to_string()))
}

/// POSTs `body` as JSON and decodes the JSON reply. Connection failures,
/// timeouts, 429 and 5xx are retried; other statuses and undecodable bodies
/// are protocol errors.
pub fn post_json<B: Serialize, T: for<'de> Deserialize<'de>>(
    http: &reqwest::blocking::Client,
    policy: &RetryPolicy,
    url: &str,
    bearer: Option<&str>,
    body: &B,
) -> Result<T> {
    with_retry(policy, || {
        let mut req = http.post(url).json(body);
        if let Some(key) = bearer {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Failure::Retryable(Error::Transport(format!("{url}: {e}"))))?;
        let status = resp.status();
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(Failure::Retryable(Error::Transport(format!("{url}: HTTP {status}"))));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Failure::Fatal(Error::Protocol(format!("{url}: HTTP {status}: {text}"))));
        }
        let bytes = resp
            .bytes()
            .map_err(|e| Failure::Retryable(Error::Transport(format!("{url}: {e}"))))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Failure::Fatal(Error::Protocol(format!("{url}: undecodable reply: {e}"))))
    })
}

pub fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            initial_backoff_ms: 100,
            max_backoff_ms: 350,
            timeout_secs: 1,
        };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(3), Duration::from_millis(350));
    }

    #[test]
    fn retries_until_success_or_exhaustion() {
        let p = RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 0,
            max_backoff_ms: 0,
            timeout_secs: 1,
        };
        let mut n = 0;
        let ok = with_retry(&p, || {
            n += 1;
            if n < 3 {
                Err(Failure::Retryable(Error::Transport("down".into())))
            } else {
                Ok(n)
            }
        });
        assert_eq!(ok.unwrap(), 3);
        let mut calls = 0;
        let err: Result<()> = with_retry(&p, || {
            calls += 1;
            Err(Failure::Retryable(Error::Transport("down".into())))
        });
        assert!(err.is_err());
        assert_eq!(calls, 3);
        let mut calls = 0;
        let fatal: Result<()> = with_retry(&p, || {
            calls += 1;
            Err(Failure::Fatal(Error::Protocol("bad".into())))
        });
        assert!(fatal.is_err());
        assert_eq!(calls, 1);
    }

    #[test]
    fn url_joining() {
        assert_eq!(join_url("http://h:1/", "/v1/entail"), "http://h:1/v1/entail");
        assert_eq!(join_url("http://h:1", "v1/entail"), "http://h:1/v1/entail");
    }
}
