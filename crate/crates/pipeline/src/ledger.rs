//! Token accounting per role and model, and the FLOPs it implies.

use std::collections::BTreeMap;
use std::sync::Mutex;

use confilter_core::flops::{estimate_flops, Arch, ModelCostSpec};
use confilter_core::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Counts were estimated from whitespace because the server sent none.
    #[serde(default)]
    pub approximate: bool,
}

pub fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub calls: u64,
    /// Not serialized: it is the one figure that differs on a cached rerun.
    #[serde(skip_serializing, default)]
    pub cached_calls: u64,
    pub approximate_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Default)]
pub struct Ledger {
    tallies: Mutex<BTreeMap<(String, String), Tally>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelCost {
    pub active_params: f64,
    #[serde(default = "default_arch")]
    pub arch: Arch,
}

fn default_arch() -> Arch {
    Arch::Decoder
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerRow {
    pub role: String,
    pub model: String,
    #[serde(flatten)]
    pub tally: Tally,
    /// `None` when the model has no configured parameter count.
    pub flops: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSummary {
    pub total_flops: f64,
    pub rows: Vec<LedgerRow>,
    pub unpriced_models: Vec<String>,
    pub approximate: bool,
}

impl Ledger {
    /// Records one call. Cached replays are recorded too so that a rerun
    /// reports the same totals as the run that paid for the calls.
    pub fn record(&self, role: &str, model: &str, usage: Usage, cached: bool) {
        let mut map = self.tallies.lock().expect("ledger lock");
        let t = map.entry((role.to_string(), model.to_string())).or_default();
        t.calls += 1;
        t.cached_calls += u64::from(cached);
        t.approximate_calls += u64::from(usage.approximate);
        t.prompt_tokens += usage.prompt_tokens;
        t.completion_tokens += usage.completion_tokens;
    }

    pub fn snapshot(&self) -> BTreeMap<(String, String), Tally> {
        self.tallies.lock().expect("ledger lock").clone()
    }

    pub fn summary(&self, costs: &BTreeMap<String, ModelCost>) -> Result<CostSummary> {
        let mut rows = Vec::new();
        let mut unpriced = Vec::new();
        let mut total = 0.0;
        let mut approximate = false;
        for ((role, model), tally) in self.snapshot() {
            approximate |= tally.approximate_calls > 0;
            let flops = match costs.get(&model) {
                Some(c) => {
                    let spec = ModelCostSpec {
                        model_id: model.clone(),
                        active_params: c.active_params,
                        prompt_tokens: tally.prompt_tokens as i64,
                        generated_tokens: tally.completion_tokens as i64,
                    };
                    let f = estimate_flops(&spec, c.arch)?;
                    total += f;
                    Some(f)
                }
                None => {
                    if !unpriced.contains(&model) {
                        unpriced.push(model.clone());
                    }
                    None
                }
            };
            rows.push(LedgerRow {
                role,
                model,
                tally,
                flops,
            });
        }
        Ok(CostSummary {
            total_flops: total,
            rows,
            unpriced_models: unpriced,
            approximate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_matches_per_call_sum() {
        let ledger = Ledger::default();
        let calls = [(100, 20), (50, 5), (7, 0)];
        for (p, c) in calls {
            ledger.record(
                "judge",
                "m",
                Usage {
                    prompt_tokens: p,
                    completion_tokens: c,
                    approximate: false,
                },
                false,
            );
        }
        ledger.record("gen", "other", Usage::default(), true);
        let mut costs = BTreeMap::new();
        costs.insert(
            "m".to_string(),
            ModelCost {
                active_params: 3.6e9,
                arch: Arch::Decoder,
            },
        );
        let s = ledger.summary(&costs).unwrap();
        let per_call: f64 = calls.iter().map(|(p, c)| 2.0 * 3.6e9 * (p + c) as f64).sum();
        assert_eq!(s.total_flops, per_call);
        assert_eq!(s.unpriced_models, vec!["other".to_string()]);
    }

    #[test]
    fn whitespace_estimate() {
        assert_eq!(approx_tokens("a  b\nc"), 3);
        assert_eq!(approx_tokens(""), 0);
    }
}
