//! End-to-end runs against a scripted chat model.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use confilter_core::model::{write_jsonl, ClaimList, DatasetTag, QueryRecord, ScoredClaimSet};
use confilter_core::{Error, Result};
use confilter_pipeline::config::RunConfig;
use confilter_pipeline::experiment::{run_experiment, Clients, Runner, GENERATIONS, LABELED, SCORED};
use confilter_pipeline::ledger::Usage;
use confilter_pipeline::llm::{ChatClient, ChatRequest, Completion};
use regex::Regex;

/// Answers each prompt template in a fixed way. Items whose number is a
/// multiple of 13 make the generator fail.
struct Scripted {
    calls: AtomicUsize,
    item: Regex,
    parts: Regex,
}

impl Scripted {
    fn new() -> Arc<Self> {
        Arc::new(Self {
            calls: AtomicUsize::new(0),
            item: Regex::new(r"item-(\d+)").unwrap(),
            parts: Regex::new(r"The parts: (\[.*\])").unwrap(),
        })
    }

    fn item(&self, p: &str) -> u64 {
        self.item.captures(p).map_or(0, |c| c[1].parse().unwrap())
    }

    fn reply(&self, p: &str) -> Result<String> {
        let after = |tag: &str| p.rsplit(tag).next().unwrap().lines().next().unwrap_or("").to_string();
        let n = self.item(p);
        let text = if p.contains("answers queries strictly") {
            if n.is_multiple_of(13) {
                return Err(Error::Transport("connection reset".into()));
            }
            let wrong = if n.is_multiple_of(3) { format!(" Item-{n} is WRONG-{n}.") } else { String::new() };
            format!(r#"{{"response": "Item-{n} is red. Item-{n} weighs {n} kg.{wrong}"}}"#)
        } else if p.contains("breaking down input text") {
            let input = p.rsplit("Input:").next().unwrap().split("Output:").next().unwrap().trim();
            let claims: Vec<String> = input
                .split_inclusive(". ")
                .map(|s| format!(r#"{{"subclaim": {}}}"#, serde_json::to_string(s.trim()).unwrap()))
                .collect();
            format!("[{}]", claims.join(", "))
        } else if p.contains("assigning a label to a claim") {
            format!(r#"{{"reasoning": "r", "answer": {}}}"#, !p.contains("WRONG"))
        } else if p.contains("assigning a confidence score") {
            let claim = after("Claim: ");
            let score = if claim.contains("WRONG") {
                (n % 60) as f64 / 100.0
            } else if claim.contains("weighs") {
                0.4 + (n % 50) as f64 / 100.0
            } else {
                0.5 + (n % 47) as f64 / 100.0
            };
            format!(r#"{{"score": {score}}}"#)
        } else if p.contains("natural question and parts") {
            let list: Vec<String> = serde_json::from_str(&self.parts.captures(p).unwrap()[1]).unwrap();
            list.join(" ")
        } else if p.contains("expert LLM evaluator") {
            let response = p.rsplit("### RESPONSE").next().unwrap();
            format!(
                r#"{{"sufficient_correctness": {}}}"#,
                u8::from(!response.contains("WRONG") && response.contains("red"))
            )
        } else if p.contains("evaluating an answer provided by an LLM") {
            let answer = after("Predicted Answer: ");
            let verdict = if answer.contains("WRONG") {
                "incorrect"
            } else if answer.contains("weighs") {
                "perfect"
            } else {
                "acceptable"
            };
            format!(r#"{{"answer": "{verdict}"}}"#)
        } else {
            panic!("unexpected prompt: {p}");
        };
        Ok(text)
    }
}

impl ChatClient for Scripted {
    fn chat(&self, req: &ChatRequest) -> Result<Completion> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = self.reply(&req.prompt_text())?;
        Ok(Completion {
            usage: Usage {
                prompt_tokens: 100,
                completion_tokens: 10,
                approximate: false,
            },
            text,
        })
    }
}

fn corpus(dir: &Path, n: u64) {
    let records: Vec<QueryRecord> = (1..=n)
        .map(|i| QueryRecord {
            id: format!("r{i}"),
            query: format!("What do we know about item-{i}?"),
            reference: format!("Item-{i} is red. Item-{i} weighs {i} kg."),
            ground_truth: Some(format!("Item-{i} is red and weighs {i} kg.")),
            dataset_tag: DatasetTag::Nq,
        })
        .collect();
    write_jsonl(dir.join("corpus.jsonl"), &records).unwrap();
}

fn llm_config(dir: &Path) -> RunConfig {
    let text = r#"
corpus = "corpus.jsonl"
alphas = [0.1, 0.25]
cache_dir = "run"
seed = 3
trials = 3
judge_answers = true
concurrency = 4

[generator]
endpoint = "http://unused"
model_id = "gen-model"

[judge]
endpoint = "http://unused"
model_id = "judge-model"

[scorer]
kind = "model_confidence"
endpoint = "http://unused"
model_id = "scorer-model"

[scorer.prompt_config]
include_reference = true
highlight_evidence = true
chain_of_thought = true
output_granularity = "scalar"
consistency_samples = 2

[models.gen-model]
active_params = 3.6e9

[models.judge-model]
active_params = 8.19e9
"#;
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    RunConfig::load(&path).unwrap()
}

fn stub_clients(stub: &Arc<Scripted>) -> Clients {
    Clients {
        generator: Some(stub.clone()),
        judge: Some(stub.clone()),
        scorer: Some(stub.clone()),
        nli: None,
    }
}

#[test]
fn rerun_is_served_from_cache_and_reproduces_reports() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 40);
    let cfg = llm_config(dir.path());

    let stub = Scripted::new();
    let clients = stub_clients(&stub);
    let first = Runner::new(&cfg, &clients).unwrap();
    let out = first.run().unwrap();
    assert!(first.gateway.network_calls() > 0);
    let csv1 = std::fs::read(&out.csv).unwrap();
    let json1 = std::fs::read(&out.json).unwrap();

    // Items 13, 26 and 39 fail in generation; the rest carry on.
    let report = &out.report;
    assert_eq!(report.failure_counts.get("generate"), Some(&3));
    assert_eq!(report.n_scored, 37);
    assert_eq!(report.rows.len(), 2);
    let row = &report.rows[0];
    assert_eq!(row.trials, 3);
    assert!(row.sc.is_some() && row.correctness.is_some() && row.csc.is_some());

    // FLOPs are the per-call sum for priced models only.
    let gen = report.cost.rows.iter().find(|r| r.role == "generator").unwrap();
    assert_eq!(gen.flops, Some(2.0 * 3.6e9 * (110 * gen.tally.calls) as f64));
    assert_eq!(report.cost.unpriced_models, vec!["scorer-model".to_string()]);
    let priced: f64 = report.cost.rows.iter().filter_map(|r| r.flops).sum();
    assert_eq!(report.cost.total_flops, priced);

    let before = stub.calls.load(Ordering::SeqCst);
    let second = Runner::new(&cfg, &clients).unwrap();
    let again = second.run().unwrap();
    // Only the three failed generations go back to the model.
    assert_eq!(second.gateway.network_calls(), 3);
    assert_eq!(stub.calls.load(Ordering::SeqCst), before + 3);
    assert_eq!(std::fs::read(&again.csv).unwrap(), csv1);
    assert_eq!(std::fs::read(&again.json).unwrap(), json1);

    for name in [GENERATIONS, LABELED, SCORED] {
        assert!(cfg.stage_dir().join(name).exists(), "{name} not persisted");
    }
}

#[test]
fn stages_persist_reconstructible_intermediates() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 12);
    let cfg = llm_config(dir.path());
    let stub = Scripted::new();
    run_experiment(&cfg, &stub_clients(&stub)).unwrap();

    let labeled: Vec<ClaimList> = confilter_core::model::read_jsonl(cfg.stage_dir().join(LABELED)).unwrap();
    let r3 = labeled.iter().find(|l| l.record_id == "r3").unwrap();
    let labels: Vec<Option<bool>> = r3.claims.iter().map(|c| c.label).collect();
    assert_eq!(labels, [Some(true), Some(true), Some(false)]);
    assert_eq!(r3.claims[1].text, "Item-3 weighs 3 kg.");

    let scored: Vec<ScoredClaimSet> = confilter_core::model::read_jsonl(cfg.stage_dir().join(SCORED)).unwrap();
    assert!(scored.iter().all(|s| s.scorer_id == "model_confidence:scorer-model:ref=1:hl=1:cot=1:scalar:n=2"));
    assert!((scored.iter().find(|s| s.record_id == "r3").unwrap().claims[2].score - 0.03).abs() < 1e-12);
}

#[test]
fn missing_endpoint_stops_the_run_before_any_call() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 4);
    let cfg = llm_config(dir.path());
    let stub = Scripted::new();
    let clients = Clients {
        judge: None,
        ..stub_clients(&stub)
    };
    let runner = Runner::new(&cfg, &clients).unwrap();
    assert!(runner.run().is_err());
    assert_eq!(stub.calls.load(Ordering::SeqCst), 4);
}

#[test]
fn synthetic_run_meets_the_target_on_average() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<QueryRecord> = (0..1000)
        .map(|i| QueryRecord {
            id: format!("s{i}"),
            query: format!("query {i}"),
            reference: String::new(),
            ground_truth: None,
            dataset_tag: DatasetTag::Synthetic,
        })
        .collect();
    write_jsonl(dir.path().join("corpus.jsonl"), &records).unwrap();
    let text = r#"
corpus = "corpus.jsonl"
alphas = [0.1]
cache_dir = "run"
trials = 40

[synthetic_claims]
claims_per_query = [3, 10]
p_nonfactual = 0.3

[scorer]
kind = "synthetic"
"#;
    let path = dir.path().join("run.toml");
    std::fs::write(&path, text).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    let out = run_experiment(&cfg, &Clients::default()).unwrap();
    let efs: Vec<f64> = out.report.trials.iter().map(|t| t.reports[0].ef).collect();
    let mean = efs.iter().sum::<f64>() / efs.len() as f64;
    let sd = (efs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (efs.len() - 1) as f64).sqrt();
    let se = sd / (efs.len() as f64).sqrt();
    assert!(mean >= 0.9 - 2.0 * se, "mean EF {mean} (se {se})");
    assert_eq!(out.report.rows[0].ef, mean);
}
