//! Single-record pipeline steps: generation, claim parsing, labeling,
//! merging, answer judging and LLM distractors. Every call goes through the
//! [`Gateway`].

use confilter_core::metrics::CorrectnessJudgment;
use confilter_core::model::{Claim, GeneratedOutput, QueryRecord};
use confilter_core::prompts::{as_bool, extract_json, Template};
use confilter_core::robustness::{AttackRequest, Attacker, Confusee};
use confilter_core::{Error, Result};
use serde_json::Value;

use crate::llm::{ChatClient, Gateway, Role};

/// A chat model bound to the gateway that meters and caches it.
#[derive(Clone, Copy)]
pub struct Bound<'a> {
    pub gateway: &'a Gateway,
    pub client: &'a dyn ChatClient,
    pub model: &'a str,
    pub temperature: f64,
}

impl Bound<'_> {
    pub fn ask(&self, role: Role, prompt: &str, sample: u32) -> Result<String> {
        self.gateway
            .complete(self.client, role, self.model, prompt, self.temperature, sample)
    }
}

/// A judge verdict; `parse_failed` marks replies that fell back to the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Judged<T> {
    pub value: T,
    pub parse_failed: bool,
}

fn field<'v>(v: &'v Value, key: &str) -> Option<&'v Value> {
    v.get(key)
}

pub fn generation_prompt(record: &QueryRecord, with_reference: bool) -> Result<String> {
    if with_reference {
        Template::GeneratorWithReference.render(&[("query", &record.query), ("reference", &record.reference)])
    } else {
        Template::GeneratorWithoutReference.render(&[("query", &record.query)])
    }
}

pub fn generate_response(gen: Bound<'_>, record: &QueryRecord, with_reference: bool) -> Result<GeneratedOutput> {
    let prompt = generation_prompt(record, with_reference)?;
    let raw = gen.ask(Role::Generator, &prompt, 0)?;
    let text = extract_json(&raw)
        .as_ref()
        .and_then(|v| field(v, "response"))
        .and_then(|v| match v {
            Value::String(s) => Some(s.clone()),
            Value::Null => None,
            other => Some(other.to_string()),
        })
        .ok_or_else(|| Error::Protocol(format!("record `{}`: generator reply has no \"response\"", record.id)))?;
    Ok(GeneratedOutput {
        record_id: record.id.clone(),
        text,
        generator_id: gen.model.to_string(),
        with_reference,
    })
}

fn subclaims(raw: &str) -> Option<Vec<String>> {
    let v = extract_json(raw)?;
    let items = match &v {
        Value::Array(items) => items.as_slice(),
        Value::Object(_) => return field(&v, "subclaim").and_then(Value::as_str).map(|s| vec![s.to_string()]),
        _ => return None,
    };
    items
        .iter()
        .map(|item| match item {
            Value::String(s) => Some(s.clone()),
            _ => field(item, "subclaim").and_then(Value::as_str).map(str::to_string),
        })
        .collect()
}

/// Splits a response into claims, in document order. An unparseable reply
/// is retried once as a fresh sample before the record fails.
pub fn parse_claims(parser: Bound<'_>, output: &GeneratedOutput) -> Result<Vec<Claim>> {
    if output.text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let prompt = Template::Parser.render(&[("input", &output.text)])?;
    for sample in 0..2 {
        let raw = parser.ask(Role::Parser, &prompt, sample)?;
        if let Some(texts) = subclaims(&raw) {
            return Ok(texts
                .into_iter()
                .enumerate()
                .map(|(j, t)| Claim::new(format!("{}:c{j}", output.record_id), t))
                .collect());
        }
    }
    Err(Error::Protocol(format!(
        "record `{}`: parser reply is not a subclaim list",
        output.record_id
    )))
}

pub fn labeling_prompt(claim: &Claim, record: &QueryRecord, use_ground_truth: bool) -> Result<String> {
    match (&record.ground_truth, use_ground_truth) {
        (Some(answer), true) => Template::LabelerGroundTruth.render(&[
            ("answer", answer),
            ("claim", &claim.text),
            ("query", &record.query),
            ("reference", &record.reference),
        ]),
        _ => Template::Labeler.render(&[
            ("claim", &claim.text),
            ("query", &record.query),
            ("reference", &record.reference),
        ]),
    }
}

/// Labels every claim. Unreadable verdicts become `false` and are counted.
pub fn label_claims(
    judge: Bound<'_>,
    claims: &[Claim],
    record: &QueryRecord,
    use_ground_truth: bool,
) -> Result<(Vec<Claim>, usize)> {
    let mut out = Vec::with_capacity(claims.len());
    let mut flagged = 0;
    for c in claims {
        let raw = judge.ask(Role::Labeler, &labeling_prompt(c, record, use_ground_truth)?, 0)?;
        let verdict = extract_json(&raw).as_ref().and_then(|v| field(v, "answer")).and_then(as_bool);
        if verdict.is_none() {
            flagged += 1;
            tracing::debug!(claim = %c.id, "unreadable label, defaulting to false");
        }
        let mut labeled = c.clone();
        labeled.label = Some(verdict.unwrap_or(false));
        out.push(labeled);
    }
    Ok((out, flagged))
}

fn claims_json(claims: &[Claim]) -> String {
    let texts: Vec<&str> = claims.iter().map(|c| c.text.as_str()).collect();
    serde_json::to_string(&texts).expect("strings serialize")
}

/// Merges retained claims into prose with the dataset's merger template.
pub fn merge_claims(merger: Bound<'_>, retained: &[Claim], record: &QueryRecord) -> Result<String> {
    if retained.is_empty() {
        return Ok(String::new());
    }
    let prompt = Template::merger_for(record.dataset_tag)
        .render(&[("claims", &claims_json(retained)), ("query", &record.query)])?;
    Ok(merger.ask(Role::Merger, &prompt, 0)?.trim().to_string())
}

/// Whether the merged answer is sufficient and correct. An empty answer is
/// not, and costs no call.
pub fn judge_sufficient(judge: Bound<'_>, record: &QueryRecord, merged: &str) -> Result<Judged<bool>> {
    if merged.trim().is_empty() {
        return Ok(Judged {
            value: false,
            parse_failed: false,
        });
    }
    let prompt = Template::SufficientCorrectness.render(&[
        ("query", &record.query),
        ("reference", &record.reference),
        ("response", merged),
    ])?;
    let raw = judge.ask(Role::Judge, &prompt, 0)?;
    let verdict = extract_json(&raw)
        .as_ref()
        .and_then(|v| field(v, "sufficient_correctness"))
        .and_then(as_bool);
    Ok(Judged {
        value: verdict.unwrap_or(false),
        parse_failed: verdict.is_none(),
    })
}

/// Grades the merged answer against the record's ground truth. An empty
/// answer is `missing` without a call.
pub fn judge_correctness(judge: Bound<'_>, record: &QueryRecord, merged: &str) -> Result<Judged<CorrectnessJudgment>> {
    let answer = record
        .ground_truth
        .as_deref()
        .ok_or_else(|| Error::Config(format!("record `{}` has no ground truth", record.id)))?;
    if merged.trim().is_empty() {
        return Ok(Judged {
            value: CorrectnessJudgment::Missing,
            parse_failed: false,
        });
    }
    let prompt = Template::Correctness.render(&[
        ("answer", answer),
        ("merged_string", merged),
        ("query", &record.query),
    ])?;
    let raw = judge.ask(Role::Judge, &prompt, 0)?;
    let verdict = extract_json(&raw)
        .as_ref()
        .and_then(|v| field(v, "answer"))
        .and_then(Value::as_str)
        .and_then(|s| s.parse::<CorrectnessJudgment>().ok());
    Ok(Judged {
        value: verdict.unwrap_or(CorrectnessJudgment::Incorrect),
        parse_failed: verdict.is_none(),
    })
}

/// Attacker backed by a chat model.
pub struct LlmAttacker<'a>(pub Bound<'a>);

impl Attacker for LlmAttacker<'_> {
    fn attack(&self, req: &AttackRequest<'_>) -> Result<String> {
        let list = |xs: &[String]| serde_json::to_string(xs).expect("strings serialize");
        let prompt = Template::Attacker.render(&[
            ("claims_not_work", &list(req.rejected)),
            ("claims_work", &list(req.accepted)),
            ("reference", req.reference),
            ("query", req.query),
            ("claim", req.claim),
        ])?;
        let raw = self.0.ask(Role::Attacker, &prompt, 0)?;
        extract_json(&raw)
            .as_ref()
            .and_then(|v| field(v, "subclaim"))
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Protocol("attacker reply has no \"subclaim\"".into()))
    }
}

/// Confusee backed by a chat model. Unreadable replies count as rejections.
pub struct LlmConfusee<'a>(pub Bound<'a>);

impl Confusee for LlmConfusee<'_> {
    fn is_plausible(&self, query: &str, reference: &str, candidate: &str) -> Result<bool> {
        let prompt = Template::Confusee.render(&[("claim", candidate), ("query", query), ("reference", reference)])?;
        let raw = self.0.ask(Role::Confusee, &prompt, 0)?;
        Ok(extract_json(&raw)
            .as_ref()
            .and_then(|v| field(v, "answer"))
            .and_then(as_bool)
            .unwrap_or(false))
    }
}
