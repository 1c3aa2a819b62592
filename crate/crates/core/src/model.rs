//! Records, claims and thresholds, plus the JSONL formats they are stored in.
//!
//! Every file is one JSON object per line, UTF-8, keyed by `record_id`
//! (`id` for query records). Field names match the struct fields below.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Threshold value that keeps every claim under the strict `score > tau` rule.
pub const SENTINEL_LOW: f64 = -1.0;
/// Threshold value that removes every claim.
pub const SENTINEL_HIGH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Factscore,
    Math,
    Nq,
    Synthetic,
}

/// One benchmark item: the query, its reference text and an optional answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub query: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    pub dataset_tag: DatasetTag,
}

/// A response produced by a generator model for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedOutput {
    pub record_id: String,
    pub text: String,
    pub generator_id: String,
    pub with_reference: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClaimOrigin {
    #[default]
    Generated,
    Distractor,
}

/// An atomic claim. `label` is `Some(true)` when the claim is factual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub label: Option<bool>,
    #[serde(default)]
    pub origin: ClaimOrigin,
}

impl Claim {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label: None,
            origin: ClaimOrigin::Generated,
        }
    }

    pub fn labeled(id: impl Into<String>, text: impl Into<String>, factual: bool) -> Self {
        Self {
            label: Some(factual),
            ..Self::new(id, text)
        }
    }

    /// The label, or a missing-label error naming this claim.
    pub fn require_label(&self) -> Result<bool> {
        self.label.ok_or_else(|| Error::MissingLabel {
            claim_id: self.id.clone(),
        })
    }
}

/// The parsed claims of one output, before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimList {
    pub record_id: String,
    pub claims: Vec<Claim>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredClaim {
    #[serde(flatten)]
    pub claim: Claim,
    pub score: f64,
}

/// The claims of one output scored by a single scorer, in parse order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredClaimSet {
    pub record_id: String,
    pub scorer_id: String,
    pub claims: Vec<ScoredClaim>,
}

impl ScoredClaimSet {
    pub fn new(record_id: impl Into<String>, scorer_id: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            scorer_id: scorer_id.into(),
            claims: Vec::new(),
        }
    }

    /// Builds a set from `(score, label)` pairs with generated ids `c0, c1, ...`.
    pub fn from_pairs(record_id: &str, scorer_id: &str, pairs: &[(f64, bool)]) -> Self {
        let claims = pairs
            .iter()
            .enumerate()
            .map(|(i, &(score, label))| ScoredClaim {
                claim: Claim::labeled(format!("c{i}"), format!("claim {i}"), label),
                score,
            })
            .collect();
        Self {
            record_id: record_id.to_string(),
            scorer_id: scorer_id.to_string(),
            claims,
        }
    }

    pub fn push(&mut self, claim: Claim, score: f64) {
        self.claims.push(ScoredClaim { claim, score });
    }

    pub fn len(&self) -> usize {
        self.claims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.claims.is_empty()
    }

    /// Checks score range and claim-id uniqueness.
    pub fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for sc in &self.claims {
            if !(0.0..=1.0).contains(&sc.score) {
                return Err(Error::ScoreOutOfRange {
                    claim_id: sc.claim.id.clone(),
                    score: sc.score,
                });
            }
            if !seen.insert(sc.claim.id.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate claim id `{}` in record `{}`",
                    sc.claim.id, self.record_id
                )));
            }
        }
        Ok(())
    }
}

/// A calibrated score cutoff. `value` is either in `[0, 1]` or one of the
/// two sentinels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub alpha: f64,
    pub calibration_size: usize,
}

impl Threshold {
    pub fn is_low_sentinel(&self) -> bool {
        self.value == SENTINEL_LOW
    }

    pub fn is_high_sentinel(&self) -> bool {
        self.value == SENTINEL_HIGH
    }

    /// Strict retention rule.
    pub fn retains(&self, score: f64) -> bool {
        score > self.value
    }
}

/// The claims that survived filtering, optionally merged back into prose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredOutput {
    pub record_id: String,
    pub retained_claims: Vec<Claim>,
    #[serde(default)]
    pub merged_text: Option<String>,
    pub threshold_used: Threshold,
}

impl FilteredOutput {
    pub fn is_empty(&self) -> bool {
        self.retained_claims.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    EmptyId,
    DuplicateId,
    EmptyReference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub record_id: String,
    pub rule: Rule,
}

/// Checks the corpus invariants; an empty report means the corpus is valid.
pub fn validate_corpus(records: &[QueryRecord]) -> Vec<Violation> {
    let mut seen = HashSet::new();
    let mut report = Vec::new();
    for r in records {
        if r.id.trim().is_empty() {
            report.push(Violation {
                record_id: r.id.clone(),
                rule: Rule::EmptyId,
            });
        } else if !seen.insert(r.id.as_str()) {
            report.push(Violation {
                record_id: r.id.clone(),
                rule: Rule::DuplicateId,
            });
        }
        if r.dataset_tag != DatasetTag::Synthetic && r.reference.trim().is_empty() {
            report.push(Violation {
                record_id: r.id.clone(),
                rule: Rule::EmptyReference,
            });
        }
    }
    report
}

/// Seeded random partition into `(calibration, test)`.
///
/// Both halves keep the input order; calibration has exactly `n` items.
pub fn split_calibration_test<T: Clone>(items: &[T], n: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if n > items.len() {
        return Err(Error::SplitSize {
            requested: n,
            available: items.len(),
        });
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x5e11]));
    let mut in_calib = vec![false; items.len()];
    for &i in &idx[..n] {
        in_calib[i] = true;
    }
    let mut calib = Vec::with_capacity(n);
    let mut test = Vec::with_capacity(items.len() - n);
    for (item, c) in items.iter().zip(in_calib) {
        if c {
            calib.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((calib, test))
}

/// Unit of exchangeability used when calibrating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationUnit {
    /// One candidate threshold per query (the default).
    #[default]
    PerQuery,
    /// Each claim is its own calibration example, as in corpora that only
    /// ship a flat list of annotated claims.
    PerClaim,
}

/// Re-groups claim sets according to the calibration unit.
pub fn calibration_units(sets: &[ScoredClaimSet], unit: CalibrationUnit) -> Vec<ScoredClaimSet> {
    match unit {
        CalibrationUnit::PerQuery => sets.to_vec(),
        CalibrationUnit::PerClaim => sets
            .iter()
            .flat_map(|s| {
                s.claims.iter().map(move |c| ScoredClaimSet {
                    record_id: format!("{}#{}", s.record_id, c.claim.id),
                    scorer_id: s.scorer_id.clone(),
                    claims: vec![c.clone()],
                })
            })
            .collect(),
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        let line = serde_json::to_string(item).expect("record types always serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, reference: &str, tag: DatasetTag) -> QueryRecord {
        QueryRecord {
            id: id.into(),
            query: format!("query {id}"),
            reference: reference.into(),
            ground_truth: None,
            dataset_tag: tag,
        }
    }

    #[test]
    fn duplicate_id_reported_once() {
        let recs = vec![rec("a", "r", DatasetTag::Nq), rec("a", "r", DatasetTag::Nq)];
        let report = validate_corpus(&recs);
        assert_eq!(
            report,
            vec![Violation {
                record_id: "a".into(),
                rule: Rule::DuplicateId
            }]
        );
    }

    #[test]
    fn empty_corpus_is_valid() {
        assert!(validate_corpus(&[]).is_empty());
    }

    #[test]
    fn empty_reference_violates_for_nq_only() {
        let report = validate_corpus(&[rec("a", "", DatasetTag::Nq)]);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].rule, Rule::EmptyReference);
        assert!(validate_corpus(&[rec("b", "", DatasetTag::Synthetic)]).is_empty());
    }

    #[test]
    fn split_whole_corpus_leaves_empty_test() {
        let items: Vec<u32> = (0..10).collect();
        let (c, t) = split_calibration_test(&items, 10, 1).unwrap();
        assert_eq!(c.len(), 10);
        assert!(t.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let items: Vec<u32> = (0..100).collect();
        let a = split_calibration_test(&items, 50, 7).unwrap();
        let b = split_calibration_test(&items, 50, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 50);
        assert_eq!(a.1.len(), 50);
        assert!(a.0.iter().all(|x| !a.1.contains(x)));
        let other = split_calibration_test(&items, 50, 8).unwrap();
        assert_ne!(a.0, other.0);
    }

    #[test]
    fn split_rejects_oversized_calibration() {
        let items = [1, 2, 3];
        assert!(matches!(
            split_calibration_test(&items, 4, 0),
            Err(Error::SplitSize { requested: 4, available: 3 })
        ));
    }

    #[test]
    fn scored_claim_set_wire_shape() {
        let set = ScoredClaimSet::from_pairs("r1", "synthetic", &[(0.5, true)]);
        let v = serde_json::to_value(&set).unwrap();
        assert_eq!(v["record_id"], "r1");
        assert_eq!(v["claims"][0]["id"], "c0");
        assert_eq!(v["claims"][0]["label"], true);
        assert_eq!(v["claims"][0]["origin"], "generated");
        assert_eq!(v["claims"][0]["score"], 0.5);
    }

    #[test]
    fn per_claim_units_are_singletons() {
        let set = ScoredClaimSet::from_pairs("r", "s", &[(0.1, true), (0.2, false)]);
        let units = calibration_units(&[set], CalibrationUnit::PerClaim);
        assert_eq!(units.len(), 2);
        assert_eq!(units[1].record_id, "r#c1");
        assert!(units.iter().all(|u| u.len() == 1));
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = read_jsonl::<QueryRecord>("/nonexistent/records.jsonl").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn check_rejects_out_of_range_score() {
        let set = ScoredClaimSet::from_pairs("r", "s", &[(1.5, true)]);
        assert!(matches!(set.check(), Err(Error::ScoreOutOfRange { .. })));
    }
}
