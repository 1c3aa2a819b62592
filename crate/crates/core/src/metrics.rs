//! Factuality and informativeness metrics over filtered outputs.
//!
//! Metrics that can have an empty denominator return [`Error::Undefined`]
//! rather than a made-up 0 or 1; [`MetricsReport`] stores those as `None`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FilteredOutput, ScoredClaimSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub alpha: f64,
    pub ef: f64,
    pub power: Option<f64>,
    pub fpr: f64,
    /// Set when no source claim was non-factual, so `fpr` is a placeholder 0.
    pub fpr_degenerate: bool,
    pub nr: f64,
    pub nvef: Option<f64>,
    pub correctness: Option<f64>,
    pub sc: Option<f64>,
    pub csc: Option<f64>,
    pub n_test: usize,
    pub n_empty: usize,
}

fn all_factual(out: &FilteredOutput) -> Result<bool> {
    for c in &out.retained_claims {
        if !c.require_label()? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn check_paired(sources: &[ScoredClaimSet], filtered: &[FilteredOutput]) -> Result<()> {
    if sources.len() != filtered.len() {
        return Err(Error::Config(format!(
            "{} source sets but {} filtered outputs",
            sources.len(),
            filtered.len()
        )));
    }
    for (s, f) in sources.iter().zip(filtered) {
        if s.record_id != f.record_id {
            return Err(Error::Config(format!(
                "source `{}` paired with filtered output `{}`",
                s.record_id, f.record_id
            )));
        }
    }
    Ok(())
}

/// Fraction of outputs whose retained claims are all factual. An empty
/// output counts as factual.
pub fn empirical_factuality(filtered: &[FilteredOutput]) -> Result<f64> {
    if filtered.is_empty() {
        return Err(Error::Undefined("empirical factuality"));
    }
    let mut ok = 0usize;
    for out in filtered {
        ok += usize::from(all_factual(out)?);
    }
    Ok(ok as f64 / filtered.len() as f64)
}

/// Mean per-output share of factual source claims that were retained.
/// Outputs without factual source claims are left out of the mean.
pub fn power(sources: &[ScoredClaimSet], filtered: &[FilteredOutput]) -> Result<f64> {
    check_paired(sources, filtered)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (src, out) in sources.iter().zip(filtered) {
        let mut factual = 0usize;
        for sc in &src.claims {
            factual += usize::from(sc.claim.require_label()?);
        }
        if factual == 0 {
            continue;
        }
        let mut kept = 0usize;
        for c in &out.retained_claims {
            kept += usize::from(c.require_label()?);
        }
        sum += kept as f64 / factual as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Undefined("power"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FalsePositiveRate {
    pub value: f64,
    /// No non-factual claim existed in any source.
    pub degenerate: bool,
}

/// Pooled share of non-factual source claims that survived filtering.
pub fn false_positive_rate(sources: &[ScoredClaimSet], filtered: &[FilteredOutput]) -> Result<FalsePositiveRate> {
    check_paired(sources, filtered)?;
    let mut negatives = 0usize;
    let mut survived = 0usize;
    for (src, out) in sources.iter().zip(filtered) {
        for sc in &src.claims {
            negatives += usize::from(!sc.claim.require_label()?);
        }
        for c in &out.retained_claims {
            survived += usize::from(!c.require_label()?);
        }
    }
    Ok(if negatives == 0 {
        FalsePositiveRate {
            value: 0.0,
            degenerate: true,
        }
    } else {
        FalsePositiveRate {
            value: survived as f64 / negatives as f64,
            degenerate: false,
        }
    })
}

/// Fraction of outputs that kept at least one claim.
pub fn non_empty_rate(filtered: &[FilteredOutput]) -> Result<f64> {
    if filtered.is_empty() {
        return Err(Error::Undefined("non-empty rate"));
    }
    let kept = filtered.iter().filter(|f| !f.is_empty()).count();
    Ok(kept as f64 / filtered.len() as f64)
}

/// Empirical factuality over the non-empty outputs only.
pub fn non_vacuous_ef(filtered: &[FilteredOutput]) -> Result<f64> {
    let mut n = 0usize;
    let mut ok = 0usize;
    for out in filtered.iter().filter(|f| !f.is_empty()) {
        n += 1;
        ok += usize::from(all_factual(out)?);
    }
    if n == 0 {
        return Err(Error::Undefined("non-vacuous empirical factuality"));
    }
    Ok(ok as f64 / n as f64)
}

/// Judge verdict on a merged answer against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectnessJudgment {
    Perfect,
    Acceptable,
    Incorrect,
    Missing,
}

impl CorrectnessJudgment {
    pub fn is_correct(self, strict: bool) -> bool {
        match self {
            CorrectnessJudgment::Perfect => true,
            CorrectnessJudgment::Acceptable => !strict,
            CorrectnessJudgment::Incorrect | CorrectnessJudgment::Missing => false,
        }
    }
}

impl std::str::FromStr for CorrectnessJudgment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "perfect" => Ok(CorrectnessJudgment::Perfect),
            "acceptable" => Ok(CorrectnessJudgment::Acceptable),
            "incorrect" => Ok(CorrectnessJudgment::Incorrect),
            "missing" => Ok(CorrectnessJudgment::Missing),
            other => Err(Error::Protocol(format!("unknown correctness category `{other}`"))),
        }
    }
}

/// Share of answers judged correct. Acceptable answers count unless `strict`.
pub fn correctness(judgments: &[CorrectnessJudgment], strict: bool) -> Result<f64> {
    if judgments.is_empty() {
        return Err(Error::Undefined("correctness"));
    }
    let ok = judgments.iter().filter(|j| j.is_correct(strict)).count();
    Ok(ok as f64 / judgments.len() as f64)
}

pub fn sufficient_correctness(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::Undefined("sufficient correctness"));
    }
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// Among outputs whose unfiltered answer was sufficiently correct, the share
/// whose filtered answer still is.
pub fn conditional_sc(sc_unfiltered: &[bool], sc_filtered: &[bool]) -> Result<f64> {
    if sc_unfiltered.len() != sc_filtered.len() {
        return Err(Error::Config(format!(
            "{} unfiltered flags but {} filtered flags",
            sc_unfiltered.len(),
            sc_filtered.len()
        )));
    }
    let den = sc_unfiltered.iter().filter(|&&u| u).count();
    if den == 0 {
        return Err(Error::Undefined("conditional sufficient correctness"));
    }
    let num = sc_unfiltered.iter().zip(sc_filtered).filter(|(&u, &f)| u && f).count();
    Ok(num as f64 / den as f64)
}

/// Turns an undefined metric into `None`, passing other errors through.
pub fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Judge outputs that feed the answer-level metrics.
#[derive(Debug, Clone, Default)]
pub struct Judgments<'a> {
    pub correctness: Option<&'a [CorrectnessJudgment]>,
    pub strict_correctness: bool,
    pub sc_unfiltered: Option<&'a [bool]>,
    pub sc_filtered: Option<&'a [bool]>,
}

/// Computes every metric for one calibrated threshold.
pub fn evaluate(
    alpha: f64,
    sources: &[ScoredClaimSet],
    filtered: &[FilteredOutput],
    judged: &Judgments<'_>,
) -> Result<MetricsReport> {
    check_paired(sources, filtered)?;
    let fpr = false_positive_rate(sources, filtered)?;
    let csc = match (judged.sc_unfiltered, judged.sc_filtered) {
        (Some(u), Some(f)) => defined(conditional_sc(u, f))?,
        _ => None,
    };
    Ok(MetricsReport {
        alpha,
        ef: empirical_factuality(filtered)?,
        power: defined(power(sources, filtered))?,
        fpr: fpr.value,
        fpr_degenerate: fpr.degenerate,
        nr: non_empty_rate(filtered)?,
        nvef: defined(non_vacuous_ef(filtered))?,
        correctness: match judged.correctness {
            Some(j) => defined(correctness(j, judged.strict_correctness))?,
            None => None,
        },
        sc: match judged.sc_filtered {
            Some(f) => defined(sufficient_correctness(f))?,
            None => None,
        },
        csc,
        n_test: filtered.len(),
        n_empty: filtered.iter().filter(|f| f.is_empty()).count(),
    })
}
