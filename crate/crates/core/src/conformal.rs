//! Split-conformal calibration and strict-threshold claim filtering.
//!
//! For each calibration output the *candidate threshold* is the smallest
//! cutoff `tau` such that every claim with `score > tau` is factual. The
//! calibrated threshold is the `k`-th smallest candidate with
//! `k = ceil((n + 1)(1 - alpha))`; when `k > n` nothing can be certified and
//! the high sentinel is returned, which filters every claim. Filtering a fresh
//! exchangeable output with that threshold leaves an all-factual claim set
//! with probability at least `1 - alpha`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FilteredOutput, ScoredClaimSet, Threshold, SENTINEL_HIGH, SENTINEL_LOW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateThreshold {
    pub record_id: String,
    pub value: f64,
}

/// Smallest cutoff whose strict filtrate is all factual: the highest score
/// carried by a non-factual claim, or [`SENTINEL_LOW`] if there is none.
pub fn candidate_threshold(set: &ScoredClaimSet) -> Result<CandidateThreshold> {
    let mut value = SENTINEL_LOW;
    for sc in &set.claims {
        if !sc.claim.require_label()? {
            value = value.max(sc.score);
        }
    }
    Ok(CandidateThreshold {
        record_id: set.record_id.clone(),
        value,
    })
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// Rank of the conformal order statistic, `ceil((n + 1)(1 - alpha))`.
///
/// The product is nudged down by 1e-9 before rounding up so that values such
/// as `10 * 0.9` that land a hair above an integer in binary floating point
/// do not pick the next order statistic.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Calibrates the threshold from per-output candidate thresholds.
pub fn calibrate(candidates: &[CandidateThreshold], alpha: f64) -> Result<Threshold> {
    check_alpha(alpha)?;
    let mut values: Vec<f64> = candidates.iter().map(|c| c.value).collect();
    calibrate_values(&mut values, alpha)
}

/// Same as [`calibrate`] over raw candidate values; sorts `values` in place.
pub fn calibrate_values(values: &mut [f64], alpha: f64) -> Result<Threshold> {
    check_alpha(alpha)?;
    let n = values.len();
    if n == 0 {
        return Err(Error::EmptyCalibration);
    }
    let k = quantile_rank(n, alpha);
    let value = if k > n {
        SENTINEL_HIGH
    } else {
        values.sort_by(f64::total_cmp);
        values[k.max(1) - 1]
    };
    Ok(Threshold {
        value,
        alpha,
        calibration_size: n,
    })
}

/// Candidate thresholds for every set, then [`calibrate`].
pub fn calibrate_sets(sets: &[ScoredClaimSet], alpha: f64) -> Result<Threshold> {
    let candidates = sets
        .iter()
        .map(candidate_threshold)
        .collect::<Result<Vec<_>>>()?;
    calibrate(&candidates, alpha)
}

/// Keeps the claims scoring strictly above the threshold, in original order.
pub fn filter_claims(set: &ScoredClaimSet, tau: Threshold) -> FilteredOutput {
    FilteredOutput {
        record_id: set.record_id.clone(),
        retained_claims: set
            .claims
            .iter()
            .filter(|sc| tau.retains(sc.score))
            .map(|sc| sc.claim.clone())
            .collect(),
        merged_text: None,
        threshold_used: tau,
    }
}

/// A calibrated threshold as stored on disk so later runs can reuse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDoc {
    pub value: f64,
    pub alpha: f64,
    pub n: usize,
    pub scorer_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl ThresholdDoc {
    pub fn new(tau: Threshold, scorer_id: impl Into<String>, created_at: u64) -> Self {
        Self {
            value: tau.value,
            alpha: tau.alpha,
            n: tau.calibration_size,
            scorer_id: scorer_id.into(),
            created_at,
        }
    }

    pub fn threshold(&self) -> Threshold {
        Threshold {
            value: self.value,
            alpha: self.alpha,
            calibration_size: self.n,
        }
    }
}
