use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Claim;
use crate::rng;

/// Label-conditional Gaussian score model, truncated to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScoreParams {
    pub mu_factual: f64,
    pub mu_nonfactual: f64,
    pub sigma: f64,
}

impl Default for SyntheticScoreParams {
    fn default() -> Self {
        Self {
            mu_factual: 0.8,
            mu_nonfactual: 0.3,
            sigma: 0.15,
        }
    }
}

impl SyntheticScoreParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.mu_factual)
            && (0.0..=1.0).contains(&self.mu_nonfactual)
            && self.sigma >= 0.0
            && self.sigma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic score params {self:?}")))
        }
    }

    /// Centre of the "plausible but wrong" distractor distribution.
    pub fn distractor_mean(&self) -> f64 {
        0.5 * (self.mu_factual + self.mu_nonfactual)
    }
}

/// Draws from `N(mu, sigma)` truncated to `[0, 1]` by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return mu.clamp(0.0, 1.0);
    }
    let normal = Normal::new(mu, sigma).expect("sigma is finite and positive");
    for _ in 0..1000 {
        let x = normal.sample(rng);
        if (0.0..=1.0).contains(&x) {
            return x;
        }
    }
    // Only reachable when mu sits far outside the unit interval.
    mu.clamp(0.0, 1.0)
}

/// Score for a labeled claim drawn from `params` using `rng`.
pub fn sample_score<R: Rng + ?Sized>(claim: &Claim, params: &SyntheticScoreParams, rng: &mut R) -> Result<f64> {
    let mu = if claim.require_label()? {
        params.mu_factual
    } else {
        params.mu_nonfactual
    };
    Ok(truncated_normal(mu, params.sigma, rng))
}

/// Deterministic synthetic score for a labeled claim.
pub fn synthetic_score(claim: &Claim, params: &SyntheticScoreParams, seed: u64) -> Result<f64> {
    sample_score(claim, params, &mut rng::stream(seed, &[rng::hash_str(&claim.id)]))
}
