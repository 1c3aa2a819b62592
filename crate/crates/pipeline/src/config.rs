//! Run configuration, read from a TOML file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use confilter_core::model::CalibrationUnit;
use confilter_core::robustness::DistractorConfig;
use confilter_core::scorers::{ScorerKind, ScorerSpec};
use confilter_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::http::RetryPolicy;
use crate::ledger::ModelCost;

pub const API_KEY_ENV: &str = "CONFILTER_API_KEY";
pub const NLI_URL_ENV: &str = "CONFILTER_NLI_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub endpoint: String,
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
}

/// Replaces the generate/parse/label stages with labeled claims drawn at
/// random, for runs that need no model endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClaims {
    pub claims_per_query: [usize; 2],
    pub p_nonfactual: f64,
}

impl Default for SyntheticClaims {
    fn default() -> Self {
        Self {
            claims_per_query: [3, 10],
            p_nonfactual: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Query records, one JSON object per line.
    pub corpus: PathBuf,
    /// Pre-parsed claim lists; skips generation and parsing when set.
    #[serde(default)]
    pub claims: Option<PathBuf>,
    #[serde(default)]
    pub synthetic_claims: Option<SyntheticClaims>,
    #[serde(default)]
    pub generator: Option<Endpoint>,
    /// Parser, labeler, merger and answer judges.
    #[serde(default)]
    pub judge: Option<Endpoint>,
    pub scorer: ScorerSpec,
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    pub cache_dir: PathBuf,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Number of calibration records per split; half the corpus by default.
    #[serde(default)]
    pub calibration_size: Option<usize>,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default = "yes")]
    pub with_reference: bool,
    #[serde(default)]
    pub use_ground_truth: bool,
    #[serde(default)]
    pub strict_correctness: bool,
    /// Merge retained claims and run the answer-level judges.
    #[serde(default)]
    pub judge_answers: bool,
    #[serde(default)]
    pub calibration_unit: CalibrationUnit,
    #[serde(default)]
    pub distractor: Option<DistractorConfig>,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Parameter counts used for FLOPs accounting, keyed by model id.
    #[serde(default)]
    pub models: BTreeMap<String, ModelCost>,
    #[serde(default = "default_experiment")]
    pub experiment: String,
}

fn default_concurrency() -> usize {
    8
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_experiment() -> String {
    "main".into()
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.resolve_relative_to(dir);
        }
        Ok(cfg)
    }

    /// Makes relative paths relative to the config file's directory.
    fn resolve_relative_to(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.cache_dir);
        if let Some(p) = self.claims.as_mut() {
            fix(p);
        }
        if let Some(p) = self.out_dir.as_mut() {
            fix(p);
        }
    }

    /// Fills the NLI endpoint from the environment when the scorer needs one.
    pub fn apply_env(&mut self) {
        if self.scorer.kind.is_entailment() && self.scorer.endpoint.is_none() {
            if let Ok(url) = std::env::var(NLI_URL_ENV) {
                self.scorer.endpoint = Some(url);
            }
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| self.cache_dir.join("report"))
    }

    pub fn stage_dir(&self) -> PathBuf {
        self.cache_dir.join("stages")
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::Config("at least one alpha is required".into()));
        }
        for &a in &self.alphas {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidAlpha(a));
            }
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        self.scorer.validate()?;
        if let Some(d) = &self.distractor {
            d.validate()?;
        }
        if let Some(s) = &self.synthetic_claims {
            let [lo, hi] = s.claims_per_query;
            if lo > hi || !(0.0..=1.0).contains(&s.p_nonfactual) {
                return Err(Error::Config("invalid synthetic_claims settings".into()));
            }
        }
        let needs_claims = self.synthetic_claims.is_none() && self.claims.is_none();
        if needs_claims && self.generator.is_none() {
            return Err(Error::Config("a generator endpoint is required unless claims are supplied".into()));
        }
        if (needs_claims || self.judge_answers) && self.judge.is_none() {
            return Err(Error::Config("a judge endpoint is required for parsing, labeling and answer judging".into()));
        }
        if self.scorer.kind == ScorerKind::Synthetic && self.synthetic_claims.is_none() && self.claims.is_none() {
            tracing::warn!("synthetic scorer over generated claims: scores depend on judge labels only");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
corpus = "records.jsonl"
alphas = [0.1]
cache_dir = "cache"

[synthetic_claims]
claims_per_query = [3, 10]
p_nonfactual = 0.3

[scorer]
kind = "synthetic"
"#;

    #[test]
    fn minimal_synthetic_config() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.concurrency, 8);
        assert_eq!(cfg.trials, 1);
        assert_eq!(cfg.out_dir(), PathBuf::from("cache/report"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.corpus, dir.path().join("records.jsonl"));
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.alphas = vec![1.5];
        assert!(cfg.validate().is_err());
        let mut cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.synthetic_claims = None;
        assert!(cfg.validate().is_err());
        assert!(toml::from_str::<RunConfig>(&format!("bogus = 1\n{MINIMAL}")).is_err());
    }
}
