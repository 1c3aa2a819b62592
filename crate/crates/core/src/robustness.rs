//! Stress tests for the calibrated guarantee.
//!
//! * [`inject_distractors`] swaps a share of the factual claims for plausible
//!   false ones, either through an attacker/confusee LLM pair or synthetically.
//! * [`shift_experiment`] compares calibration on matched data with
//!   calibration on an external corpus.
//! * [`distraction_aware`] injects distractors into calibration as well as
//!   test data.
//! * [`simulate`] and the other `simulate_*` drivers run all of the above on
//!   exchangeable synthetic data, trial by trial, with results independent of
//!   thread scheduling.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate_values, candidate_threshold, check_alpha, filter_claims};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Judgments, MetricsReport};
use crate::model::{split_calibration_test, Claim, ClaimOrigin, ScoredClaimSet};
use crate::rng;
use crate::scorers::{sample_score, truncated_normal, SyntheticScoreParams};

const TAG_SELECT: u64 = 0x5e1ec7;
const TAG_DISTRACT: u64 = 0xd157;
const TAG_CALIB: u64 = 0xca1;
const TAG_TEST: u64 = 0x7e57;
const TAG_TRIAL: u64 = 0x7a1;
const TAG_SPLIT: u64 = 0x5b1;
const TAG_EXTERNAL: u64 = 0xe87;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistractorMode {
    Llm,
    #[default]
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistractorConfig {
    pub test_rate: f64,
    pub calibration_rate: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub mode: DistractorMode,
}

fn default_retries() -> u32 {
    3
}

impl Default for DistractorConfig {
    fn default() -> Self {
        Self {
            test_rate: 0.25,
            calibration_rate: 0.0,
            max_retries: default_retries(),
            mode: DistractorMode::Synthetic,
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!("distractor rate must lie in [0, 1], got {rate}")))
    }
}

impl DistractorConfig {
    pub fn validate(&self) -> Result<()> {
        check_rate(self.test_rate)?;
        check_rate(self.calibration_rate)?;
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be at least 1".into()));
        }
        Ok(())
    }
}

/// One claim to be replaced.
#[derive(Debug, Clone)]
pub struct DistractorRequest<'a> {
    pub record_id: &'a str,
    pub claim: &'a Claim,
    /// Distractors already accepted for the same record.
    pub accepted: &'a [String],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distractor {
    pub text: String,
    /// `None` when the claim has to be rescored by the live scorer.
    pub score: Option<f64>,
    /// False when verification never passed and the last candidate was kept.
    pub verified: bool,
    pub attempts: u32,
}

pub trait DistractorSource: Sync {
    fn distract(&self, req: &DistractorRequest<'_>) -> Result<Distractor>;
}

/// Perturbs the text and draws the score around the midpoint of the factual
/// and non-factual means.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticDistractors {
    pub params: SyntheticScoreParams,
}

impl DistractorSource for SyntheticDistractors {
    fn distract(&self, req: &DistractorRequest<'_>) -> Result<Distractor> {
        let mut r = rng::stream(req.seed, &[]);
        Ok(Distractor {
            text: perturb_text(&req.claim.text),
            score: Some(truncated_normal(self.params.distractor_mean(), self.params.sigma, &mut r)),
            verified: true,
            attempts: 1,
        })
    }
}

/// Increments the last number in the text, or tags the text if it has none.
pub fn perturb_text(text: &str) -> String {
    let bytes = text.as_bytes();
    if let Some(end) = bytes.iter().rposition(u8::is_ascii_digit) {
        let start = bytes[..end].iter().rposition(|b| !b.is_ascii_digit()).map_or(0, |i| i + 1);
        if let Ok(n) = text[start..=end].parse::<u128>() {
            if let Some(next) = n.checked_add(1) {
                return format!("{}{}{}", &text[..start], next, &text[end + 1..]);
            }
        }
    }
    format!("{text} [perturbed]")
}

#[derive(Debug, Clone)]
pub struct AttackRequest<'a> {
    pub query: &'a str,
    pub reference: &'a str,
    pub claim: &'a str,
    /// Earlier candidates the confusee rejected.
    pub rejected: &'a [String],
    pub accepted: &'a [String],
}

/// Rewrites a correct claim into a false but plausible one.
pub trait Attacker: Sync {
    fn attack(&self, req: &AttackRequest<'_>) -> Result<String>;
}

/// Judges whether a candidate sounds like something a model would say.
pub trait Confusee: Sync {
    fn is_plausible(&self, query: &str, reference: &str, candidate: &str) -> Result<bool>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryContext {
    pub query: String,
    pub reference: String,
}

/// Attacker/confusee loop. Candidates are regenerated until the confusee
/// accepts one or `max_retries` attempts are spent; the last candidate is
/// then kept unverified. Scores are left for the live scorer.
pub struct LlmDistractors<A, C> {
    pub attacker: A,
    pub confusee: C,
    pub max_retries: u32,
    pub contexts: HashMap<String, QueryContext>,
}

impl<A: Attacker, C: Confusee> DistractorSource for LlmDistractors<A, C> {
    fn distract(&self, req: &DistractorRequest<'_>) -> Result<Distractor> {
        let ctx = self
            .contexts
            .get(req.record_id)
            .ok_or_else(|| Error::Config(format!("no query context for record `{}`", req.record_id)))?;
        let in_record = |e: Error| Error::Transport(format!("record `{}`: {e}", req.record_id));
        let mut rejected = Vec::new();
        for attempt in 1..=self.max_retries.max(1) {
            let text = self
                .attacker
                .attack(&AttackRequest {
                    query: &ctx.query,
                    reference: &ctx.reference,
                    claim: &req.claim.text,
                    rejected: &rejected,
                    accepted: req.accepted,
                })
                .map_err(in_record)?;
            let ok = self
                .confusee
                .is_plausible(&ctx.query, &ctx.reference, &text)
                .map_err(in_record)?;
            if ok || attempt == self.max_retries.max(1) {
                return Ok(Distractor {
                    text,
                    score: None,
                    verified: ok,
                    attempts: attempt,
                });
            }
            rejected.push(text);
        }
        unreachable!("the final attempt always returns")
    }
}

/// Result of [`inject_distractors`].
#[derive(Debug, Clone, Default)]
pub struct Injection {
    pub sets: Vec<ScoredClaimSet>,
    /// `(set, claim)` positions whose score still has to be computed.
    pub rescore: Vec<(usize, usize)>,
    /// Ids of distractors kept without passing verification.
    pub unverified: Vec<String>,
}

/// Scores single claims, used to rescore LLM-made distractors.
pub trait Rescorer: Sync {
    fn score(&self, record_id: &str, claim: &Claim) -> Result<f64>;
}

impl Injection {
    pub fn apply_rescore(&mut self, scorer: &dyn Rescorer) -> Result<()> {
        for &(i, j) in &self.rescore {
            let set = &mut self.sets[i];
            let s = scorer.score(&set.record_id, &set.claims[j].claim)?;
            set.claims[j].score = s;
        }
        self.rescore.clear();
        Ok(())
    }
}

/// Which factual claims of a set a given rate replaces. Selection is a
/// prefix of one seeded permutation, so a higher rate replaces a superset.
pub fn select_for_replacement(set: &ScoredClaimSet, rate: f64, seed: u64) -> Result<Vec<usize>> {
    check_rate(rate)?;
    let mut factual = Vec::new();
    for (j, sc) in set.claims.iter().enumerate() {
        if sc.claim.require_label()? {
            factual.push(j);
        }
    }
    let k = (rate * factual.len() as f64).round() as usize;
    factual.shuffle(&mut rng::stream(seed, &[TAG_SELECT, rng::hash_str(&set.record_id)]));
    let mut chosen = factual[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Replaces `round(rate * #factual)` factual claims per set with distractors
/// labeled non-factual. Non-factual claims are never touched.
pub fn inject_distractors(
    sets: &[ScoredClaimSet],
    rate: f64,
    source: &dyn DistractorSource,
    seed: u64,
) -> Result<Injection> {
    check_rate(rate)?;
    let per_set = sets
        .par_iter()
        .enumerate()
        .map(|(i, set)| {
            let mut out = set.clone();
            let mut rescore = Vec::new();
            let mut unverified = Vec::new();
            let mut accepted = Vec::new();
            for j in select_for_replacement(set, rate, seed)? {
                let original = &set.claims[j];
                let d = source.distract(&DistractorRequest {
                    record_id: &set.record_id,
                    claim: &original.claim,
                    accepted: &accepted,
                    seed: rng::derive_seed(seed, &[TAG_DISTRACT, rng::hash_str(&set.record_id), j as u64]),
                })?;
                let id = format!("{}~d", original.claim.id);
                if !d.verified {
                    unverified.push(id.clone());
                }
                if d.score.is_none() {
                    rescore.push((i, j));
                }
                accepted.push(d.text.clone());
                let slot = &mut out.claims[j];
                slot.claim = Claim {
                    id,
                    text: d.text,
                    label: Some(false),
                    origin: ClaimOrigin::Distractor,
                };
                slot.score = d.score.unwrap_or(original.score);
            }
            Ok((out, rescore, unverified))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut inj = Injection::default();
    for (set, rescore, unverified) in per_set {
        inj.sets.push(set);
        inj.rescore.extend(rescore);
        inj.unverified.extend(unverified);
    }
    Ok(inj)
}

fn check_same_scorer(calib: &[ScoredClaimSet], test: &[ScoredClaimSet]) -> Result<()> {
    let Some(reference) = test.first().or(calib.first()) else {
        return Ok(());
    };
    for s in calib.iter().chain(test) {
        if s.scorer_id != reference.scorer_id {
            return Err(Error::ScorerMismatch {
                calibration: s.scorer_id.clone(),
                test: reference.scorer_id.clone(),
            });
        }
    }
    Ok(())
}

/// Calibrates on `calib` at every alpha and evaluates the filtered `test`.
pub fn calibrate_and_evaluate(
    calib: &[ScoredClaimSet],
    test: &[ScoredClaimSet],
    alphas: &[f64],
) -> Result<Vec<MetricsReport>> {
    check_same_scorer(calib, test)?;
    let candidates: Vec<f64> = calib
        .iter()
        .map(|s| candidate_threshold(s).map(|c| c.value))
        .collect::<Result<_>>()?;
    alphas
        .iter()
        .map(|&alpha| {
            let tau = calibrate_values(&mut candidates.clone(), alpha)?;
            let filtered: Vec<_> = test.iter().map(|s| filter_claims(s, tau)).collect();
            evaluate(alpha, test, &filtered, &Judgments::default())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibSource {
    Matched,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub alpha: f64,
    pub matched: MetricsReport,
    pub external: MetricsReport,
}

/// Matched versus external calibration, evaluated on the same test sets.
pub fn shift_experiment(
    matched: &[ScoredClaimSet],
    external: &[ScoredClaimSet],
    test: &[ScoredClaimSet],
    alphas: &[f64],
) -> Result<Vec<ShiftReport>> {
    check_same_scorer(external, test)?;
    let m = calibrate_and_evaluate(matched, test, alphas)?;
    let e = calibrate_and_evaluate(external, test, alphas)?;
    Ok(m.into_iter()
        .zip(e)
        .map(|(matched, external)| ShiftReport {
            alpha: matched.alpha,
            matched,
            external,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractionReport {
    pub calib_rate: f64,
    pub test_rate: f64,
    pub reports: Vec<MetricsReport>,
    pub unverified: usize,
}

/// Injects distractors at `calib_rate` into calibration and `test_rate` into
/// test, then calibrates and evaluates. The test injection depends only on
/// `seed` and `test_rate`, so runs that differ in `calib_rate` share test data.
#[allow(clippy::too_many_arguments)]
pub fn distraction_aware(
    calib: &[ScoredClaimSet],
    test: &[ScoredClaimSet],
    calib_rate: f64,
    test_rate: f64,
    source: &dyn DistractorSource,
    rescorer: Option<&dyn Rescorer>,
    alphas: &[f64],
    seed: u64,
) -> Result<DistractionReport> {
    let mut c = inject_distractors(calib, calib_rate, source, rng::derive_seed(seed, &[TAG_CALIB]))?;
    let mut t = inject_distractors(test, test_rate, source, rng::derive_seed(seed, &[TAG_TEST]))?;
    for inj in [&mut c, &mut t] {
        if !inj.rescore.is_empty() {
            let r = rescorer.ok_or_else(|| Error::Config("distractors need rescoring but no scorer was given".into()))?;
            inj.apply_rescore(r)?;
        }
    }
    Ok(DistractionReport {
        calib_rate,
        test_rate,
        reports: calibrate_and_evaluate(&c.sets, &t.sets, alphas)?,
        unverified: c.unverified.len() + t.unverified.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_calibration: usize,
    pub n_test: usize,
    pub n_trials: usize,
    /// Inclusive range of claims drawn per query.
    pub claims_per_query: [usize; 2],
    pub p_nonfactual: f64,
    #[serde(default)]
    pub score_params: SyntheticScoreParams,
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_calibration: 200,
            n_test: 500,
            n_trials: 200,
            claims_per_query: [3, 10],
            p_nonfactual: 0.3,
            score_params: SyntheticScoreParams::default(),
            alphas: vec![0.05, 0.1, 0.2],
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.claims_per_query;
        if self.n_calibration == 0 || self.n_test == 0 || self.n_trials == 0 {
            return Err(Error::Config("simulation counts must be at least 1".into()));
        }
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid claims_per_query range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.p_nonfactual) {
            return Err(Error::Config(format!("p_nonfactual must lie in [0, 1], got {}", self.p_nonfactual)));
        }
        if self.alphas.is_empty() {
            return Err(Error::Config("at least one alpha is required".into()));
        }
        self.alphas.iter().try_for_each(|&a| check_alpha(a))?;
        self.score_params.validate()
    }
}

/// Draws `n` labeled, scored claim sets.
pub fn synthetic_sets<R: Rng + ?Sized>(
    n: usize,
    cfg: &SimulationConfig,
    params: &SyntheticScoreParams,
    prefix: &str,
    rng: &mut R,
) -> Vec<ScoredClaimSet> {
    let [lo, hi] = cfg.claims_per_query;
    (0..n)
        .map(|i| {
            let record_id = format!("{prefix}{i}");
            let mut set = ScoredClaimSet::new(record_id.clone(), "synthetic");
            for j in 0..rng.random_range(lo..=hi) {
                let factual = rng.random::<f64>() >= cfg.p_nonfactual;
                let claim = Claim::labeled(format!("c{j}"), format!("claim {j} of {record_id}"), factual);
                let score = sample_score(&claim, params, rng).expect("claim is labeled");
                set.push(claim, score);
            }
            set
        })
        .collect()
}

/// Across-trial aggregate at one alpha.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub alpha: f64,
    pub trials: usize,
    pub mean_ef: f64,
    /// Sample standard deviation of the per-trial EF.
    pub std_ef: f64,
    pub mean_nr: f64,
    /// Mean over the trials where power was defined.
    pub mean_power: Option<f64>,
}

impl TrialSummary {
    /// Standard error of `mean_ef`.
    pub fn se_ef(&self) -> f64 {
        self.std_ef / (self.trials as f64).sqrt()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Aggregates per-trial reports; `by_trial[t][a]` is trial `t` at alpha `a`.
pub fn summarize(by_trial: &[Vec<MetricsReport>]) -> Vec<TrialSummary> {
    let Some(first) = by_trial.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|a| {
            let ef: Vec<f64> = by_trial.iter().map(|t| t[a].ef).collect();
            let nr: Vec<f64> = by_trial.iter().map(|t| t[a].nr).collect();
            let power: Vec<f64> = by_trial.iter().filter_map(|t| t[a].power).collect();
            let m = mean(&ef);
            let std_ef = if ef.len() > 1 {
                (ef.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (ef.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            TrialSummary {
                alpha: first[a].alpha,
                trials: ef.len(),
                mean_ef: m,
                std_ef,
                mean_nr: mean(&nr),
                mean_power: (!power.is_empty()).then(|| mean(&power)),
            }
        })
        .collect()
}

fn trial_corpus(cfg: &SimulationConfig, t: usize) -> Result<(Vec<ScoredClaimSet>, Vec<ScoredClaimSet>)> {
    let mut r = rng::stream(cfg.seed, &[TAG_TRIAL, t as u64]);
    let all = synthetic_sets(cfg.n_calibration + cfg.n_test, cfg, &cfg.score_params, "q", &mut r);
    split_calibration_test(&all, cfg.n_calibration, rng::derive_seed(cfg.seed, &[TAG_SPLIT, t as u64]))
}

/// Coverage table of the plain procedure on exchangeable synthetic data.
pub fn simulate(cfg: &SimulationConfig) -> Result<Vec<TrialSummary>> {
    cfg.validate()?;
    let by_trial = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| {
            let (calib, test) = trial_corpus(cfg, t)?;
            calibrate_and_evaluate(&calib, &test, &cfg.alphas)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&by_trial))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub matched: TrialSummary,
    pub external: TrialSummary,
}

/// Shift study on synthetic data. Test and matched calibration data follow
/// `cfg.score_params`; the external calibration corpus follows `external`.
pub fn simulate_shift(cfg: &SimulationConfig, external: &SyntheticScoreParams) -> Result<Vec<ShiftSummary>> {
    cfg.validate()?;
    external.validate()?;
    let by_trial = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| {
            let (calib, test) = trial_corpus(cfg, t)?;
            let mut r = rng::stream(cfg.seed, &[TAG_EXTERNAL, t as u64]);
            let ext = synthetic_sets(cfg.n_calibration, cfg, external, "x", &mut r);
            let reports = shift_experiment(&calib, &ext, &test, &cfg.alphas)?;
            Ok(reports.into_iter().map(|r| (r.matched, r.external)).unzip())
        })
        .collect::<Result<Vec<(Vec<_>, Vec<_>)>>>()?;
    let (matched, external): (Vec<_>, Vec<_>) = by_trial.into_iter().unzip();
    Ok(summarize(&matched)
        .into_iter()
        .zip(summarize(&external))
        .map(|(matched, external)| ShiftSummary { matched, external })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractionSummary {
    pub calib_rate: f64,
    pub test_rate: f64,
    pub rows: Vec<TrialSummary>,
}

/// Distraction-aware calibration on synthetic data for every
/// `(calib_rate, test_rate)` pair. All pairs in a trial share base data.
pub fn simulate_distraction(cfg: &SimulationConfig, pairs: &[(f64, f64)]) -> Result<Vec<DistractionSummary>> {
    cfg.validate()?;
    for &(c, t) in pairs {
        check_rate(c)?;
        check_rate(t)?;
    }
    let source = SyntheticDistractors {
        params: cfg.score_params,
    };
    let by_trial = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| {
            let (calib, test) = trial_corpus(cfg, t)?;
            let seed = rng::derive_seed(cfg.seed, &[TAG_DISTRACT, t as u64]);
            pairs
                .iter()
                .map(|&(cr, tr)| {
                    distraction_aware(&calib, &test, cr, tr, &source, None, &cfg.alphas, seed).map(|d| d.reports)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(p, &(calib_rate, test_rate))| {
            let per_trial: Vec<Vec<MetricsReport>> = by_trial.iter().map(|t| t[p].clone()).collect();
            DistractionSummary {
                calib_rate,
                test_rate,
                rows: summarize(&per_trial),
            }
        })
        .collect())
}
