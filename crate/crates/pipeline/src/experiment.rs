//! End-to-end orchestration: claims, scores, calibration, filtering, answer
//! judging, metrics and report files.
//!
//! Every stage writes its output under `<cache_dir>/stages` as JSONL, and
//! every model call goes through the prompt cache, so a rerun with the same
//! config is served from disk and reproduces the same reports.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use confilter_core::conformal::{calibrate_sets, filter_claims};
use confilter_core::metrics::{evaluate, CorrectnessJudgment, Judgments, MetricsReport};
use confilter_core::model::{
    calibration_units, read_jsonl, split_calibration_test, validate_corpus, Claim, ClaimList, FilteredOutput,
    GeneratedOutput, QueryRecord, ScoredClaimSet, Threshold,
};
use confilter_core::robustness::{
    distraction_aware, DistractionReport, DistractorMode, DistractorSource, LlmDistractors, QueryContext,
    SyntheticDistractors,
};
use confilter_core::scorers::{Entailer, ScorerKind};
use confilter_core::{rng, Error, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::config::{Endpoint, RunConfig, API_KEY_ENV};
use crate::ledger::{CostSummary, Ledger};
use crate::llm::{ChatClient, Gateway, OpenAiClient};
use crate::nli::HttpEntailer;
use crate::scoring::{RecordRescorer, ScoringEngine};
use crate::stages::{self, Bound, LlmAttacker, LlmConfusee};

const TAG_CLAIMS: u64 = 0xc1a1;
const TAG_SPLIT: u64 = 0x5b17;
const TAG_DISTRACT: u64 = 0xd15;

pub const GENERATIONS: &str = "generations.jsonl";
pub const CLAIMS: &str = "claims.jsonl";
pub const LABELED: &str = "labeled.jsonl";
pub const SCORED: &str = "scored.jsonl";
pub const FAILURES: &str = "failures.jsonl";

/// Live model clients. Any may be absent when the config does not need it.
#[derive(Clone, Default)]
pub struct Clients {
    pub generator: Option<Arc<dyn ChatClient>>,
    pub judge: Option<Arc<dyn ChatClient>>,
    pub scorer: Option<Arc<dyn ChatClient>>,
    pub nli: Option<Arc<dyn Entailer>>,
}

impl Clients {
    /// HTTP clients for every endpoint in the config. The API key is read
    /// from the environment.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV).ok();
        let chat = |ep: &Endpoint| -> Result<Arc<dyn ChatClient>> {
            Ok(Arc::new(OpenAiClient::new(&ep.endpoint, key.clone(), cfg.retry)?))
        };
        let spec = &cfg.scorer;
        Ok(Self {
            generator: cfg.generator.as_ref().map(chat).transpose()?,
            judge: cfg.judge.as_ref().map(chat).transpose()?,
            scorer: match (spec.kind, &spec.endpoint) {
                (ScorerKind::ModelConfidence, Some(url)) => {
                    Some(Arc::new(OpenAiClient::new(url, key.clone(), cfg.retry)?) as Arc<dyn ChatClient>)
                }
                _ => None,
            },
            nli: match (spec.kind.is_entailment(), &spec.endpoint) {
                (true, Some(url)) => Some(Arc::new(HttpEntailer::new(url, spec.model_id.clone(), cfg.retry)?)
                    as Arc<dyn Entailer>),
                _ => None,
            },
        })
    }
}

/// A record that dropped out of a stage.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub record_id: String,
    pub error: String,
}

/// Judge outputs for one set of filtered test outputs.
#[derive(Debug, Clone, Default)]
pub struct AnswerJudgments {
    pub correctness: Option<Vec<CorrectnessJudgment>>,
    pub sc_filtered: Option<Vec<bool>>,
    pub sc_unfiltered: Option<Vec<bool>>,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub trial: usize,
    pub alpha: f64,
    pub value: f64,
    pub calibration_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub calibration_ids: Vec<String>,
    pub reports: Vec<MetricsReport>,
    pub distraction: Option<DistractionReport>,
}

/// One line of `report.csv`: metrics averaged over trials. Metrics that were
/// undefined in every trial are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub scorer: String,
    pub alpha: f64,
    pub trials: usize,
    pub calib_distractor_rate: Option<f64>,
    pub test_distractor_rate: Option<f64>,
    pub threshold_mean: Option<f64>,
    pub ef: f64,
    pub power: Option<f64>,
    pub fpr: f64,
    pub nr: f64,
    pub nvef: Option<f64>,
    pub correctness: Option<f64>,
    pub sc: Option<f64>,
    pub csc: Option<f64>,
    pub n_test: f64,
    pub n_empty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub scorer_id: String,
    pub config: RunConfig,
    pub n_records: usize,
    pub n_scored: usize,
    pub calibration_size: usize,
    pub failure_counts: BTreeMap<String, usize>,
    pub failures: Vec<Failure>,
    pub label_parse_failures: usize,
    pub score_parse_failures: u64,
    pub judge_parse_failures: usize,
    pub unverified_distractors: usize,
    pub thresholds: Vec<ThresholdRow>,
    pub trials: Vec<TrialRecord>,
    pub rows: Vec<ReportRow>,
    pub cost: CostSummary,
}

pub struct Outcome {
    pub report: ExperimentReport,
    pub csv: PathBuf,
    pub json: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    confilter_core::model::write_jsonl(path, items)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io(path))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io(path))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, sum) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| sum / n as f64)
}

/// Averages per-trial reports for one alpha into a CSV row.
fn row(
    experiment: &str,
    scorer: &str,
    alpha: f64,
    reports: &[&MetricsReport],
    threshold_mean: Option<f64>,
    rates: Option<(f64, f64)>,
) -> ReportRow {
    let f = |g: fn(&MetricsReport) -> f64| mean(reports.iter().map(|r| g(r))).unwrap_or(f64::NAN);
    let o = |g: fn(&MetricsReport) -> Option<f64>| mean(reports.iter().filter_map(|r| g(r)));
    ReportRow {
        experiment: experiment.to_string(),
        scorer: scorer.to_string(),
        alpha,
        trials: reports.len(),
        calib_distractor_rate: rates.map(|r| r.0),
        test_distractor_rate: rates.map(|r| r.1),
        threshold_mean,
        ef: f(|r| r.ef),
        power: o(|r| r.power),
        fpr: f(|r| r.fpr),
        nr: f(|r| r.nr),
        nvef: o(|r| r.nvef),
        correctness: o(|r| r.correctness),
        sc: o(|r| r.sc),
        csc: o(|r| r.csc),
        n_test: f(|r| r.n_test as f64),
        n_empty: f(|r| r.n_empty as f64),
    }
}

pub struct Runner<'a> {
    pub cfg: &'a RunConfig,
    pub clients: &'a Clients,
    pub gateway: Gateway,
    pool: rayon::ThreadPool,
    failures: Mutex<Vec<Failure>>,
    label_flags: Mutex<usize>,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a RunConfig, clients: &'a Clients) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.concurrency)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            cfg,
            clients,
            gateway: Gateway::new(Cache::open(cfg.cache_dir.join("cache"))?, Arc::new(Ledger::default())),
            pool,
            failures: Mutex::new(Vec::new()),
            label_flags: Mutex::new(0),
        })
    }

    pub fn stage_path(&self, name: &str) -> PathBuf {
        self.cfg.stage_dir().join(name)
    }

    pub fn failures(&self) -> Vec<Failure> {
        self.failures.lock().expect("failures lock").clone()
    }

    fn fail(&self, stage: &str, record_id: &str, e: &Error) {
        tracing::warn!(stage, record = record_id, error = %e, "record failed");
        self.failures.lock().expect("failures lock").push(Failure {
            stage: stage.to_string(),
            record_id: record_id.to_string(),
            error: e.to_string(),
        });
    }

    /// Runs `f` over `items` on the worker pool. Results keep input order;
    /// items whose call fails are dropped and logged as failures.
    fn each<T, U, F>(&self, stage: &str, items: &[T], id: fn(&T) -> &str, f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> Result<U> + Sync,
    {
        let results: Vec<Result<U>> = self.pool.install(|| items.par_iter().map(&f).collect());
        let mut out = Vec::with_capacity(items.len());
        for (item, r) in items.iter().zip(results) {
            match r {
                Ok(u) => out.push(u),
                Err(e) => self.fail(stage, id(item), &e),
            }
        }
        out
    }

    fn bind(&self, ep: Option<&'a Endpoint>, client: Option<&'a Arc<dyn ChatClient>>, what: &str) -> Result<Bound<'_>> {
        match (ep, client) {
            (Some(ep), Some(client)) => Ok(Bound {
                gateway: &self.gateway,
                client: client.as_ref(),
                model: &ep.model_id,
                temperature: ep.temperature,
            }),
            _ => Err(Error::Config(format!("no {what} endpoint configured"))),
        }
    }

    pub fn generator(&self) -> Result<Bound<'_>> {
        self.bind(self.cfg.generator.as_ref(), self.clients.generator.as_ref(), "generator")
    }

    pub fn judge(&self) -> Result<Bound<'_>> {
        self.bind(self.cfg.judge.as_ref(), self.clients.judge.as_ref(), "judge")
    }

    pub fn load_records(&self) -> Result<Vec<QueryRecord>> {
        let records: Vec<QueryRecord> = read_jsonl(&self.cfg.corpus)?;
        let violations = validate_corpus(&records);
        if let Some(v) = violations.first() {
            return Err(Error::Config(format!(
                "{}: {} invalid record(s), first `{}` ({:?})",
                self.cfg.corpus.display(),
                violations.len(),
                v.record_id,
                v.rule
            )));
        }
        Ok(records)
    }

    pub fn generate(&self, records: &[QueryRecord]) -> Result<Vec<GeneratedOutput>> {
        let gen = self.generator()?;
        Ok(self.each("generate", records, |r| &r.id, |r| {
            stages::generate_response(gen, r, self.cfg.with_reference)
        }))
    }

    pub fn parse(&self, outputs: &[GeneratedOutput]) -> Result<Vec<ClaimList>> {
        let parser = self.judge()?;
        Ok(self.each("parse", outputs, |o| &o.record_id, |o| {
            Ok(ClaimList {
                record_id: o.record_id.clone(),
                claims: stages::parse_claims(parser, o)?,
            })
        }))
    }

    /// Labels claims that have no label yet.
    pub fn label(&self, records: &[QueryRecord], lists: &[ClaimList]) -> Result<Vec<ClaimList>> {
        if lists.iter().all(|l| l.claims.iter().all(|c| c.label.is_some())) {
            return Ok(lists.to_vec());
        }
        let judge = self.judge()?;
        let by_id = index(records);
        Ok(self.each("label", lists, |l| &l.record_id, |l| {
            let record = lookup(&by_id, &l.record_id)?;
            let todo: Vec<Claim> = l.claims.iter().filter(|c| c.label.is_none()).cloned().collect();
            let (labeled, flagged) = stages::label_claims(judge, &todo, record, self.cfg.use_ground_truth)?;
            *self.label_flags.lock().expect("flag lock") += flagged;
            let mut fresh = labeled.into_iter();
            let claims = l
                .claims
                .iter()
                .map(|c| match c.label {
                    Some(_) => c.clone(),
                    None => fresh.next().expect("one label per unlabeled claim"),
                })
                .collect();
            Ok(ClaimList {
                record_id: l.record_id.clone(),
                claims,
            })
        }))
    }

    pub fn label_parse_failures(&self) -> usize {
        *self.label_flags.lock().expect("flag lock")
    }

    /// Labeled claims drawn at random, for runs without model endpoints.
    pub fn synthetic_claims(&self, records: &[QueryRecord]) -> Vec<ClaimList> {
        let s = self.cfg.synthetic_claims.clone().unwrap_or_default();
        records
            .iter()
            .map(|r| {
                let mut g = rng::stream(self.cfg.seed, &[TAG_CLAIMS, rng::hash_str(&r.id)]);
                let n = g.random_range(s.claims_per_query[0]..=s.claims_per_query[1]);
                let claims = (0..n)
                    .map(|j| {
                        let factual = !g.random_bool(s.p_nonfactual);
                        Claim::labeled(format!("{}:c{j}", r.id), format!("claim {j} of {}", r.id), factual)
                    })
                    .collect();
                ClaimList {
                    record_id: r.id.clone(),
                    claims,
                }
            })
            .collect()
    }

    /// Labeled claim lists from whichever source the config names, with each
    /// stage persisted.
    pub fn claims(&self, records: &[QueryRecord]) -> Result<Vec<ClaimList>> {
        let lists = if self.cfg.synthetic_claims.is_some() {
            self.synthetic_claims(records)
        } else {
            let parsed = match &self.cfg.claims {
                Some(path) => read_jsonl(path)?,
                None => {
                    let outputs = self.generate(records)?;
                    write_jsonl(&self.stage_path(GENERATIONS), &outputs)?;
                    self.parse(&outputs)?
                }
            };
            write_jsonl(&self.stage_path(CLAIMS), &parsed)?;
            self.label(records, &parsed)?
        };
        write_jsonl(&self.stage_path(LABELED), &lists)?;
        Ok(lists)
    }

    pub fn engine(&self) -> Result<ScoringEngine<'_>> {
        ScoringEngine::new(
            &self.cfg.scorer,
            self.cfg.seed,
            &self.gateway,
            self.clients.scorer.as_deref(),
            self.clients.nli.clone(),
        )
    }

    pub fn score(&self, engine: &ScoringEngine<'_>, records: &[QueryRecord], lists: &[ClaimList]) -> Vec<ScoredClaimSet> {
        let by_id = index(records);
        self.each("score", lists, |l| &l.record_id, |l| {
            engine.score_set(lookup(&by_id, &l.record_id)?, &l.claims)
        })
    }

    /// Fills `merged_text` on every output. Returns false, leaving the
    /// outputs untouched, if any merge failed.
    pub fn merge(&self, records: &[QueryRecord], filtered: &mut [FilteredOutput]) -> Result<bool> {
        let judge = self.judge()?;
        let by_id = index(records);
        let merged = self.each("merge", filtered, |f| &f.record_id, |f| {
            stages::merge_claims(judge, &f.retained_claims, lookup(&by_id, &f.record_id)?)
        });
        if merged.len() != filtered.len() {
            return Ok(false);
        }
        for (f, m) in filtered.iter_mut().zip(merged) {
            f.merged_text = Some(m);
        }
        Ok(true)
    }

    /// Merges and judges filtered outputs. A metric whose judging failed
    /// for any record is left out.
    pub fn judge_answers(
        &self,
        records: &[QueryRecord],
        sources: &[ScoredClaimSet],
        filtered: &mut [FilteredOutput],
    ) -> Result<AnswerJudgments> {
        let judge = self.judge()?;
        let by_id = index(records);
        let mut out = AnswerJudgments::default();
        let before = self.failures().len();

        if !self.merge(records, filtered)? {
            return Ok(out);
        }

        let sc = self.each("judge_sc", filtered, |f| &f.record_id, |f| {
            stages::judge_sufficient(judge, lookup(&by_id, &f.record_id)?, f.merged_text.as_deref().unwrap_or(""))
        });
        if sc.len() == filtered.len() {
            out.parse_failures += sc.iter().filter(|j| j.parse_failed).count();
            out.sc_filtered = Some(sc.iter().map(|j| j.value).collect());
        }

        let unfiltered = self.each("judge_sc_unfiltered", sources, |s| &s.record_id, |s| {
            let record = lookup(&by_id, &s.record_id)?;
            let all: Vec<Claim> = s.claims.iter().map(|c| c.claim.clone()).collect();
            let text = stages::merge_claims(judge, &all, record)?;
            stages::judge_sufficient(judge, record, &text)
        });
        if unfiltered.len() == sources.len() {
            out.parse_failures += unfiltered.iter().filter(|j| j.parse_failed).count();
            out.sc_unfiltered = Some(unfiltered.iter().map(|j| j.value).collect());
        }

        let all_have_truth = filtered
            .iter()
            .all(|f| by_id.get(f.record_id.as_str()).is_some_and(|r| r.ground_truth.is_some()));
        if all_have_truth {
            let graded = self.each("judge_correctness", filtered, |f| &f.record_id, |f| {
                stages::judge_correctness(judge, lookup(&by_id, &f.record_id)?, f.merged_text.as_deref().unwrap_or(""))
            });
            if graded.len() == filtered.len() {
                out.parse_failures += graded.iter().filter(|j| j.parse_failed).count();
                out.correctness = Some(graded.iter().map(|j| j.value).collect());
            }
        }
        if self.failures().len() > before {
            tracing::warn!("some answer-level metrics are missing because judging failed");
        }
        Ok(out)
    }

    pub fn calibration_size(&self, n: usize) -> Result<usize> {
        let n_cal = self.cfg.calibration_size.unwrap_or(n / 2);
        if n_cal == 0 || n_cal >= n {
            return Err(Error::Config(format!(
                "cannot split {n} scored records into {n_cal} calibration and a non-empty test set"
            )));
        }
        Ok(n_cal)
    }

    pub fn split(&self, sets: &[ScoredClaimSet], trial: usize) -> Result<(Vec<ScoredClaimSet>, Vec<ScoredClaimSet>)> {
        let n_cal = self.calibration_size(sets.len())?;
        split_calibration_test(sets, n_cal, rng::derive_seed(self.cfg.seed, &[TAG_SPLIT, trial as u64]))
    }

    pub fn calibrate(&self, calib: &[ScoredClaimSet], alpha: f64) -> Result<Threshold> {
        calibrate_sets(&calibration_units(calib, self.cfg.calibration_unit), alpha)
    }

    /// The distractor experiment for one split.
    pub fn distraction(
        &self,
        engine: &ScoringEngine<'_>,
        records: &[QueryRecord],
        calib: &[ScoredClaimSet],
        test: &[ScoredClaimSet],
        trial: usize,
    ) -> Result<Option<DistractionReport>> {
        let Some(d) = &self.cfg.distractor else {
            return Ok(None);
        };
        let rescorer = RecordRescorer {
            engine,
            records: index(records),
        };
        let seed = rng::derive_seed(self.cfg.seed, &[TAG_DISTRACT, trial as u64]);
        let run = |source: &dyn DistractorSource| {
            self.pool.install(|| {
                distraction_aware(
                    calib,
                    test,
                    d.calibration_rate,
                    d.test_rate,
                    source,
                    Some(&rescorer),
                    &self.cfg.alphas,
                    seed,
                )
            })
        };
        let report = match d.mode {
            DistractorMode::Synthetic => run(&SyntheticDistractors {
                params: self.cfg.scorer.synthetic.unwrap_or_default(),
            })?,
            DistractorMode::Llm => {
                let judge = self.judge()?;
                let contexts = records
                    .iter()
                    .map(|r| {
                        (
                            r.id.clone(),
                            QueryContext {
                                query: r.query.clone(),
                                reference: r.reference.clone(),
                            },
                        )
                    })
                    .collect();
                run(&LlmDistractors {
                    attacker: LlmAttacker(judge),
                    confusee: LlmConfusee(judge),
                    max_retries: d.max_retries,
                    contexts,
                })?
            }
        };
        Ok(Some(report))
    }

    /// The whole pipeline, ending in `report.csv` and `report.json`.
    pub fn run(&self) -> Result<Outcome> {
        let cfg = self.cfg;
        let records = self.load_records()?;
        let lists = self.claims(&records)?;
        let engine = self.engine()?;
        let sets = self.score(&engine, &records, &lists);
        write_jsonl(&self.stage_path(SCORED), &sets)?;
        let scorer_id = engine.scorer_id().to_string();

        let mut thresholds = Vec::new();
        let mut trials = Vec::new();
        let mut judge_parse_failures = 0;
        let mut unverified = 0;
        for t in 0..cfg.trials {
            let (calib, test) = self.split(&sets, t)?;
            let mut reports = Vec::new();
            for &alpha in &cfg.alphas {
                let tau = self.calibrate(&calib, alpha)?;
                thresholds.push(ThresholdRow {
                    trial: t,
                    alpha,
                    value: tau.value,
                    calibration_size: tau.calibration_size,
                });
                let mut filtered: Vec<FilteredOutput> = test.iter().map(|s| filter_claims(s, tau)).collect();
                let answers = if cfg.judge_answers {
                    self.judge_answers(&records, &test, &mut filtered)?
                } else {
                    AnswerJudgments::default()
                };
                judge_parse_failures += answers.parse_failures;
                let judged = Judgments {
                    correctness: answers.correctness.as_deref(),
                    strict_correctness: cfg.strict_correctness,
                    sc_unfiltered: answers.sc_unfiltered.as_deref(),
                    sc_filtered: answers.sc_filtered.as_deref(),
                };
                reports.push(evaluate(alpha, &test, &filtered, &judged)?);
                write_jsonl(
                    &self.stage_path(&format!("filtered_t{t}_a{alpha}.jsonl")),
                    &filtered,
                )?;
            }
            let distraction = match self.distraction(&engine, &records, &calib, &test, t) {
                Ok(d) => d,
                Err(e) => {
                    self.fail("distraction", &format!("trial {t}"), &e);
                    None
                }
            };
            unverified += distraction.as_ref().map_or(0, |d| d.unverified);
            trials.push(TrialRecord {
                trial: t,
                calibration_ids: calib.iter().map(|s| s.record_id.clone()).collect(),
                reports,
                distraction,
            });
        }

        let mut rows = Vec::new();
        for (i, &alpha) in cfg.alphas.iter().enumerate() {
            let reports: Vec<&MetricsReport> = trials.iter().map(|t| &t.reports[i]).collect();
            let tau = mean(thresholds.iter().filter(|r| r.alpha == alpha).map(|r| r.value));
            rows.push(row(&cfg.experiment, &scorer_id, alpha, &reports, tau, None));
        }
        if let Some(d) = &cfg.distractor {
            let runs: Vec<&DistractionReport> = trials.iter().filter_map(|t| t.distraction.as_ref()).collect();
            if !runs.is_empty() {
                for (i, &alpha) in cfg.alphas.iter().enumerate() {
                    let reports: Vec<&MetricsReport> = runs.iter().map(|r| &r.reports[i]).collect();
                    rows.push(row(
                        &format!("{}/distraction", cfg.experiment),
                        &scorer_id,
                        alpha,
                        &reports,
                        None,
                        Some((d.calibration_rate, d.test_rate)),
                    ));
                }
            }
        }

        let mut failures = self.failures();
        failures.sort();
        failures.dedup();
        write_jsonl(&self.stage_path(FAILURES), &failures)?;
        let mut failure_counts = BTreeMap::new();
        for f in &failures {
            *failure_counts.entry(f.stage.clone()).or_insert(0) += 1;
        }
        let report = ExperimentReport {
            experiment: cfg.experiment.clone(),
            scorer_id,
            config: cfg.clone(),
            n_records: records.len(),
            n_scored: sets.len(),
            calibration_size: self.calibration_size(sets.len())?,
            failure_counts,
            failures,
            label_parse_failures: self.label_parse_failures(),
            score_parse_failures: engine.parse_failures(),
            judge_parse_failures,
            unverified_distractors: unverified,
            thresholds,
            trials,
            rows,
            cost: self.gateway.ledger.summary(&cfg.models)?,
        };
        let out = cfg.out_dir();
        let csv = out.join("report.csv");
        let json = out.join("report.json");
        write_csv(&csv, &report.rows)?;
        write_json(&json, &report)?;
        Ok(Outcome { report, csv, json })
    }
}

pub fn index(records: &[QueryRecord]) -> HashMap<&str, &QueryRecord> {
    records.iter().map(|r| (r.id.as_str(), r)).collect()
}

fn lookup<'r>(by_id: &HashMap<&str, &'r QueryRecord>, id: &str) -> Result<&'r QueryRecord> {
    by_id
        .get(id)
        .copied()
        .ok_or_else(|| Error::Config(format!("record `{id}` is not in the corpus")))
}

/// Validates `cfg`, runs every stage and writes the reports.
pub fn run_experiment(cfg: &RunConfig, clients: &Clients) -> Result<Outcome> {
    Runner::new(cfg, clients)?.run()
}
