use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use confilter_core::conformal::{filter_claims, ThresholdDoc};
use confilter_core::flops::{estimate_flops, published_flops, round_sig, Arch, ModelCostSpec};
use confilter_core::metrics::{evaluate, Judgments, MetricsReport};
use confilter_core::model::{read_jsonl, validate_corpus, ClaimList, FilteredOutput, GeneratedOutput, QueryRecord, ScoredClaimSet};
use confilter_core::robustness::{
    shift_experiment, simulate, simulate_distraction, simulate_shift, SimulationConfig, TrialSummary,
};
use confilter_core::scorers::{ScorerKind, SyntheticScoreParams};
use confilter_pipeline::config::RunConfig;
use confilter_pipeline::experiment::{
    write_csv, write_json, write_jsonl, Clients, Runner, CLAIMS, GENERATIONS, LABELED, SCORED,
};
use serde::{Deserialize, Serialize};

const SPLIT: &str = "split.json";
const THRESHOLDS: &str = "thresholds.jsonl";
const FILTERED: &str = "filtered.jsonl";
const METRICS: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(name = "confilter", version, about = "Conformal factuality filtering for retrieval-augmented generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the configured alphas; comma separated.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    #[arg(long)]
    scorer: Option<ScorerKind>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the config and the corpus.
    Validate(Common),
    /// Generate a response per record.
    Generate(Common),
    /// Split generated responses into claims.
    Parse(Common),
    /// Label claims as factual or not.
    Label(Common),
    /// Score labeled claims.
    Score(Common),
    /// Split scored records and calibrate a threshold per alpha.
    Calibrate(Common),
    /// Filter the test split with the calibrated thresholds.
    Filter(Common),
    /// Merge retained claims into answers.
    Merge(Common),
    /// Compute metrics for the filtered outputs.
    Evaluate(Common),
    /// Distractor injection and calibration-shift experiments.
    Robustness(RobustnessArgs),
    /// Coverage experiments on synthetic data; no endpoints needed.
    Simulate(SimulateArgs),
    /// Estimate inference FLOPs.
    Flops(FlopsArgs),
    /// Run every stage and write report.csv and report.json.
    Report(Common),
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    common: Common,
    /// Scored sets from another corpus to calibrate on instead.
    #[arg(long)]
    external: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimMode {
    Coverage,
    Shift,
    Distraction,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "coverage")]
    mode: SimMode,
    #[arg(long, default_value_t = 200)]
    n_calibration: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2])]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    p_nonfactual: f64,
    #[arg(long, default_value_t = 0.8)]
    mu_factual: f64,
    #[arg(long, default_value_t = 0.3)]
    mu_nonfactual: f64,
    #[arg(long, default_value_t = 0.15)]
    sigma: f64,
    /// Non-factual mean of the external calibration corpus (shift mode).
    #[arg(long, default_value_t = 0.5)]
    external_mu_nonfactual: f64,
    /// Calibration:test distractor rates (distraction mode).
    #[arg(long, value_delimiter = ',', default_values_t = ["0:0".to_string(), "0:0.25".to_string(), "0.25:0.25".to_string()])]
    rates: Vec<String>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    /// Look up a published model figure instead of computing one.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    active_params: Option<f64>,
    #[arg(long, default_value_t = 0)]
    prompt_tokens: i64,
    #[arg(long, default_value_t = 0)]
    generated_tokens: i64,
    #[arg(long, value_enum, default_value = "decoder")]
    arch: ArchArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Decoder,
    Encoder,
}

#[derive(Serialize, Deserialize)]
struct Split {
    calibration: Vec<String>,
    test: Vec<String>,
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(alphas) = &common.alpha {
        cfg.alphas = alphas.clone();
    }
    if let Some(kind) = common.scorer {
        cfg.scorer.kind = kind;
    }
    if let Some(dir) = &common.cache_dir {
        cfg.cache_dir = dir.clone();
    }
    cfg.apply_env();
    cfg.validate()?;
    Ok(cfg)
}

fn read<T: serde::de::DeserializeOwned>(path: &Path, hint: &str) -> Result<Vec<T>> {
    read_jsonl(path).with_context(|| format!("reading {} (run `confilter {hint}` first)", path.display()))
}

fn report_failures(runner: &Runner<'_>) {
    let failures = runner.failures();
    if !failures.is_empty() {
        eprintln!("{} record(s) failed; see the log for details", failures.len());
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn split_sets(sets: &[ScoredClaimSet], split: &Split) -> (Vec<ScoredClaimSet>, Vec<ScoredClaimSet>) {
    let pick = |ids: &[String]| -> Vec<ScoredClaimSet> {
        let by_id: BTreeMap<&str, &ScoredClaimSet> = sets.iter().map(|s| (s.record_id.as_str(), s)).collect();
        ids.iter().filter_map(|id| by_id.get(id.as_str()).map(|s| (*s).clone())).collect()
    };
    (pick(&split.calibration), pick(&split.test))
}

fn load_split(runner: &Runner<'_>) -> Result<(Vec<ScoredClaimSet>, Vec<ScoredClaimSet>)> {
    let sets: Vec<ScoredClaimSet> = read(&runner.stage_path(SCORED), "score")?;
    let path = runner.stage_path(SPLIT);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {} (run `confilter calibrate` first)", path.display()))?;
    let split: Split = serde_json::from_str(&text)?;
    Ok(split_sets(&sets, &split))
}

fn emit_table<T: Serialize>(rows: &[T], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_csv(path, rows)?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn stage(cmd: &Command, common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let clients = Clients::from_config(&cfg)?;
    let runner = Runner::new(&cfg, &clients)?;
    match cmd {
        Command::Validate(_) => {
            let records: Vec<QueryRecord> = read_jsonl(&cfg.corpus)?;
            let violations = validate_corpus(&records);
            for v in &violations {
                println!("{}\t{:?}", v.record_id, v.rule);
            }
            if !violations.is_empty() {
                bail!("{} violation(s) in {}", violations.len(), cfg.corpus.display());
            }
            println!("ok: {} records, scorer {}", records.len(), cfg.scorer.scorer_id());
        }
        Command::Generate(_) => {
            let outputs = runner.generate(&runner.load_records()?)?;
            write_jsonl(&runner.stage_path(GENERATIONS), &outputs)?;
            println!("generated {} responses", outputs.len());
        }
        Command::Parse(_) => {
            let outputs: Vec<GeneratedOutput> = read(&runner.stage_path(GENERATIONS), "generate")?;
            let lists = runner.parse(&outputs)?;
            write_jsonl(&runner.stage_path(CLAIMS), &lists)?;
            println!("parsed {} responses", lists.len());
        }
        Command::Label(_) => {
            let records = runner.load_records()?;
            let lists: Vec<ClaimList> = match &cfg.claims {
                Some(path) => read_jsonl(path)?,
                None => read(&runner.stage_path(CLAIMS), "parse")?,
            };
            let labeled = runner.label(&records, &lists)?;
            write_jsonl(&runner.stage_path(LABELED), &labeled)?;
            println!(
                "labeled {} records ({} unreadable verdicts)",
                labeled.len(),
                runner.label_parse_failures()
            );
        }
        Command::Score(_) => {
            let records = runner.load_records()?;
            let labeled = runner.stage_path(LABELED);
            let lists: Vec<ClaimList> = if labeled.exists() && cfg.synthetic_claims.is_none() {
                read_jsonl(&labeled)?
            } else {
                runner.claims(&records)?
            };
            let engine = runner.engine()?;
            let sets = runner.score(&engine, &records, &lists);
            write_jsonl(&runner.stage_path(SCORED), &sets)?;
            println!("scored {} records with {}", sets.len(), engine.scorer_id());
        }
        Command::Calibrate(_) => {
            let sets: Vec<ScoredClaimSet> = read(&runner.stage_path(SCORED), "score")?;
            let (calib, test) = runner.split(&sets, 0)?;
            let split = Split {
                calibration: calib.iter().map(|s| s.record_id.clone()).collect(),
                test: test.iter().map(|s| s.record_id.clone()).collect(),
            };
            write_json(&runner.stage_path(SPLIT), &split)?;
            let scorer_id = cfg.scorer.scorer_id();
            let mut docs = Vec::new();
            for &alpha in &cfg.alphas {
                let doc = ThresholdDoc::new(runner.calibrate(&calib, alpha)?, scorer_id.clone(), now());
                println!("alpha {alpha}: threshold {} (n = {})", doc.value, doc.n);
                docs.push(doc);
            }
            write_jsonl(&runner.stage_path(THRESHOLDS), &docs)?;
        }
        Command::Filter(_) => {
            let (_, test) = load_split(&runner)?;
            let docs: Vec<ThresholdDoc> = read(&runner.stage_path(THRESHOLDS), "calibrate")?;
            let mut filtered = Vec::new();
            for doc in &docs {
                if let Some(s) = test.iter().find(|s| s.scorer_id != doc.scorer_id) {
                    bail!("threshold calibrated for `{}` but `{}` is scored by `{}`", doc.scorer_id, s.record_id, s.scorer_id);
                }
                filtered.extend(test.iter().map(|s| filter_claims(s, doc.threshold())));
            }
            write_jsonl(&runner.stage_path(FILTERED), &filtered)?;
            println!("filtered {} outputs at {} alpha(s)", test.len(), docs.len());
        }
        Command::Merge(_) => {
            let records = runner.load_records()?;
            let mut filtered: Vec<FilteredOutput> = read(&runner.stage_path(FILTERED), "filter")?;
            if !runner.merge(&records, &mut filtered)? {
                report_failures(&runner);
                bail!("merging failed for some records");
            }
            write_jsonl(&runner.stage_path(FILTERED), &filtered)?;
            println!("merged {} outputs", filtered.len());
        }
        Command::Evaluate(_) => {
            let (_, test) = load_split(&runner)?;
            let filtered: Vec<FilteredOutput> = read(&runner.stage_path(FILTERED), "filter")?;
            let records = if cfg.judge_answers { runner.load_records()? } else { Vec::new() };
            let mut reports: Vec<MetricsReport> = Vec::new();
            for chunk in filtered.chunks(test.len().max(1)) {
                let mut chunk = chunk.to_vec();
                let alpha = chunk.first().map_or(f64::NAN, |f| f.threshold_used.alpha);
                let answers = if cfg.judge_answers {
                    runner.judge_answers(&records, &test, &mut chunk)?
                } else {
                    Default::default()
                };
                let judged = Judgments {
                    correctness: answers.correctness.as_deref(),
                    strict_correctness: cfg.strict_correctness,
                    sc_unfiltered: answers.sc_unfiltered.as_deref(),
                    sc_filtered: answers.sc_filtered.as_deref(),
                };
                reports.push(evaluate(alpha, &test, &chunk, &judged)?);
            }
            write_jsonl(&runner.stage_path(METRICS), &reports)?;
            emit_table(&reports, None)?;
        }
        Command::Report(_) => {
            let outcome = runner.run()?;
            report_failures(&runner);
            println!("{}\n{}", outcome.csv.display(), outcome.json.display());
        }
        Command::Robustness(_) | Command::Simulate(_) | Command::Flops(_) => unreachable!("handled in main"),
    }
    report_failures(&runner);
    Ok(())
}

#[derive(Serialize)]
struct RobustnessRow {
    experiment: String,
    trial: usize,
    alpha: f64,
    calib_rate: Option<f64>,
    test_rate: Option<f64>,
    ef: f64,
    power: Option<f64>,
    fpr: f64,
    nr: f64,
    nvef: Option<f64>,
}

impl RobustnessRow {
    fn new(experiment: &str, trial: usize, rates: Option<(f64, f64)>, r: &MetricsReport) -> Self {
        Self {
            experiment: experiment.to_string(),
            trial,
            alpha: r.alpha,
            calib_rate: rates.map(|x| x.0),
            test_rate: rates.map(|x| x.1),
            ef: r.ef,
            power: r.power,
            fpr: r.fpr,
            nr: r.nr,
            nvef: r.nvef,
        }
    }
}

fn robustness(args: &RobustnessArgs) -> Result<()> {
    let cfg = load(&args.common)?;
    if cfg.distractor.is_none() && args.external.is_none() {
        bail!("nothing to do: configure [distractor] or pass --external");
    }
    let clients = Clients::from_config(&cfg)?;
    let runner = Runner::new(&cfg, &clients)?;
    let records = runner.load_records()?;
    let sets: Vec<ScoredClaimSet> = read(&runner.stage_path(SCORED), "score")?;
    let external: Option<Vec<ScoredClaimSet>> = args.external.as_deref().map(read_jsonl).transpose()?;
    let engine = runner.engine()?;
    let mut rows = Vec::new();
    for t in 0..cfg.trials {
        let (calib, test) = runner.split(&sets, t)?;
        if let Some(d) = runner.distraction(&engine, &records, &calib, &test, t)? {
            for r in &d.reports {
                rows.push(RobustnessRow::new("distraction", t, Some((d.calib_rate, d.test_rate)), r));
            }
        }
        if let Some(ext) = &external {
            for s in shift_experiment(&calib, ext, &test, &cfg.alphas)? {
                rows.push(RobustnessRow::new("shift/matched", t, None, &s.matched));
                rows.push(RobustnessRow::new("shift/external", t, None, &s.external));
            }
        }
    }
    let path = cfg.out_dir().join("robustness.csv");
    write_csv(&path, &rows)?;
    report_failures(&runner);
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct SimRow {
    experiment: String,
    calib_rate: Option<f64>,
    test_rate: Option<f64>,
    alpha: f64,
    trials: usize,
    mean_ef: f64,
    se_ef: f64,
    mean_nr: f64,
    mean_power: Option<f64>,
}

impl SimRow {
    fn new(experiment: &str, rates: Option<(f64, f64)>, s: &TrialSummary) -> Self {
        Self {
            experiment: experiment.to_string(),
            calib_rate: rates.map(|x| x.0),
            test_rate: rates.map(|x| x.1),
            alpha: s.alpha,
            trials: s.trials,
            mean_ef: s.mean_ef,
            se_ef: s.se_ef(),
            mean_nr: s.mean_nr,
            mean_power: s.mean_power,
        }
    }
}

fn parse_rate_pair(s: &str) -> Result<(f64, f64)> {
    let (c, t) = s.split_once(':').with_context(|| format!("rate pair `{s}` is not calib:test"))?;
    Ok((c.trim().parse()?, t.trim().parse()?))
}

fn run_simulation(args: &SimulateArgs) -> Result<()> {
    let cfg = SimulationConfig {
        n_calibration: args.n_calibration,
        n_test: args.n_test,
        n_trials: args.trials,
        claims_per_query: [3, 10],
        p_nonfactual: args.p_nonfactual,
        score_params: SyntheticScoreParams {
            mu_factual: args.mu_factual,
            mu_nonfactual: args.mu_nonfactual,
            sigma: args.sigma,
        },
        alphas: args.alpha.clone(),
        seed: args.seed,
    };
    let mut rows = Vec::new();
    match args.mode {
        SimMode::Coverage => {
            for s in simulate(&cfg)? {
                rows.push(SimRow::new("coverage", None, &s));
            }
        }
        SimMode::Shift => {
            let external = SyntheticScoreParams {
                mu_nonfactual: args.external_mu_nonfactual,
                ..cfg.score_params
            };
            for s in simulate_shift(&cfg, &external)? {
                rows.push(SimRow::new("shift/matched", None, &s.matched));
                rows.push(SimRow::new("shift/external", None, &s.external));
            }
        }
        SimMode::Distraction => {
            let pairs = args.rates.iter().map(|s| parse_rate_pair(s)).collect::<Result<Vec<_>>>()?;
            for d in simulate_distraction(&cfg, &pairs)? {
                for s in &d.rows {
                    rows.push(SimRow::new("distraction", Some((d.calib_rate, d.test_rate)), s));
                }
            }
        }
    }
    emit_table(&rows, args.out.as_deref())
}

fn flops(args: &FlopsArgs) -> Result<()> {
    let mut out = std::io::stdout().lock();
    if let Some(id) = &args.model {
        if args.active_params.is_none() {
            let p = published_flops(id).with_context(|| format!("no published figure for `{id}`"))?;
            writeln!(out, "{}\t{:e}", p.model_id, p.flops)?;
            return Ok(());
        }
    }
    let spec = ModelCostSpec {
        model_id: args.model.clone().unwrap_or_default(),
        active_params: args.active_params.context("--active-params or a known --model is required")?,
        prompt_tokens: args.prompt_tokens,
        generated_tokens: args.generated_tokens,
    };
    let arch = match args.arch {
        ArchArg::Decoder => Arch::Decoder,
        ArchArg::Encoder => Arch::Encoder,
    };
    let f = estimate_flops(&spec, arch)?;
    writeln!(out, "{f:e}\t(~{:e})", round_sig(f, 2))?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(args) => run_simulation(args),
        Command::Flops(args) => flops(args),
        Command::Robustness(args) => robustness(args),
        Command::Validate(c)
        | Command::Generate(c)
        | Command::Parse(c)
        | Command::Label(c)
        | Command::Score(c)
        | Command::Calibrate(c)
        | Command::Filter(c)
        | Command::Merge(c)
        | Command::Evaluate(c)
        | Command::Report(c) => stage(&cli.command, c),
    }
}
