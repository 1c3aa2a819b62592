//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use confilter_core::conformal::{calibrate, candidate_threshold, filter_claims};
use confilter_core::flops::{estimate_flops, published_flops, Arch, ModelCostSpec};
use confilter_core::metrics::{
    conditional_sc, correctness, empirical_factuality, evaluate, false_positive_rate, non_empty_rate,
    non_vacuous_ef, power, sufficient_correctness, CorrectnessJudgment, Judgments,
};
use confilter_core::model::{
    write_jsonl, Claim, DatasetTag, FilteredOutput, QueryRecord, ScoredClaimSet, Threshold, SENTINEL_HIGH,
    SENTINEL_LOW,
};
use confilter_core::robustness::{simulate, simulate_distraction, simulate_shift, SimulationConfig};
use confilter_core::scorers::SyntheticScoreParams;
use confilter_pipeline::config::RunConfig;
use confilter_pipeline::experiment::{run_experiment, Clients};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const ALPHAS_PER_MILLE: [u64; 4] = [50, 100, 200, 500];

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random_set(rng: &mut StdRng, id: &str, max_claims: usize) -> ScoredClaimSet {
    let n = rng.random_range(0..=max_claims);
    // A coarse grid half of the time, so ties between scores are common.
    let coarse = rng.random_bool(0.5);
    let pairs: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let s = if coarse {
                rng.random_range(0..=10) as f64 / 10.0
            } else {
                rng.random::<f64>()
            };
            (s, rng.random_bool(0.7))
        })
        .collect();
    ScoredClaimSet::from_pairs(id, "oracle", &pairs)
}

/// Smallest cutoff among {-1} and the set's scores whose strict filtrate is
/// all factual.
fn oracle_candidate(set: &ScoredClaimSet) -> f64 {
    let mut cutoffs: Vec<f64> = set.claims.iter().map(|c| c.score).collect();
    cutoffs.push(SENTINEL_LOW);
    cutoffs.sort_by(f64::total_cmp);
    for tau in cutoffs {
        if set.claims.iter().filter(|c| c.score > tau).all(|c| c.claim.label == Some(true)) {
            return tau;
        }
    }
    unreachable!("the largest score always works")
}

/// The k-th smallest candidate with k = ceil((n + 1)(1000 - a) / 1000) in
/// integer arithmetic, found by counting rather than sorting.
fn oracle_calibrate(candidates: &[f64], alpha_per_mille: u64) -> f64 {
    let n = candidates.len() as u64;
    let k = ((n + 1) * (1000 - alpha_per_mille)).div_ceil(1000);
    if k > n {
        return SENTINEL_HIGH;
    }
    *candidates
        .iter()
        .find(|&&v| {
            let below = candidates.iter().filter(|&&c| c < v).count() as u64;
            let at_most = candidates.iter().filter(|&&c| c <= v).count() as u64;
            below < k && k <= at_most
        })
        .expect("some candidate has rank k")
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut checks = 0;
    for i in 0..1000 {
        let n_sets = rng.random_range(1..=40);
        let sets: Vec<ScoredClaimSet> = (0..n_sets)
            .map(|j| random_set(&mut rng, &format!("i{i}s{j}"), 10))
            .collect();
        let mut cands = Vec::new();
        for s in &sets {
            let got = candidate_threshold(s).unwrap();
            let want = oracle_candidate(s);
            checks += 1;
            if got.value != want {
                mismatches += 1;
            }
            cands.push(got);
        }
        let values: Vec<f64> = cands.iter().map(|c| c.value).collect();
        for a in ALPHAS_PER_MILLE {
            let tau = calibrate(&cands, a as f64 / 1000.0).unwrap();
            checks += 1;
            if tau.value != oracle_calibrate(&values, a) || tau.calibration_size != sets.len() {
                mismatches += 1;
            }
        }
    }
    let took = start.elapsed();
    verdict(
        mismatches == 0 && took < Duration::from_secs(5),
        format!("{checks} checks, {mismatches} mismatches, {:.2?}", took),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let cfg = SimulationConfig::default();
    let rows = simulate(&cfg).unwrap();
    let took = start.elapsed();
    let mut pass = took < Duration::from_secs(60) && rows.len() == 3;
    let mut detail = Vec::new();
    for r in &rows {
        let ok = r.mean_ef >= 1.0 - r.alpha - 0.02;
        pass &= ok;
        detail.push(format!("alpha {} EF {:.4}", r.alpha, r.mean_ef));
    }
    verdict(pass, format!("{}, {:.2?}", detail.join("; "), took))
}

fn labeled(id: &str, labels: &[bool]) -> Vec<Claim> {
    labels
        .iter()
        .enumerate()
        .map(|(j, &l)| Claim::labeled(format!("{id}:c{j}"), "x", l))
        .collect()
}

fn source(id: &str, labels: &[bool]) -> ScoredClaimSet {
    let mut s = ScoredClaimSet::new(id, "fixture");
    for c in labeled(id, labels) {
        s.push(c, 0.5);
    }
    s
}

fn kept(id: &str, labels: &[bool]) -> FilteredOutput {
    FilteredOutput {
        record_id: id.into(),
        retained_claims: labeled(id, labels),
        merged_text: None,
        threshold_used: Threshold {
            value: 0.5,
            alpha: 0.1,
            calibration_size: 1,
        },
    }
}

/// Equal up to one unit in the last place of a value near 1.
fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= f64::EPSILON
}

fn criterion_3() -> Verdict {
    const T: bool = true;
    const F: bool = false;
    let mut failed = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if !same(got, want) {
            failed.push(format!("{name}: {got} != {want}"));
        }
    };

    // Five queries: sources and what survived filtering.
    let ids = ["q1", "q2", "q3", "q4", "q5"];
    let src_labels: [&[bool]; 5] = [&[T, T, F, T], &[T, F], &[F, F], &[T], &[T, F, T]];
    let kept_labels: [&[bool]; 5] = [&[T, T], &[], &[F], &[T], &[T, F, T]];
    let sources: Vec<ScoredClaimSet> = ids.iter().zip(src_labels).map(|(id, l)| source(id, l)).collect();
    let filtered: Vec<FilteredOutput> = ids.iter().zip(kept_labels).map(|(id, l)| kept(id, l)).collect();
    use CorrectnessJudgment::*;
    let judged = [Perfect, Acceptable, Incorrect, Missing, Perfect];
    let sc_f = [T, F, F, T, T];
    let sc_u = [T, T, F, T, F];
    let report = evaluate(
        0.1,
        &sources,
        &filtered,
        &Judgments {
            correctness: Some(&judged),
            strict_correctness: false,
            sc_unfiltered: Some(&sc_u),
            sc_filtered: Some(&sc_f),
        },
    )
    .unwrap();
    check("EF", report.ef, 3.0 / 5.0);
    check("NR", report.nr, 4.0 / 5.0);
    check("NvEF", report.nvef.unwrap_or(f64::NAN), 1.0 / 2.0);
    check("Power", report.power.unwrap_or(f64::NAN), 2.0 / 3.0);
    check("FPR", report.fpr, 2.0 / 5.0);
    check("Correctness", report.correctness.unwrap_or(f64::NAN), 3.0 / 5.0);
    check("Correctness strict", correctness(&judged, true).unwrap(), 2.0 / 5.0);
    check("SC", report.sc.unwrap_or(f64::NAN), 3.0 / 5.0);
    check("CSC", report.csc.unwrap_or(f64::NAN), 2.0 / 3.0);

    // The single-metric hand counts.
    check("EF pair", empirical_factuality(&[kept("a", &[T, T]), kept("b", &[T, F])]).unwrap(), 0.5);
    check(
        "Power single",
        power(&[source("a", &[T, T, F, T])], &[kept("a", &[T, T])]).unwrap(),
        2.0 / 3.0,
    );
    let fpr = false_positive_rate(
        &[source("a", &[F, F, T]), source("b", &[F, F])],
        &[kept("a", &[F]), kept("b", &[])],
    )
    .unwrap();
    check("FPR quarter", fpr.value, 0.25);
    check(
        "NR three of four",
        non_empty_rate(&[kept("a", &[T]), kept("b", &[F]), kept("c", &[]), kept("d", &[T])]).unwrap(),
        0.75,
    );
    let outs = [kept("a", &[]), kept("b", &[T]), kept("c", &[F])];
    check("EF with empty", empirical_factuality(&outs).unwrap(), 2.0 / 3.0);
    check("NvEF with empty", non_vacuous_ef(&outs).unwrap(), 0.5);
    check("Correctness pair", correctness(&[Perfect, Incorrect], false).unwrap(), 0.5);
    check("SC", sufficient_correctness(&[T, F, T, T]).unwrap(), 0.75);
    check("CSC", conditional_sc(&[T, T, F, T], &[T, F, F, T]).unwrap(), 2.0 / 3.0);

    if failed.is_empty() {
        verdict(true, "18 fixture values")
    } else {
        verdict(false, failed.join("; "))
    }
}

fn criterion_4() -> Verdict {
    let mut rng = StdRng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let n = rng.random_range(1..=30);
        let sets: Vec<ScoredClaimSet> = (0..n).map(|j| random_set(&mut rng, &format!("c{i}s{j}"), 10)).collect();
        let tau = Threshold {
            value: rng.random_range(-0.1..1.1),
            alpha: 0.1,
            calibration_size: 1,
        };
        let filtered: Vec<FilteredOutput> = sets.iter().map(|s| filter_claims(s, tau)).collect();
        let ef = empirical_factuality(&filtered).unwrap();
        let nr = non_empty_rate(&filtered).unwrap();
        // With every output empty NvEF is undefined and the product term is 0.
        let nvef = non_vacuous_ef(&filtered).unwrap_or(0.0);
        worst = worst.max((ef - (nvef * nr + (1.0 - nr))).abs());
    }
    verdict(worst <= 1e-12, format!("max deviation {worst:e} over 1000 corpora"))
}

fn criterion_5() -> Verdict {
    let two_sf = |x: f64| format!("{x:.1e}");
    let mut failed = Vec::new();
    for (id, params, want) in [
        ("gpt-oss-20b", 3.6e9, 1.44e13),
        ("Qwen3-8B", 8.19e9, 3.28e13),
        ("DeepSeek-R1", 37e9, 1.5e14),
    ] {
        let spec = ModelCostSpec {
            model_id: id.into(),
            active_params: params,
            prompt_tokens: 1000,
            generated_tokens: 1000,
        };
        let got = estimate_flops(&spec, Arch::Decoder).unwrap();
        if two_sf(got) != two_sf(want) {
            failed.push(format!("{id}: {got:e}"));
        }
    }
    for (id, want) in [("DeBERTa", 4.9e11), ("RoBERTa", 1.6e12)] {
        match published_flops(id) {
            Some(p) if p.flops == want && p.arch == Arch::Encoder => {}
            other => failed.push(format!("{id}: {other:?}")),
        }
    }
    if failed.is_empty() {
        verdict(true, "3 decoder rows at 2 s.f., 2 encoder rows exact")
    } else {
        verdict(false, failed.join("; "))
    }
}

fn criterion_6() -> Verdict {
    let cfg = SimulationConfig {
        n_trials: 100,
        alphas: vec![0.1],
        ..SimulationConfig::default()
    };
    let out = simulate_distraction(&cfg, &[(0.0, 0.0), (0.0, 0.25), (0.25, 0.25)]).unwrap();
    let (clean, attacked, matched) = (&out[0].rows[0], &out[1].rows[0], &out[2].rows[0]);
    let pass = attacked.mean_ef <= 0.9 - 0.05 && matched.mean_ef >= 0.9 - 0.02 && matched.mean_nr < clean.mean_nr;
    verdict(
        pass,
        format!(
            "EF clean {:.4}, test-only {:.4}, both {:.4}; NR clean {:.4}, both {:.4}",
            clean.mean_ef, attacked.mean_ef, matched.mean_ef, clean.mean_nr, matched.mean_nr
        ),
    )
}

fn criterion_7() -> Verdict {
    // The test distribution's non-factual scores sit 0.2 above those of the
    // external calibration corpus.
    let base = SyntheticScoreParams::default();
    let shifted = SyntheticScoreParams {
        mu_nonfactual: base.mu_nonfactual + 0.2,
        ..base
    };
    let cfg = SimulationConfig {
        n_trials: 100,
        alphas: vec![0.1],
        score_params: shifted,
        ..SimulationConfig::default()
    };
    let r = &simulate_shift(&cfg, &base).unwrap()[0];
    // Shifting the external corpus up instead only makes it conservative.
    let literal = &simulate_shift(
        &SimulationConfig {
            score_params: base,
            ..cfg.clone()
        },
        &shifted,
    )
    .unwrap()[0];
    verdict(
        r.external.mean_ef < r.matched.mean_ef,
        format!(
            "EF matched {:.4}, external {:.4} (external shifted up instead: matched {:.4}, external {:.4})",
            r.matched.mean_ef, r.external.mean_ef, literal.matched.mean_ef, literal.external.mean_ef
        ),
    )
}

fn synthetic_config(dir: &std::path::Path) -> RunConfig {
    let records: Vec<QueryRecord> = (0..400)
        .map(|i| QueryRecord {
            id: format!("s{i}"),
            query: format!("query {i}"),
            reference: String::new(),
            ground_truth: None,
            dataset_tag: DatasetTag::Synthetic,
        })
        .collect();
    write_jsonl(dir.join("corpus.jsonl"), &records).unwrap();
    let text = r#"
corpus = "corpus.jsonl"
alphas = [0.05, 0.1, 0.25]
cache_dir = "run"
seed = 11
trials = 5

[synthetic_claims]
claims_per_query = [3, 10]
p_nonfactual = 0.3

[scorer]
kind = "synthetic"

[distractor]
test_rate = 0.25
calibration_rate = 0.25
"#;
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    RunConfig::load(&path).unwrap()
}

fn criterion_8() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &std::path::Path| {
        let cfg = synthetic_config(dir);
        let out = run_experiment(&cfg, &Clients::default()).unwrap();
        std::fs::read(out.csv).unwrap()
    };
    let first = run(a.path());
    let rerun = run(a.path());
    let fresh = run(b.path());
    let rows = String::from_utf8_lossy(&first).lines().count() - 1;
    verdict(
        first == rerun && first == fresh && rows == 6,
        format!("{} bytes, {rows} rows; rerun and fresh-directory run identical", first.len()),
    )
}

fn criterion_9() -> Verdict {
    let mut rng = StdRng::seed_from_u64(9);
    let mut violations = 0;
    let mut pairs = 0;
    for i in 0..1000 {
        let set = random_set(&mut rng, &format!("m{i}"), 10);
        let mut cutoffs: Vec<f64> = set.claims.iter().map(|c| c.score).collect();
        cutoffs.extend([SENTINEL_LOW, SENTINEL_HIGH, rng.random::<f64>(), rng.random::<f64>()]);
        let retained = |value: f64| -> HashSet<String> {
            let tau = Threshold {
                value,
                alpha: 0.1,
                calibration_size: 1,
            };
            filter_claims(&set, tau).retained_claims.into_iter().map(|c| c.id).collect()
        };
        for &t1 in &cutoffs {
            for &t2 in &cutoffs {
                if t1 <= t2 {
                    pairs += 1;
                    if !retained(t2).is_subset(&retained(t1)) {
                        violations += 1;
                    }
                }
            }
        }
    }
    verdict(violations == 0, format!("{pairs} threshold pairs, {violations} violations"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("conformal oracle equivalence", criterion_1),
        ("coverage guarantee", criterion_2),
        ("metric fixtures", criterion_3),
        ("EF identity", criterion_4),
        ("FLOPs table", criterion_5),
        ("distractor trend", criterion_6),
        ("shift trend", criterion_7),
        ("determinism", criterion_8),
        ("threshold monotonicity", criterion_9),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {} ({name}): {status} - {}", i + 1, v.detail);
        failures += usize::from(!v.pass);
    }
    if failures > 0 {
        println!("{failures} criterion/criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
