//! Acceptance checks for the toolkit. Runs with its own harness and prints one
//! `criterion N: PASS|FAIL` line per check; exits non-zero if any fails.

mod support;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use opbm::clicksim::{
    place_outliers, simulate_sessions, ClickLog, ClickModel, ClickModelConfig, ExaminationModel,
    OutlierPlacement, Presentation,
};
use opbm::corpus::{binarize, synthesize_corpus, RankingCorpus};
use opbm::eval::{ndcg_at_k, t_test, t_test_two_sample, Variance};
use opbm::experiment::{
    build_world, experiment_em_config, preset, run_experiment, simulate_world, ExperimentConfig,
    RunRow, SweepSection,
};
use opbm::loglab::{ctr_per_position, outlier_vs_nonoutlier_summary};
use opbm::manifest::{verify, Manifest};
use opbm::pipeline::{
    analyze_stage, detect_stage, estimate_stage, evaluate_stage, simulate_stage, synth, train_stage,
    AnalyzeParams, DetectParams, EstimateParams, EvaluateParams, ObservableSpec, SimulateParams, SynthParams,
    TrainParams,
};
use opbm::propensity_em::{joint_posterior, run_em, EmState};
use opbm::ranker::{ips_weight, EstimatorKind, EstimatorSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{pearson, T_TEST_CASES};

type Verdict = (bool, String);

const RUNS: usize = 8;

fn main_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        name: "acceptance".into(),
        n_runs: RUNS,
        output_dir: dir.to_path_buf(),
        sweep: SweepSection { alphas: vec![0.75, 0.0] },
        ..ExperimentConfig::default()
    }
}

fn rows<'a>(rows: &'a [RunRow], alpha: f64, kind: EstimatorKind) -> Vec<&'a RunRow> {
    let mut v: Vec<&RunRow> = rows
        .iter()
        .filter(|r| r.alpha == alpha && r.estimator == kind)
        .collect();
    v.sort_by_key(|r| r.run);
    v
}

fn ce(rows_: &[RunRow], alpha: f64, kind: EstimatorKind) -> Vec<f64> {
    rows(rows_, alpha, kind).iter().map(|r| r.mean_ce).collect()
}

fn ndcg(rows_: &[RunRow], alpha: f64, kind: EstimatorKind) -> Vec<f64> {
    rows(rows_, alpha, kind).iter().map(|r| r.ndcg_at_k).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------

struct Recovery {
    config: ExperimentConfig,
    log: ClickLog,
    em: EmState,
    elapsed: Duration,
}

/// Seed-0 world of the main experiment, simulated and estimated on one thread.
fn recovery() -> Recovery {
    let config = main_config(Path::new("unused"));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let (log, em) = pool.install(|| {
        let world = build_world(&config, 0).unwrap();
        let log = simulate_world(&world, &config, 0.75, 0).unwrap();
        let em = run_em(&log, &world.split.train, &config.em).unwrap();
        (log, em)
    });
    Recovery {
        config,
        log,
        em,
        elapsed: start.elapsed(),
    }
}

fn criterion_1(rec: &Recovery) -> Verdict {
    let truth = ExaminationModel::from_config(&ClickModelConfig {
        alpha: 0.75,
        ..rec.config.click_model.clone()
    })
    .unwrap();
    let mut impressions: HashMap<(u16, u32), u64> = HashMap::new();
    for r in rec.log.records.iter().filter(|r| r.impression) {
        *impressions.entry((r.rank, r.signature)).or_default() += 1;
    }
    let (mut est, mut tru) = (Vec::new(), Vec::new());
    for (&(rank, sig), &n) in &impressions {
        if n < 500 {
            continue;
        }
        let s = &rec.log.signatures[sig as usize];
        est.push(rec.em.theta.theta(rank as usize, s).unwrap());
        tru.push(truth.propensity(rank as usize, s).unwrap());
    }
    let r = pearson(&est, &tru);
    let mut rel: Vec<f64> = est.iter().zip(&tru).map(|(e, t)| (e - t).abs() / t).collect();
    rel.sort_by(f64::total_cmp);
    let median = if rel.len() % 2 == 1 {
        rel[rel.len() / 2]
    } else {
        (rel[rel.len() / 2 - 1] + rel[rel.len() / 2]) / 2.0
    };
    let secs = rec.elapsed.as_secs_f64();
    (
        r > 0.95 && median < 0.15 && secs < 300.0 && rec.em.trace.len() == 20,
        format!(
            "{} cells, pearson {r:.4}, median relative error {median:.4}, \
             {secs:.1}s single-threaded",
            est.len()
        ),
    )
}

fn criterion_2(rows_: &[RunRow]) -> Verdict {
    let naive = ce(rows_, 0.75, EstimatorKind::Naive);
    let pbm = ce(rows_, 0.75, EstimatorKind::Pbm);
    let opbm = ce(rows_, 0.75, EstimatorKind::Opbm);
    let ordered = (0..naive.len())
        .filter(|&i| opbm[i] < pbm[i] && pbm[i] < naive[i])
        .count();
    let p1 = t_test_two_sample(&pbm, &opbm).unwrap();
    let p2 = t_test_two_sample(&naive, &pbm).unwrap();
    let gaps_positive = mean(&pbm) > mean(&opbm) && mean(&naive) > mean(&pbm);
    (
        naive.len() == RUNS && ordered >= 7 && gaps_positive && p1.p < 0.05 && p2.p < 0.05,
        format!(
            "ordered in {ordered}/{} runs; CE opbm {:.4} pbm {:.4} naive {:.4}; \
             p(pbm-opbm) {:.2e}, p(naive-pbm) {:.2e}",
            naive.len(),
            mean(&opbm),
            mean(&pbm),
            mean(&naive),
            p1.p,
            p2.p
        ),
    )
}

fn criterion_3(rows_: &[RunRow]) -> Verdict {
    let kinds = [
        EstimatorKind::Oracle,
        EstimatorKind::Opbm,
        EstimatorKind::Pbm,
        EstimatorKind::Naive,
    ];
    let m: Vec<f64> = kinds.iter().map(|&k| mean(&ndcg(rows_, 0.75, k))).collect();
    let chain = m.windows(2).all(|w| w[0] >= w[1] - 0.005);
    let oracle_top = m[1..].iter().all(|&x| m[0] > x);
    (
        chain && oracle_top,
        format!(
            "NDCG@10 oracle {:.4} opbm {:.4} pbm {:.4} naive {:.4}",
            m[0], m[1], m[2], m[3]
        ),
    )
}

fn criterion_4() -> Verdict {
    let config = ExperimentConfig {
        n_clicks: 60_000,
        outliers: OutlierPlacement {
            p_abnormal: 0.0,
            fixed_positions: Vec::new(),
        },
        ..ExperimentConfig::default()
    };
    let world = build_world(&config, 11).unwrap();
    let log = simulate_world(&world, &config, 0.75, 11).unwrap();
    let em_config = opbm::propensity_em::EmConfig {
        seed: 11,
        ..experiment_em_config()
    };
    let kinds = [EstimatorKind::Opbm, EstimatorKind::OpbmLazy, EstimatorKind::Pbm];
    let states: Vec<EmState> = kinds
        .iter()
        .map(|k| run_em(&k.view(&log), &world.split.train, &em_config).unwrap())
        .collect();
    let mut worst = 0.0f64;
    let mut same_cells = true;
    for s in &states[..2] {
        same_cells &= s.theta.len() == states[2].theta.len();
        for (k, sig, v) in s.theta.iter() {
            match states[2].theta.get(k, sig) {
                Some(w) => worst = worst.max((v - w).abs()),
                None => same_cells = false,
            }
        }
    }
    let specs: Vec<EstimatorSpec> = kinds
        .iter()
        .zip(&states)
        .map(|(&k, s)| EstimatorSpec::with_table(k, s.theta.clone()).unwrap())
        .collect();
    let mismatched = log
        .records
        .iter()
        .filter(|r| {
            let w: Vec<f64> = specs.iter().map(|s| ips_weight(r, &log, s).unwrap()).collect();
            w.iter().any(|&x| (x - w[0]).abs() > 1e-9)
        })
        .count();
    (
        same_cells && worst <= 1e-9 && mismatched == 0,
        format!(
            "{} cells, max |opbm - pbm| {worst:.1e}, {mismatched} of {} records with differing weights",
            states[2].theta.len(),
            log.records.len()
        ),
    )
}

fn criterion_5(rows_: &[RunRow]) -> Verdict {
    let opbm = mean(&ndcg(rows_, 0.0, EstimatorKind::Opbm));
    let pbm = mean(&ndcg(rows_, 0.0, EstimatorKind::Pbm));
    let gap = (opbm - pbm).abs();
    (
        gap < 0.01,
        format!("alpha 0: NDCG@10 opbm {opbm:.4} pbm {pbm:.4}, gap {gap:.4}"),
    )
}

fn criterion_6(rows_: &[RunRow]) -> Verdict {
    let alpha = 0.75;
    let full = mean(&ce(rows_, alpha, EstimatorKind::Opbm));
    let lazy = mean(&ce(rows_, alpha, EstimatorKind::OpbmLazy));
    let pbm = mean(&ce(rows_, alpha, EstimatorKind::Pbm));
    (
        full <= lazy && lazy < pbm,
        format!("outliers at 4 and 9: CE opbm {full:.4} opbm_lazy {lazy:.4} pbm {pbm:.4}"),
    )
}

// ---------------------------------------------------------------------------

fn brute_force_ndcg(ranked: &[i32], k: usize) -> f64 {
    fn dcg(g: &[i32], k: usize) -> f64 {
        g.iter()
            .take(k)
            .enumerate()
            .map(|(i, &x)| (2f64.powi(x) - 1.0) / ((i + 2) as f64).log2())
            .sum()
    }
    fn permutations(items: &mut Vec<i32>, n: usize, out: &mut Vec<Vec<i32>>) {
        if n <= 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..n {
            permutations(items, n - 1, out);
            let j = if n % 2 == 0 { i } else { 0 };
            items.swap(j, n - 1);
        }
    }
    let mut all = Vec::new();
    permutations(&mut ranked.to_vec(), ranked.len(), &mut all);
    let ideal = all.iter().map(|p| dcg(p, k)).fold(0.0, f64::max);
    if ideal == 0.0 {
        0.0
    } else {
        dcg(ranked, k) / ideal
    }
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut ndcg_mismatch = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..=6);
        let grades: Vec<i32> = (0..len).map(|_| rng.random_range(0..5)).collect();
        let k = rng.random_range(1..=6);
        let got: f64 = ndcg_at_k(&grades, &grades, k).unwrap();
        if (got - brute_force_ndcg(&grades, k)).abs() > 1e-12 {
            ndcg_mismatch += 1;
        }
    }

    // Bayes' rule over the four (E, R) states with click = E * R.
    let mut posterior_err = 0.0f64;
    for _ in 0..10_000 {
        let theta: f64 = rng.random_range(0.0..1.0);
        let gamma: f64 = rng.random_range(0.0..1.0);
        for click in [false, true] {
            let got = joint_posterior(theta, gamma, click).unwrap();
            let prior = [
                theta * gamma,
                theta * (1.0 - gamma),
                (1.0 - theta) * gamma,
                (1.0 - theta) * (1.0 - gamma),
            ];
            let consistent = [click, !click, !click, !click];
            let z: f64 = (0..4).filter(|&i| consistent[i]).map(|i| prior[i]).sum();
            for i in 0..4 {
                let want = if consistent[i] { prior[i] / z } else { 0.0 };
                posterior_err = posterior_err.max((got[i] - want).abs());
            }
            posterior_err = posterior_err.max((got.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut ttest_err = 0.0f64;
    for c in &T_TEST_CASES {
        ttest_err = ttest_err.max((t_test(c.a, c.b, Variance::Pooled).unwrap().p - c.pooled.1).abs());
        ttest_err = ttest_err.max((t_test(c.a, c.b, Variance::Welch).unwrap().p - c.welch.1).abs());
    }
    (
        ndcg_mismatch == 0 && posterior_err <= 1e-12 && ttest_err <= 1e-6,
        format!(
            "ndcg mismatches {ndcg_mismatch}/1000, posterior error {posterior_err:.1e}, \
             t-test p error {ttest_err:.1e}"
        ),
    )
}

/// Click rate per (rank, signature, relevance) cell against `gamma * theta`.
fn fidelity(corpus: &RankingCorpus, model: ClickModel, alpha: f64, placement: &OutlierPlacement) -> (usize, f64) {
    let config = ClickModelConfig {
        model,
        alpha,
        sigma: 1.0,
        ..ClickModelConfig::default()
    };
    let exam = ExaminationModel::from_config(&config).unwrap();
    let lens = vec![10; corpus.n_queries()];
    let sigs = place_outliers(&lens, placement, 8).unwrap();
    let presentations: Vec<Presentation> = sigs
        .into_iter()
        .map(|signature| Presentation {
            docs: (0..10).collect(),
            signature,
        })
        .collect();
    let log = simulate_sessions(corpus, &presentations, &exam, 8, 50_000).unwrap();
    let mut cells: BTreeMap<(u16, u32, u8), (u64, u64)> = BTreeMap::new();
    for r in &log.records {
        let grade = corpus.queries[r.query as usize].documents[r.doc as usize].grade;
        let cell = cells.entry((r.rank, r.signature, binarize(grade).unwrap())).or_default();
        cell.0 += u64::from(r.impression);
        cell.1 += u64::from(r.click);
    }
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (&(rank, sig, rel), &(n, c)) in &cells {
        if n < 200 {
            continue;
        }
        checked += 1;
        let p = f64::from(rel) * exam.propensity(rank as usize, &log.signatures[sig as usize]).unwrap();
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        let dev = (c as f64 - n as f64 * p).abs();
        let z = if sd > 0.0 {
            dev / sd
        } else if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    (checked, worst)
}

fn criterion_8() -> Verdict {
    let corpus = synthesize_corpus(100, 10, 8, 8).unwrap();
    let single = OutlierPlacement::default();
    let pair = OutlierPlacement {
        p_abnormal: 0.5,
        fixed_positions: vec![4, 9],
    };
    let cases = [
        ("pbm", ClickModel::Pbm, 0.0, &single),
        ("opbm_g a=0.25", ClickModel::OpbmG, 0.25, &single),
        ("opbm_g a=0.75", ClickModel::OpbmG, 0.75, &single),
        ("opbm_mg", ClickModel::OpbmMg, 0.75, &pair),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, model, alpha, placement) in cases {
        let (checked, worst) = fidelity(&corpus, model, alpha, placement);
        pass &= checked > 0 && worst <= 4.0;
        parts.push(format!("{name}: {checked} cells, max {worst:.2} sd"));
    }
    (pass, parts.join("; "))
}

fn criterion_9(log: &ClickLog) -> Verdict {
    let summary = outlier_vs_nonoutlier_summary(log).unwrap();
    let (Some(clicks), Some(ctr)) = (summary.clicks_test, summary.ctr_test) else {
        return (false, "too few pages for a t-test".into());
    };
    let direction = summary.outlier.avg_clicks > summary.non_outlier.avg_clicks
        && summary.outlier.avg_ctr > summary.non_outlier.avg_ctr;
    let curves = ctr_per_position(log).unwrap();
    let mut failing_ranks = Vec::new();
    for rank in 4..=log.depth {
        match (curves.outlier.at(rank), curves.non_outlier.at(rank)) {
            (Some(o), Some(n)) if o.ctr > n.ctr => {}
            _ => failing_ranks.push(rank),
        }
    }
    (
        direction && clicks.p < 0.001 && ctr.p < 0.001 && failing_ranks.is_empty(),
        format!(
            "avg clicks {:.3} vs {:.3} (p {:.1e}), CTR {:.4} vs {:.4} (p {:.1e}), \
             ranks >= 4 without outlier lead: {failing_ranks:?}",
            summary.outlier.avg_clicks,
            summary.non_outlier.avg_clicks,
            clicks.p,
            summary.outlier.avg_ctr,
            summary.non_outlier.avg_ctr,
            ctr.p
        ),
    )
}

// ---------------------------------------------------------------------------

fn run_all_stages(out: &Path) {
    let corpus = synth(
        &SynthParams {
            n_queries: 300,
            seed: 10,
            ..SynthParams::default()
        },
        out,
    )
    .unwrap();
    let click_model = ClickModelConfig {
        model: ClickModel::OpbmG,
        alpha: 0.75,
        ..ClickModelConfig::default()
    };
    simulate_stage(&SimulateParams::new(corpus.clone(), click_model, 20_000, 10), out).unwrap();
    let (train, log) = (out.join("train.svm"), out.join("clicks.csv"));
    let table = estimate_stage(
        &EstimateParams {
            corpus: train.clone(),
            log: log.clone(),
            estimator: EstimatorKind::Opbm,
            em: experiment_em_config(),
        },
        out,
    )
    .unwrap();
    let model = train_stage(
        &TrainParams {
            corpus: train.clone(),
            log: log.clone(),
            estimator: EstimatorKind::Opbm,
            table: Some(table.clone()),
            target_cap: 1.0,
            regression: Default::default(),
        },
        out,
    )
    .unwrap();
    let mut eval = EvaluateParams::new(out.join("test.svm"), model, train.clone(), log.clone(), EstimatorKind::Opbm);
    eval.table = Some(table);
    evaluate_stage(&eval, out).unwrap();
    analyze_stage(&AnalyzeParams::new(train, log), out).unwrap();
    let observable = ObservableSpec {
        columns: vec![0, 1],
        sidecar: None,
    };
    detect_stage(&DetectParams::new(corpus, observable), out).unwrap();
}

fn small_experiment(out: &Path) -> Manifest {
    let config = ExperimentConfig {
        n_runs: 3,
        n_clicks: 10_000,
        output_dir: out.to_path_buf(),
        corpus: opbm::experiment::CorpusSection {
            n_queries: 200,
            ..Default::default()
        },
        ..preset("rq4_two_outliers").unwrap()
    };
    run_experiment(&config).unwrap().manifest
}

fn differing(a: &Manifest, b: &Manifest) -> Vec<String> {
    a.files
        .keys()
        .chain(b.files.keys())
        .filter(|k| a.files.get(*k) != b.files.get(*k))
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn criterion_10() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_all_stages(&a);
    let first = std::fs::read(a.join("manifest.json")).unwrap();
    run_all_stages(&a);
    let same_dir = first == std::fs::read(a.join("manifest.json")).unwrap();
    run_all_stages(&b);
    let (ma, mb) = (Manifest::load(&a).unwrap(), Manifest::load(&b).unwrap());
    let stage_diff = differing(&ma, &mb);

    // The resolved config records its output directory, so an experiment is
    // rerun in place after wiping it.
    let exp = tmp.path().join("exp");
    let xa = small_experiment(&exp);
    let exp_first = std::fs::read(exp.join("manifest.json")).unwrap();
    std::fs::remove_dir_all(&exp).unwrap();
    let xb = small_experiment(&exp);
    let exp_diff = differing(&xa, &xb);
    let exp_same = exp_first == std::fs::read(exp.join("manifest.json")).unwrap();

    let drift: usize = [&a, &b, &exp].iter().map(|d| verify(d).unwrap().len()).sum();
    (
        same_dir && stage_diff.is_empty() && exp_same && exp_diff.is_empty() && xa.runs.iter().all(|r| r.ok) && drift == 0,
        format!(
            "stage rerun identical manifest: {same_dir}; {} stage files, differing {stage_diff:?}; \
             {} experiment files, identical manifest on rerun: {exp_same}; drift {drift}",
            ma.files.len(),
            xa.files.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(usize, Verdict)> = Vec::new();
    let mut report = |n: usize, v: Verdict| {
        println!("criterion {n}: {} {}", if v.0 { "PASS" } else { "FAIL" }, v.1);
        results.push((n, v));
    };

    let rec = recovery();
    report(1, criterion_1(&rec));

    let main_dir = tempfile::tempdir().unwrap();
    let main = run_experiment(&main_config(main_dir.path())).unwrap();
    report(2, criterion_2(&main.rows));
    report(3, criterion_3(&main.rows));
    report(4, criterion_4());
    report(5, criterion_5(&main.rows));

    let rq4_dir = tempfile::tempdir().unwrap();
    let rq4 = run_experiment(&ExperimentConfig {
        output_dir: rq4_dir.path().to_path_buf(),
        ..preset("rq4_two_outliers").unwrap()
    })
    .unwrap();
    report(6, criterion_6(&rq4.rows));
    report(7, criterion_7());
    report(8, criterion_8());
    report(9, criterion_9(&rec.log));
    report(10, criterion_10());

    let failed: Vec<usize> = results.iter().filter(|(_, v)| !v.0).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
