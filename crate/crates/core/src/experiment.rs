//! Seeded multi-run experiments: corpus, outliers, clicks, propensity
//! estimation, ranker training and evaluation, averaged over runs.
//!
//! Run `r` uses seed `base_seed + r` for every random stage, so runs can be
//! scheduled in any order. All files of a run are produced in memory and
//! written only after the run succeeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clicksim::{
    place_outliers, simulate, train_production_ranker, ClickLog, ClickModel, ClickModelConfig,
    OutlierPlacement,
};
use crate::corpus::{
    binarize, load_corpus, split, synthesize_corpus_with_signal, CorpusFormat, CorpusSplit,
    RankingCorpus, SplitSpec, SYNTH_SIGNAL,
};
use crate::error::{Error, Result};
use crate::eval::{
    corrected_click_ce, mean_binary_ce, mean_ndcg, GainMode, MetricReport, DEFAULT_CE_CLAMP,
    METRIC_SCHEMA_VERSION,
};
use crate::learner::{LearnerKind, RegressionConfig, RelevanceModel};
use crate::manifest::{Manifest, RunStatus};
use crate::outliers::OutlierSignature;
use crate::propensity_em::{run_em, EmConfig, EmState};
use crate::ranker::{corrected_clicks, score_and_rank, train_unbiased, EstimatorKind, EstimatorSpec};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Load this file instead of synthesizing.
    pub path: Option<PathBuf>,
    pub format: CorpusFormat,
    pub n_queries: usize,
    pub docs_per_query: usize,
    pub feature_dim: usize,
    pub signal: f64,
    /// Fixed synthesis seed; when absent every run synthesizes with its own.
    pub seed: Option<u64>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            path: None,
            format: CorpusFormat::LetorSvmlight,
            n_queries: 2000,
            docs_per_query: 10,
            feature_dim: 8,
            signal: SYNTH_SIGNAL,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub production_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitSpec::default();
        SplitSection {
            train_fraction: s.train_fraction,
            production_fraction: s.production_fraction,
            test_fraction: s.test_fraction,
        }
    }
}

impl SplitSection {
    pub fn spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            production_fraction: self.production_fraction,
            test_fraction: self.test_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Alpha values to simulate; empty means the click model's own alpha.
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerSection {
    pub target_cap: f64,
    pub regression: RegressionConfig,
}

impl Default for RankerSection {
    fn default() -> Self {
        RankerSection {
            target_cap: 1.0,
            regression: RegressionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub gain: GainMode,
    pub ce_clamp: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: 10,
            gain: GainMode::Graded,
            ce_clamp: DEFAULT_CE_CLAMP,
        }
    }
}

/// Relevance learner used inside EM by experiments: a linear logistic model,
/// which matches the synthetic corpus and recovers propensities far better
/// than default-size stump ensembles.
pub fn experiment_em_config() -> EmConfig {
    EmConfig {
        regression: RegressionConfig {
            learner: LearnerKind::LogisticLinear,
            rounds: 25,
            ..RegressionConfig::default()
        },
        ..EmConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub n_runs: usize,
    pub base_seed: u64,
    pub n_clicks: u64,
    pub output_dir: PathBuf,
    pub estimators: Vec<EstimatorKind>,
    pub corpus: CorpusSection,
    pub split: SplitSection,
    /// Learner of the production ranker that orders the presented lists.
    pub production: RegressionConfig,
    pub outliers: OutlierPlacement,
    /// `seed` is replaced by the run seed.
    pub click_model: ClickModelConfig,
    pub sweep: SweepSection,
    /// `seed` is replaced by the run seed.
    pub em: EmConfig,
    pub ranker: RankerSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            name: "custom".into(),
            n_runs: 8,
            base_seed: 0,
            n_clicks: 300_000,
            output_dir: PathBuf::from("results"),
            estimators: vec![
                EstimatorKind::Naive,
                EstimatorKind::Pbm,
                EstimatorKind::Opbm,
                EstimatorKind::Oracle,
            ],
            corpus: CorpusSection::default(),
            split: SplitSection::default(),
            production: RegressionConfig::default(),
            outliers: OutlierPlacement::default(),
            click_model: ClickModelConfig {
                model: ClickModel::OpbmG,
                alpha: 0.75,
                ..ClickModelConfig::default()
            },
            sweep: SweepSection::default(),
            em: experiment_em_config(),
            ranker: RankerSection::default(),
            eval: EvalSection::default(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["rq2_real_table", "rq3_sweep", "rq4_two_outliers", "pbm_sanity"];

/// Named configurations for the outlier-bias experiments.
///
/// `rq2_real_table` simulates from a user-supplied propensity table at
/// `propensity_table.csv`; point `click_model.table_path` elsewhere as needed.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig {
        name: name.to_string(),
        ..ExperimentConfig::default()
    };
    let config = match name {
        "rq2_real_table" => ExperimentConfig {
            click_model: ClickModelConfig {
                model: ClickModel::OpbmReal,
                table_path: Some(PathBuf::from("propensity_table.csv")),
                ..ClickModelConfig::default()
            },
            ..base
        },
        "rq3_sweep" => ExperimentConfig {
            click_model: ClickModelConfig {
                model: ClickModel::OpbmG,
                sigma: 1.0,
                ..ClickModelConfig::default()
            },
            sweep: SweepSection {
                alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            },
            ..base
        },
        "rq4_two_outliers" => ExperimentConfig {
            estimators: vec![
                EstimatorKind::Naive,
                EstimatorKind::Pbm,
                EstimatorKind::OpbmLazy,
                EstimatorKind::Opbm,
            ],
            outliers: OutlierPlacement {
                p_abnormal: 0.5,
                fixed_positions: vec![4, 9],
            },
            click_model: ClickModelConfig {
                model: ClickModel::OpbmMg,
                alpha: 0.75,
                sigma: 1.0,
                ..ClickModelConfig::default()
            },
            ..base
        },
        "pbm_sanity" => ExperimentConfig {
            estimators: vec![EstimatorKind::Naive, EstimatorKind::Pbm, EstimatorKind::Opbm],
            outliers: OutlierPlacement {
                p_abnormal: 0.0,
                fixed_positions: Vec::new(),
            },
            click_model: ClickModelConfig::default(),
            ..base
        },
        other => {
            return Err(Error::Unknown {
                kind: "preset",
                name: other.to_string(),
            })
        }
    };
    Ok(config)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be >= 1".into()));
        }
        if self.n_clicks == 0 {
            return Err(Error::Config("n_clicks must be >= 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("estimator list is empty".into()));
        }
        let mut seen = self.estimators.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.estimators.len() {
            return Err(Error::Config("estimator list has duplicates".into()));
        }
        if let Some(a) = self.sweep.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("sweep alpha {a} outside [0, 1]")));
        }
        if self.corpus.path.is_none()
            && (self.corpus.n_queries == 0 || self.corpus.docs_per_query == 0 || self.corpus.feature_dim == 0)
        {
            return Err(Error::Config("synthetic corpus sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.outliers.p_abnormal) {
            return Err(Error::Config("p_abnormal outside [0, 1]".into()));
        }
        if !(self.ranker.target_cap > 0.0) {
            return Err(Error::Config("target_cap must be positive".into()));
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval k must be >= 1".into()));
        }
        self.split.spec(0).validate()?;
        self.click_model.validate()?;
        self.production.validate()?;
        self.em.validate()?;
        self.ranker.regression.validate()
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.base_seed.wrapping_add(run as u64)
    }

    /// Alpha values simulated per run.
    pub fn alphas(&self) -> Vec<f64> {
        if self.sweep.alphas.is_empty() {
            vec![self.click_model.alpha]
        } else {
            self.sweep.alphas.clone()
        }
    }
}

/// Everything a run needs before clicks are simulated.
#[derive(Debug, Clone)]
pub struct World {
    pub corpus: RankingCorpus,
    pub split: CorpusSplit,
    pub production: RelevanceModel,
    /// One signature per training query.
    pub signatures: Vec<OutlierSignature>,
}

pub fn build_world(config: &ExperimentConfig, seed: u64) -> Result<World> {
    let c = &config.corpus;
    let corpus = match &c.path {
        Some(path) => load_corpus(path, c.format)?,
        None => synthesize_corpus_with_signal(
            c.n_queries,
            c.docs_per_query,
            c.feature_dim,
            c.seed.unwrap_or(seed),
            c.signal,
        )?,
    };
    let split = split(&corpus, &config.split.spec(seed))?;
    let production = train_production_ranker(&split.production, &config.production)?;
    let depth = config.click_model.depth;
    let lens: Vec<usize> = split
        .train
        .queries
        .iter()
        .map(|q| q.documents.len().min(depth))
        .collect();
    let signatures = place_outliers(&lens, &config.outliers, seed)?;
    Ok(World {
        corpus,
        split,
        production,
        signatures,
    })
}

/// Simulates the training clicks of `world` under `alpha`.
pub fn simulate_world(world: &World, config: &ExperimentConfig, alpha: f64, seed: u64) -> Result<ClickLog> {
    let click_model = ClickModelConfig {
        alpha,
        seed,
        ..config.click_model.clone()
    };
    simulate(
        &world.split.train,
        &world.production,
        &world.signatures,
        &click_model,
        config.n_clicks,
    )
}

#[derive(Debug, Clone)]
pub struct EstimatorOutcome {
    pub kind: EstimatorKind,
    /// EM result for estimators that need a propensity table.
    pub em: Option<EmState>,
    pub report: MetricReport,
}

/// CE of the oracle: its predictions are the true labels themselves.
fn oracle_ce(log: &ClickLog, corpus: &RankingCorpus, clamp: f64) -> Result<f64> {
    let cells = corrected_clicks(log, &EstimatorSpec::naive())?;
    let labels = cells
        .keys()
        .map(|&(q, d)| binarize(corpus.queries[q as usize].documents[d as usize].grade))
        .collect::<Result<Vec<u8>>>()?;
    let preds: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    mean_binary_ce(&preds, &labels, clamp)
}

/// Estimates propensities where needed, then trains and evaluates each
/// estimator. Estimators whose log views coincide share one EM run.
pub fn evaluate_estimators(
    world: &World,
    log: &ClickLog,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<EstimatorOutcome>> {
    let train = &world.split.train;
    let test = &world.split.test;
    let em_config = EmConfig {
        seed,
        ..config.em.clone()
    };
    let mut cache: Vec<(ClickLog, EmState)> = Vec::new();
    let mut outcomes = Vec::with_capacity(config.estimators.len());
    for &kind in &config.estimators {
        let (spec, em) = match kind {
            EstimatorKind::Naive => (EstimatorSpec::naive(), None),
            EstimatorKind::Oracle => (EstimatorSpec::oracle(), None),
            _ => {
                let view = kind.view(log);
                let state = match cache.iter().find(|(v, _)| *v == view) {
                    Some((_, s)) => s.clone(),
                    None => {
                        let s = run_em(&view, train, &em_config)?;
                        cache.push((view, s.clone()));
                        s
                    }
                };
                (EstimatorSpec::with_table(kind, state.theta.clone())?, Some(state))
            }
        };
        let mean_ce = match kind {
            EstimatorKind::Oracle => oracle_ce(log, train, config.eval.ce_clamp)?,
            _ => corrected_click_ce(log, train, &spec, config.eval.ce_clamp)?,
        };
        let model = train_unbiased(
            log,
            train,
            &spec,
            &config.ranker.regression,
            config.ranker.target_cap,
        )?;
        let ranked = score_and_rank(&model, test)?;
        let report = MetricReport {
            schema_version: METRIC_SCHEMA_VERSION,
            estimator: kind.name().to_string(),
            k: config.eval.k,
            ndcg_at_k: mean_ndcg(test, &ranked, config.eval.k, config.eval.gain)?,
            mean_ce,
            n_queries: test.n_queries(),
            n_records: log.records.len(),
            seed,
        };
        report.validate()?;
        outcomes.push(EstimatorOutcome { kind, em, report });
    }
    Ok(outcomes)
}

/// One metrics row of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: usize,
    pub seed: u64,
    pub alpha: f64,
    pub estimator: EstimatorKind,
    pub ndcg_at_k: f64,
    pub mean_ce: f64,
    pub n_queries: usize,
    pub n_records: usize,
}

pub const RUN_CSV_HEADER: &str = "run,seed,alpha,estimator,k,ndcg_at_k,mean_ce,n_queries,n_records";
pub const AGGREGATE_CSV_HEADER: &str = "alpha,estimator,n_runs,ndcg_mean,ndcg_std,ce_mean,ce_std";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub alpha: f64,
    pub estimator: EstimatorKind,
    pub n_runs: usize,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    pub ce_mean: f64,
    pub ce_std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Groups rows by (alpha, estimator) in first-seen order.
pub fn aggregate(rows: &[RunRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(f64, EstimatorKind)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(a, e)| a == r.alpha && e == r.estimator) {
            keys.push((r.alpha, r.estimator));
        }
    }
    keys.into_iter()
        .map(|(alpha, estimator)| {
            let group: Vec<&RunRow> = rows
                .iter()
                .filter(|r| r.alpha == alpha && r.estimator == estimator)
                .collect();
            let ndcg: Vec<f64> = group.iter().map(|r| r.ndcg_at_k).collect();
            let ce: Vec<f64> = group.iter().map(|r| r.mean_ce).collect();
            let (ndcg_mean, ndcg_std) = mean_std(&ndcg);
            let (ce_mean, ce_std) = mean_std(&ce);
            AggregateRow {
                alpha,
                estimator,
                n_runs: group.len(),
                ndcg_mean,
                ndcg_std,
                ce_mean,
                ce_std,
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = format!("{AGGREGATE_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.alpha, r.estimator, r.n_runs, r.ndcg_mean, r.ndcg_std, r.ce_mean, r.ce_std
        )
        .unwrap();
    }
    out
}

/// Parses the per-run metrics CSV back into rows.
pub fn parse_run_csv(text: &str) -> Result<Vec<RunRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RUN_CSV_HEADER => {}
        _ => return Err(Error::parse(1, "unexpected run metrics header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::parse(i + 1, "expected 9 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(i + 1, e.to_string()));
            let int = |s: &str| s.parse::<u64>().map_err(|e| Error::parse(i + 1, e.to_string()));
            Ok(RunRow {
                run: int(f[0])? as usize,
                seed: int(f[1])?,
                alpha: num(f[2])?,
                estimator: f[3].parse()?,
                ndcg_at_k: num(f[5])?,
                mean_ce: num(f[6])?,
                n_queries: int(f[7])? as usize,
                n_records: int(f[8])? as usize,
            })
        })
        .collect()
}

fn run_dir(run: usize) -> String {
    format!("runs/run_{run:03}")
}

struct RunOutput {
    rows: Vec<RunRow>,
    files: Vec<(String, String)>,
}

fn execute_run(config: &ExperimentConfig, run: usize) -> Result<RunOutput> {
    let seed = config.run_seed(run);
    let world = build_world(config, seed)?;
    let dir = run_dir(run);
    let mut rows = Vec::new();
    let mut files = Vec::new();
    let mut metrics = format!("{RUN_CSV_HEADER}\n");
    for alpha in config.alphas() {
        let log = simulate_world(&world, config, alpha, seed)?;
        let outcomes = evaluate_estimators(&world, &log, config, seed)?;
        for o in outcomes {
            let r = &o.report;
            writeln!(
                metrics,
                "{run},{seed},{alpha},{},{},{},{},{},{}",
                o.kind, r.k, r.ndcg_at_k, r.mean_ce, r.n_queries, r.n_records
            )
            .unwrap();
            if let Some(em) = &o.em {
                files.push((format!("{dir}/alpha_{alpha}/{}_theta.csv", o.kind), em.theta.to_csv()));
                files.push((format!("{dir}/alpha_{alpha}/{}_trace.csv", o.kind), em.trace_csv()));
            }
            rows.push(RunRow {
                run,
                seed,
                alpha,
                estimator: o.kind,
                ndcg_at_k: r.ndcg_at_k,
                mean_ce: r.mean_ce,
                n_queries: r.n_queries,
                n_records: r.n_records,
            });
        }
    }
    files.push((format!("{dir}/metrics.csv"), metrics));
    Ok(RunOutput { rows, files })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub rows: Vec<RunRow>,
    pub aggregate: Vec<AggregateRow>,
    pub manifest: Manifest,
}

/// Runs every seed, writes per-run and aggregate CSVs plus the resolved
/// config under `output_dir`, and records all of it in the manifest.
///
/// A failed run is recorded in the manifest and skipped; the call fails only
/// when no run succeeds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let dir = config.output_dir.clone();
    let results: Vec<Result<RunOutput>> = (0..config.n_runs)
        .into_par_iter()
        .map(|run| execute_run(config, run))
        .collect();

    let mut manifest = Manifest::load_or_new(&dir)?;
    let seeds: Vec<u64> = (0..config.n_runs).map(|r| config.run_seed(r)).collect();
    manifest.record_stage("experiment", config, seeds, &[])?;
    manifest.runs.clear();
    let mut rows = Vec::new();
    for (run, result) in results.into_iter().enumerate() {
        let seed = config.run_seed(run);
        match result {
            Ok(out) => {
                for (rel, content) in &out.files {
                    manifest.write(&dir, rel, content.as_bytes())?;
                }
                rows.extend(out.rows);
                manifest.runs.push(RunStatus {
                    run,
                    seed,
                    ok: true,
                    error: None,
                });
            }
            Err(e) => {
                log::error!("run {run} (seed {seed}) failed: {e}");
                manifest.runs.push(RunStatus {
                    run,
                    seed,
                    ok: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let aggregate_rows = aggregate(&rows);
    manifest.write(&dir, "config.toml", config.to_toml().as_bytes())?;
    manifest.write(&dir, "aggregate.csv", aggregate_csv(&aggregate_rows).as_bytes())?;
    manifest.save(&dir)?;
    if rows.is_empty() {
        let first = manifest
            .runs
            .iter()
            .find_map(|r| r.error.clone())
            .unwrap_or_default();
        return Err(Error::InvalidArgument(format!("every run failed; first error: {first}")));
    }
    Ok(ExperimentOutcome {
        output_dir: dir,
        rows,
        aggregate: aggregate_rows,
        manifest,
    })
}
