//! File-based pipeline stages. Each stage reads its inputs, writes its
//! outputs into a results directory and records them, with the stage's
//! parameter hash and seeds, in that directory's manifest.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clicksim::{
    load_propensity_table, place_outliers, simulate, train_production_ranker, ClickLog,
    ClickModelConfig, ExaminationModel, OutlierPlacement,
};
use crate::corpus::{
    load_corpus, split, synthesize_corpus_with_signal, write_svmlight, CorpusFormat, RankingCorpus,
    SYNTH_SIGNAL,
};
use crate::error::{Error, Result};
use crate::eval::{corrected_click_ce, mean_ndcg, GainMode, MetricReport, DEFAULT_CE_CLAMP, METRIC_SCHEMA_VERSION};
use crate::experiment::SplitSection;
use crate::learner::{RegressionConfig, RelevanceModel};
use crate::loglab::{ctr_by_outlier_group, outlier_vs_nonoutlier_summary, DEFAULT_MIN_SUPPORT};
use crate::manifest::Manifest;
use crate::outliers::{detect, detect_lists, signature, ObservableSource, OutlierSignature, SidecarFeatures, DEFAULT_THRESHOLD, MIN_LIST_LEN};
use crate::propensity_em::{run_em, EmConfig};
use crate::ranker::{rankings_csv, score_and_rank, train_unbiased, EstimatorKind, EstimatorSpec};

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn finish(manifest: &Manifest, out: &Path) -> Result<()> {
    manifest.save(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_queries: usize,
    pub docs_per_query: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub signal: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_queries: 2000,
            docs_per_query: 10,
            feature_dim: 8,
            seed: 0,
            signal: SYNTH_SIGNAL,
        }
    }
}

/// Writes `corpus.svm`.
pub fn synth(params: &SynthParams, out: &Path) -> Result<PathBuf> {
    let corpus = synthesize_corpus_with_signal(
        params.n_queries,
        params.docs_per_query,
        params.feature_dim,
        params.seed,
        params.signal,
    )?;
    let mut manifest = Manifest::load_or_new(out)?;
    manifest.record_stage("synth", params, vec![params.seed], &[])?;
    let path = manifest.write(out, "corpus.svm", write_svmlight(&corpus).as_bytes())?;
    finish(&manifest, out)?;
    Ok(path)
}

/// Where observable features come from; exactly one of the two is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservableSpec {
    pub columns: Vec<usize>,
    pub sidecar: Option<PathBuf>,
}

impl ObservableSpec {
    pub fn source(&self) -> Result<ObservableSource> {
        match (&self.sidecar, self.columns.is_empty()) {
            (Some(path), true) => Ok(ObservableSource::Sidecar(SidecarFeatures::load(path)?)),
            (None, false) => Ok(ObservableSource::Columns(self.columns.clone())),
            _ => Err(Error::InvalidArgument(
                "give either observable columns or a sidecar file, not both or neither".into(),
            )),
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        self.sidecar.iter().map(PathBuf::as_path).collect()
    }
}

/// Per-query document indices from a rankings CSV `query_id,doc_id,rank,...`.
/// Queries absent from the file keep corpus order.
pub fn parse_rankings(text: &str, corpus: &RankingCorpus) -> Result<Vec<Vec<usize>>> {
    let qindex: HashMap<&str, usize> = corpus
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.query_id.as_str(), i))
        .collect();
    let mut ranked: Vec<Vec<(usize, usize)>> = vec![Vec::new(); corpus.n_queries()];
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.starts_with("query_id,doc_id,rank") => {}
        _ => return Err(Error::parse(1, "expected header query_id,doc_id,rank,...")),
    }
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() < 3 {
            return Err(Error::parse(i + 1, "expected at least 3 fields"));
        }
        let q = *qindex
            .get(f[0])
            .ok_or_else(|| Error::parse(i + 1, format!("unknown query_id {}", f[0])))?;
        let d = corpus.queries[q]
            .documents
            .iter()
            .position(|d| d.doc_id == f[1])
            .ok_or_else(|| Error::parse(i + 1, format!("unknown doc_id {}", f[1])))?;
        let rank: usize = f[2].parse().map_err(|_| Error::parse(i + 1, "bad rank"))?;
        ranked[q].push((rank, d));
    }
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(q, mut r)| {
            if r.is_empty() {
                (0..corpus.queries[q].documents.len()).collect()
            } else {
                r.sort_unstable();
                r.into_iter().map(|(_, d)| d).collect()
            }
        })
        .collect())
}

fn signatures_csv(corpus: &RankingCorpus, sigs: &[OutlierSignature]) -> String {
    let mut out = String::from("query_id,signature\n");
    for (q, s) in corpus.queries.iter().zip(sigs) {
        writeln!(out, "{},{}", q.query_id, s).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub corpus: PathBuf,
    pub format: CorpusFormat,
    /// Presented order; corpus order when absent.
    pub rankings: Option<PathBuf>,
    pub observable: ObservableSpec,
    pub depth: usize,
    pub threshold: f64,
    pub lazy: bool,
}

impl DetectParams {
    pub fn new(corpus: PathBuf, observable: ObservableSpec) -> Self {
        DetectParams {
            corpus,
            format: CorpusFormat::LetorSvmlight,
            rankings: None,
            observable,
            depth: crate::clicksim::DEFAULT_DEPTH,
            threshold: DEFAULT_THRESHOLD,
            lazy: false,
        }
    }
}

/// Writes `detected_signatures.csv` (`query_id,signature`) and
/// `detected_degrees.csv`
/// (`query_id,doc_id,rank,max_degree,is_outlier`).
pub fn detect_stage(params: &DetectParams, out: &Path) -> Result<Vec<OutlierSignature>> {
    let corpus = load_corpus(&params.corpus, params.format)?;
    let lists = match &params.rankings {
        Some(path) => parse_rankings(&read(path)?, &corpus)?,
        None => corpus
            .queries
            .iter()
            .map(|q| (0..q.documents.len()).collect())
            .collect(),
    };
    let lists: Vec<Vec<usize>> = lists
        .into_iter()
        .map(|l| l.into_iter().take(params.depth).collect())
        .collect();
    let source = params.observable.source()?;
    let sigs = detect_lists(&corpus, &lists, &source, params.threshold, params.lazy)?;

    let mut degrees = String::from("query_id,doc_id,rank,max_degree,is_outlier\n");
    for (q, docs) in lists.iter().enumerate() {
        if docs.len() < MIN_LIST_LEN {
            continue;
        }
        let verdict = detect(&source.features(&corpus, q, docs)?, params.threshold)?;
        debug_assert_eq!(signature(&verdict, false).positions(), verdict.outlier_positions.as_slice());
        let query = &corpus.queries[q];
        for (r, (&d, deg)) in docs.iter().zip(verdict.max_degree()).enumerate() {
            writeln!(
                degrees,
                "{},{},{},{},{}",
                query.query_id,
                query.documents[d].doc_id,
                r + 1,
                deg,
                u8::from(verdict.is_outlier[r])
            )
            .unwrap();
        }
    }

    let mut manifest = Manifest::load_or_new(out)?;
    let mut inputs = vec![params.corpus.as_path()];
    inputs.extend(params.rankings.as_deref());
    inputs.extend(params.observable.inputs());
    manifest.record_stage("detect", params, Vec::new(), &inputs)?;
    manifest.write(out, "detected_signatures.csv", signatures_csv(&corpus, &sigs).as_bytes())?;
    manifest.write(out, "detected_degrees.csv", degrees.as_bytes())?;
    finish(&manifest, out)?;
    Ok(sigs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateParams {
    pub corpus: PathBuf,
    pub format: CorpusFormat,
    pub seed: u64,
    pub n_clicks: u64,
    pub split: SplitSection,
    pub production: RegressionConfig,
    /// Synthetic placement, used unless `observable` is set.
    pub outliers: OutlierPlacement,
    /// Detect outliers in the presented lists instead of placing them.
    pub observable: Option<ObservableSpec>,
    pub threshold: f64,
    pub lazy: bool,
    pub click_model: ClickModelConfig,
}

impl SimulateParams {
    pub fn new(corpus: PathBuf, click_model: ClickModelConfig, n_clicks: u64, seed: u64) -> Self {
        SimulateParams {
            corpus,
            format: CorpusFormat::LetorSvmlight,
            seed,
            n_clicks,
            split: SplitSection::default(),
            production: RegressionConfig::default(),
            outliers: OutlierPlacement::default(),
            observable: None,
            threshold: DEFAULT_THRESHOLD,
            lazy: false,
            click_model,
        }
    }
}

/// Splits the corpus, trains the production ranker, assigns signatures and
/// simulates clicks. Writes `train.svm`, `test.svm`, `production.model`,
/// `signatures.csv`, `clicks.csv`, `true_theta.csv` and `simulation.json`.
pub fn simulate_stage(params: &SimulateParams, out: &Path) -> Result<ClickLog> {
    let corpus = load_corpus(&params.corpus, params.format)?;
    let parts = split(&corpus, &params.split.spec(params.seed))?;
    let production = train_production_ranker(&parts.production, &params.production)?;
    let depth = params.click_model.depth;
    let train = &parts.train;
    let sigs = match &params.observable {
        Some(spec) => {
            let lists: Vec<Vec<usize>> = score_and_rank(&production, train)?
                .into_iter()
                .map(|r| r.into_iter().take(depth).map(|(d, _)| d).collect())
                .collect();
            detect_lists(train, &lists, &spec.source()?, params.threshold, params.lazy)?
        }
        None => {
            let lens: Vec<usize> = train.queries.iter().map(|q| q.documents.len().min(depth)).collect();
            place_outliers(&lens, &params.outliers, params.seed)?
        }
    };
    let click_model = ClickModelConfig {
        seed: params.seed,
        ..params.click_model.clone()
    };
    let log = simulate(train, &production, &sigs, &click_model, params.n_clicks)?;
    let distinct: Vec<OutlierSignature> = sigs
        .iter()
        .filter(|s| !s.is_empty())
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let truth = ExaminationModel::from_config(&click_model)?.table_for(&distinct)?;
    let summary = serde_json::json!({
        "sessions": log.sessions,
        "clicks": log.n_clicks(),
        "records": log.records.len(),
        "train_queries": train.n_queries(),
        "test_queries": parts.test.n_queries(),
        "production_queries": parts.production.n_queries(),
        "abnormal_rankings": sigs.iter().filter(|s| !s.is_empty()).count(),
    });

    let mut manifest = Manifest::load_or_new(out)?;
    let mut inputs = vec![params.corpus.as_path()];
    if let Some(spec) = &params.observable {
        inputs.extend(spec.inputs());
    }
    inputs.extend(params.click_model.table_path.as_deref());
    manifest.record_stage("simulate", params, vec![params.seed], &inputs)?;
    manifest.write(out, "train.svm", write_svmlight(train).as_bytes())?;
    manifest.write(out, "test.svm", write_svmlight(&parts.test).as_bytes())?;
    manifest.write(out, "production.model", production.to_text().as_bytes())?;
    manifest.write(out, "signatures.csv", signatures_csv(train, &sigs).as_bytes())?;
    manifest.write(out, "clicks.csv", log.to_csv(train).as_bytes())?;
    manifest.write(out, "true_theta.csv", truth.to_csv().as_bytes())?;
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    manifest.write(out, "simulation.json", text.as_bytes())?;
    finish(&manifest, out)?;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateParams {
    /// The corpus the click log refers to (the simulate stage's `train.svm`).
    pub corpus: PathBuf,
    pub log: PathBuf,
    pub estimator: EstimatorKind,
    pub em: EmConfig,
}

/// Runs EM on the estimator's view of the log; writes
/// `theta_<estimator>.csv` and `trace_<estimator>.csv`.
pub fn estimate_stage(params: &EstimateParams, out: &Path) -> Result<PathBuf> {
    if !params.estimator.needs_table() {
        return Err(Error::InvalidArgument(format!(
            "estimator {} has no propensities to estimate",
            params.estimator
        )));
    }
    let corpus = load_corpus(&params.corpus, CorpusFormat::LetorSvmlight)?;
    let log = ClickLog::load(&params.log, &corpus)?;
    let state = run_em(&params.estimator.view(&log), &corpus, &params.em)?;
    state.theta.validate()?;

    let mut manifest = Manifest::load_or_new(out)?;
    manifest.record_stage(
        &format!("estimate_{}", params.estimator),
        params,
        vec![params.em.seed],
        &[&params.corpus, &params.log],
    )?;
    let path = manifest.write(
        out,
        &format!("theta_{}.csv", params.estimator),
        state.theta.to_csv().as_bytes(),
    )?;
    manifest.write(
        out,
        &format!("trace_{}.csv", params.estimator),
        state.trace_csv().as_bytes(),
    )?;
    finish(&manifest, out)?;
    Ok(path)
}

fn estimator_spec(kind: EstimatorKind, table: Option<&Path>) -> Result<EstimatorSpec> {
    match kind {
        EstimatorKind::Naive => Ok(EstimatorSpec::naive()),
        EstimatorKind::Oracle => Ok(EstimatorSpec::oracle()),
        _ => {
            let path = table.ok_or_else(|| {
                Error::InvalidArgument(format!("estimator {kind} needs a propensity table"))
            })?;
            EstimatorSpec::with_table(kind, load_propensity_table(path)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub corpus: PathBuf,
    pub log: PathBuf,
    pub estimator: EstimatorKind,
    pub table: Option<PathBuf>,
    pub target_cap: f64,
    pub regression: RegressionConfig,
}

/// Trains the IPS ranker; writes `model_<estimator>.txt`.
pub fn train_stage(params: &TrainParams, out: &Path) -> Result<PathBuf> {
    let corpus = load_corpus(&params.corpus, CorpusFormat::LetorSvmlight)?;
    let log = ClickLog::load(&params.log, &corpus)?;
    let spec = estimator_spec(params.estimator, params.table.as_deref())?;
    let model = train_unbiased(&log, &corpus, &spec, &params.regression, params.target_cap)?;

    let mut manifest = Manifest::load_or_new(out)?;
    let mut inputs = vec![params.corpus.as_path(), params.log.as_path()];
    inputs.extend(params.table.as_deref());
    manifest.record_stage(&format!("train_{}", params.estimator), params, Vec::new(), &inputs)?;
    let path = manifest.write(
        out,
        &format!("model_{}.txt", params.estimator),
        model.to_text().as_bytes(),
    )?;
    finish(&manifest, out)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateParams {
    /// Held-out corpus ranked by the model.
    pub test_corpus: PathBuf,
    pub model: PathBuf,
    /// Corpus and log on which corrected-click CE is measured.
    pub train_corpus: PathBuf,
    pub log: PathBuf,
    pub estimator: EstimatorKind,
    pub table: Option<PathBuf>,
    pub k: usize,
    pub gain: GainMode,
    pub ce_clamp: f64,
    /// Recorded in the report.
    pub seed: u64,
}

impl EvaluateParams {
    pub fn new(test_corpus: PathBuf, model: PathBuf, train_corpus: PathBuf, log: PathBuf, estimator: EstimatorKind) -> Self {
        EvaluateParams {
            test_corpus,
            model,
            train_corpus,
            log,
            estimator,
            table: None,
            k: 10,
            gain: GainMode::Graded,
            ce_clamp: DEFAULT_CE_CLAMP,
            seed: 0,
        }
    }
}

/// Writes `report_<estimator>.json`, `report_<estimator>.csv` and
/// `rankings_<estimator>.csv`.
pub fn evaluate_stage(params: &EvaluateParams, out: &Path) -> Result<MetricReport> {
    let test = load_corpus(&params.test_corpus, CorpusFormat::LetorSvmlight)?;
    let train = load_corpus(&params.train_corpus, CorpusFormat::LetorSvmlight)?;
    let model = RelevanceModel::load(&params.model)?;
    let log = ClickLog::load(&params.log, &train)?;
    let ranked = score_and_rank(&model, &test)?;
    let mean_ce = match params.estimator {
        // The oracle's corrected clicks are the labels; report the clamp floor.
        EstimatorKind::Oracle => -(1.0 - params.ce_clamp).ln(),
        kind => corrected_click_ce(&log, &train, &estimator_spec(kind, params.table.as_deref())?, params.ce_clamp)?,
    };
    let report = MetricReport {
        schema_version: METRIC_SCHEMA_VERSION,
        estimator: params.estimator.name().to_string(),
        k: params.k,
        ndcg_at_k: mean_ndcg(&test, &ranked, params.k, params.gain)?,
        mean_ce,
        n_queries: test.n_queries(),
        n_records: log.records.len(),
        seed: params.seed,
    };
    report.validate()?;

    let mut manifest = Manifest::load_or_new(out)?;
    let mut inputs = vec![
        params.test_corpus.as_path(),
        params.model.as_path(),
        params.train_corpus.as_path(),
        params.log.as_path(),
    ];
    inputs.extend(params.table.as_deref());
    manifest.record_stage(&format!("evaluate_{}", params.estimator), params, vec![params.seed], &inputs)?;
    let name = params.estimator.name();
    let mut json = report.to_json();
    json.push('\n');
    manifest.write(out, &format!("report_{name}.json"), json.as_bytes())?;
    manifest.write(
        out,
        &format!("report_{name}.csv"),
        format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()).as_bytes(),
    )?;
    manifest.write(out, &format!("rankings_{name}.csv"), rankings_csv(&test, &ranked).as_bytes())?;
    finish(&manifest, out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeParams {
    pub corpus: PathBuf,
    pub log: PathBuf,
    pub min_support: f64,
}

impl AnalyzeParams {
    pub fn new(corpus: PathBuf, log: PathBuf) -> Self {
        AnalyzeParams {
            corpus,
            log,
            min_support: DEFAULT_MIN_SUPPORT,
        }
    }
}

/// Writes `ctr.csv` and, when the log has abnormal rankings,
/// `outlier_summary.json`.
pub fn analyze_stage(params: &AnalyzeParams, out: &Path) -> Result<()> {
    let corpus = load_corpus(&params.corpus, CorpusFormat::LetorSvmlight)?;
    let log = ClickLog::load(&params.log, &corpus)?;
    let breakdown = ctr_by_outlier_group(&log, params.min_support)?;
    let summary = match outlier_vs_nonoutlier_summary(&log) {
        Ok(s) => Some(s),
        Err(Error::NoAbnormalRankings) => {
            log::warn!("log has no abnormal rankings; skipping the outlier summary");
            None
        }
        Err(e) => return Err(e),
    };

    let mut manifest = Manifest::load_or_new(out)?;
    manifest.record_stage("analyze", params, Vec::new(), &[&params.corpus, &params.log])?;
    manifest.write(out, "ctr.csv", breakdown.to_csv().as_bytes())?;
    if let Some(s) = summary {
        let mut json = s.to_json();
        json.push('\n');
        manifest.write(out, "outlier_summary.json", json.as_bytes())?;
    }
    finish(&manifest, out)
}
