//! IPS-debiased ranker training and scoring.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clicksim::{ClickLog, ClickRecord, PropensityTable};
use crate::corpus::{binarize, RankingCorpus};
use crate::error::{Error, Result};
use crate::learner::{self, RegressionConfig, RelevanceModel, TrainingSet};
use crate::outliers::OutlierSignature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Naive,
    Pbm,
    Opbm,
    OpbmLazy,
    Oracle,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Naive,
        EstimatorKind::Pbm,
        EstimatorKind::Opbm,
        EstimatorKind::OpbmLazy,
        EstimatorKind::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::Pbm => "pbm",
            EstimatorKind::Opbm => "opbm",
            EstimatorKind::OpbmLazy => "opbm_lazy",
            EstimatorKind::Oracle => "oracle",
        }
    }

    pub fn needs_table(self) -> bool {
        matches!(
            self,
            EstimatorKind::Pbm | EstimatorKind::Opbm | EstimatorKind::OpbmLazy
        )
    }

    /// Signature keying used when estimating this kind's propensities.
    pub fn keyed(self, signature: &OutlierSignature) -> OutlierSignature {
        match self {
            EstimatorKind::Pbm => OutlierSignature::empty(),
            EstimatorKind::OpbmLazy => signature.to_lazy().key(),
            _ => signature.key(),
        }
    }

    /// The log as this estimator sees it.
    pub fn view(self, log: &ClickLog) -> ClickLog {
        match self {
            EstimatorKind::Pbm => log.position_only(),
            EstimatorKind::OpbmLazy => log.lazy(),
            _ => log.clone(),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "estimator",
                name: s.into(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub table: Option<PropensityTable>,
}

impl EstimatorSpec {
    pub fn naive() -> Self {
        EstimatorSpec {
            kind: EstimatorKind::Naive,
            table: None,
        }
    }

    pub fn oracle() -> Self {
        EstimatorSpec {
            kind: EstimatorKind::Oracle,
            table: None,
        }
    }

    pub fn with_table(kind: EstimatorKind, table: PropensityTable) -> Result<Self> {
        let spec = EstimatorSpec {
            kind,
            table: Some(table),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.needs_table() && self.table.is_none() {
            return Err(Error::InvalidArgument(format!(
                "estimator {} requires a propensity table",
                self.kind
            )));
        }
        Ok(())
    }

    fn theta(&self, rank: usize, signature: &OutlierSignature) -> Result<f64> {
        let table = self.table.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("estimator {} requires a propensity table", self.kind))
        })?;
        table.theta(rank, &self.kind.keyed(signature))
    }
}

/// Corrected click `c / theta` for the record under the estimator's keying.
///
/// The oracle has no click correction; its weight is the raw click.
pub fn ips_weight(record: &ClickRecord, log: &ClickLog, spec: &EstimatorSpec) -> Result<f64> {
    let c = f64::from(u8::from(record.click));
    match spec.kind {
        EstimatorKind::Naive | EstimatorKind::Oracle => Ok(c),
        _ => {
            let theta = spec.theta(usize::from(record.rank), log.signature(record))?;
            if c == 0.0 {
                Ok(0.0)
            } else {
                Ok(c / theta)
            }
        }
    }
}

/// Per (query, document): summed corrected clicks and impression count.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CorrectedCell {
    pub weight_sum: f64,
    pub impressions: u64,
}

impl CorrectedCell {
    /// Mean corrected click per impression: the IPS relevance estimate.
    pub fn estimate(&self) -> f64 {
        if self.impressions == 0 {
            0.0
        } else {
            self.weight_sum / self.impressions as f64
        }
    }
}

/// Aggregates corrected clicks per (query index, doc index), ordered.
///
/// Weights are re-anchored by `theta(1, -)`, so propensity tables that differ
/// by a common factor give identical corrected clicks.
pub fn corrected_clicks(log: &ClickLog, spec: &EstimatorSpec) -> Result<BTreeMap<(u32, u32), CorrectedCell>> {
    spec.validate()?;
    let anchor = match (&spec.table, spec.kind.needs_table()) {
        (Some(t), true) => t.theta(1, &OutlierSignature::empty())?,
        _ => 1.0,
    };
    let mut cells: BTreeMap<(u32, u32), CorrectedCell> = BTreeMap::new();
    for r in log.records.iter().filter(|r| r.impression) {
        let w = ips_weight(r, log, spec)? * anchor;
        let cell = cells.entry((r.query, r.doc)).or_default();
        cell.weight_sum += w;
        cell.impressions += 1;
    }
    Ok(cells)
}

/// Fits the boosted learner on IPS-corrected clicks.
///
/// Records of the same document are pooled: the target is the mean corrected
/// click, capped at `target_cap`, weighted by impressions. Cross-entropy is
/// linear in the target so this equals per-record weighting by `c / theta`.
/// The oracle fits binarized true relevance on the same documents.
pub fn train_unbiased(
    log: &ClickLog,
    corpus: &RankingCorpus,
    spec: &EstimatorSpec,
    config: &RegressionConfig,
    target_cap: f64,
) -> Result<RelevanceModel> {
    if log.is_empty() {
        return Err(Error::InvalidArgument("empty click log".into()));
    }
    if !(target_cap > 0.0) {
        return Err(Error::InvalidArgument("target_cap must be positive".into()));
    }
    let cells = corrected_clicks(log, spec)?;
    let mut set = TrainingSet::with_capacity(cells.len());
    for (&(q, d), cell) in &cells {
        let doc = &corpus.queries[q as usize].documents[d as usize];
        let n = cell.impressions as f64;
        let y = match spec.kind {
            EstimatorKind::Oracle => f64::from(binarize(doc.grade)?),
            _ => cell.estimate().min(target_cap).min(1.0),
        };
        debug_assert!(y.is_finite());
        set.push(doc.features.clone(), n * y, n * (1.0 - y));
    }
    learner::fit(&set, corpus.feature_dim, config)
}

/// Orders purely numeric ids numerically, otherwise lexicographically.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Per query: `(doc index, score)` by descending score, ties by ascending doc_id.
pub fn score_and_rank(model: &RelevanceModel, corpus: &RankingCorpus) -> Result<Vec<Vec<(usize, f64)>>> {
    if corpus.feature_dim != model.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: model.feature_dim,
            got: corpus.feature_dim,
        });
    }
    Ok(corpus
        .queries
        .par_iter()
        .map(|q| {
            let mut scored: Vec<(usize, f64)> = q
                .documents
                .iter()
                .enumerate()
                .map(|(i, d)| (i, model.predict(&d.features)))
                .collect();
            scored.sort_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then_with(|| compare_ids(&q.documents[a.0].doc_id, &q.documents[b.0].doc_id))
            });
            scored
        })
        .collect())
}

/// Rankings CSV `query_id,doc_id,rank,score`.
pub fn rankings_csv(corpus: &RankingCorpus, ranked: &[Vec<(usize, f64)>]) -> String {
    let mut out = String::from("query_id,doc_id,rank,score\n");
    for (q, list) in corpus.queries.iter().zip(ranked) {
        for (r, &(d, s)) in list.iter().enumerate() {
            writeln!(out, "{},{},{},{}", q.query_id, q.documents[d].doc_id, r + 1, s).unwrap();
        }
    }
    out
}

pub fn save_rankings(corpus: &RankingCorpus, ranked: &[Vec<(usize, f64)>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, rankings_csv(corpus, ranked)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicksim::{simulate, ClickModelConfig};
    use crate::corpus::{synthesize_corpus, Document, QueryGroup};

    fn record(rank: u16, click: bool) -> ClickRecord {
        ClickRecord {
            session: 0,
            query: 0,
            doc: 0,
            rank,
            signature: 0,
            impression: true,
            click,
        }
    }

    fn log_with(sig: OutlierSignature, records: Vec<ClickRecord>) -> ClickLog {
        ClickLog {
            records,
            signatures: vec![sig],
            sessions: 1,
            depth: 10,
        }
    }

    #[test]
    fn weight_examples() {
        let log = log_with(OutlierSignature::empty(), vec![]);
        assert_eq!(ips_weight(&record(1, true), &log, &EstimatorSpec::naive()).unwrap(), 1.0);
        let pbm = EstimatorSpec::with_table(EstimatorKind::Pbm, PropensityTable::pbm(10, 1.0)).unwrap();
        assert!((ips_weight(&record(3, true), &log, &pbm).unwrap() - 3.0).abs() < 1e-12);
        let opbm = EstimatorSpec::with_table(EstimatorKind::Opbm, PropensityTable::pbm(10, 1.0)).unwrap();
        assert_eq!(ips_weight(&record(3, false), &log, &opbm).unwrap(), 0.0);
    }

    #[test]
    fn uncovered_cell_is_an_error() {
        let log = log_with(OutlierSignature::single(4).unwrap(), vec![]);
        let opbm = EstimatorSpec::with_table(EstimatorKind::Opbm, PropensityTable::pbm(10, 1.0)).unwrap();
        assert!(matches!(
            ips_weight(&record(3, true), &log, &opbm),
            Err(Error::UncoveredSignature { .. })
        ));
        // The position-only estimator never looks at the signature.
        let pbm = EstimatorSpec::with_table(EstimatorKind::Pbm, PropensityTable::pbm(10, 1.0)).unwrap();
        assert!(ips_weight(&record(3, true), &log, &pbm).is_ok());
        assert!(EstimatorSpec {
            kind: EstimatorKind::Opbm,
            table: None
        }
        .validate()
        .is_err());
    }

    #[test]
    fn lazy_keying_uses_first_outlier() {
        let two = OutlierSignature::new(vec![4, 9]).unwrap();
        let log = log_with(two, vec![]);
        let mut table = PropensityTable::pbm(10, 1.0);
        table.insert(5, &OutlierSignature::single(4).unwrap(), 0.5).unwrap();
        let lazy = EstimatorSpec::with_table(EstimatorKind::OpbmLazy, table).unwrap();
        assert!((ips_weight(&record(5, true), &log, &lazy).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_signatures_make_estimators_agree() {
        let corpus = synthesize_corpus(30, 6, 3, 2).unwrap();
        let ranker = RelevanceModel::constant(0.5, 3);
        let sigs = vec![OutlierSignature::empty(); 30];
        let cfg = ClickModelConfig {
            depth: 6,
            ..Default::default()
        };
        let log = simulate(&corpus, &ranker, &sigs, &cfg, 500).unwrap();
        let t = PropensityTable::pbm(6, 1.0);
        let specs: Vec<_> = [EstimatorKind::Pbm, EstimatorKind::Opbm, EstimatorKind::OpbmLazy]
            .into_iter()
            .map(|k| EstimatorSpec::with_table(k, t.clone()).unwrap())
            .collect();
        for r in &log.records {
            let w: Vec<f64> = specs.iter().map(|s| ips_weight(r, &log, s).unwrap()).collect();
            assert_eq!(w[0], w[1]);
            assert_eq!(w[1], w[2]);
        }
    }

    #[test]
    fn empty_log_is_rejected() {
        let corpus = synthesize_corpus(2, 4, 2, 0).unwrap();
        let log = log_with(OutlierSignature::empty(), vec![]);
        assert!(train_unbiased(&log, &corpus, &EstimatorSpec::naive(), &RegressionConfig::default(), 1.0).is_err());
    }

    #[test]
    fn uniform_table_scaling_keeps_rankings() {
        let corpus = synthesize_corpus(60, 8, 4, 4).unwrap();
        let ranker = RelevanceModel::constant(0.5, 4);
        let sigs = vec![OutlierSignature::empty(); 60];
        let cfg = ClickModelConfig {
            depth: 8,
            seed: 1,
            ..Default::default()
        };
        let log = simulate(&corpus, &ranker, &sigs, &cfg, 3000).unwrap();
        // Anchor at 0.5 so both factors keep every cell inside [0, 1].
        let base = PropensityTable::pbm(8, 1.0).scaled(0.5);
        let train = |table: PropensityTable| {
            let spec = EstimatorSpec::with_table(EstimatorKind::Pbm, table).unwrap();
            let m = train_unbiased(&log, &corpus, &spec, &RegressionConfig::default(), 1.0).unwrap();
            score_and_rank(&m, &corpus)
                .unwrap()
                .into_iter()
                .map(|l| l.into_iter().map(|(d, _)| d).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        let reference = train(base.clone());
        assert_eq!(train(base.scaled(0.5)), reference);
        assert_eq!(train(base.scaled(2.0)), reference);

        let r = &log.records[0];
        let w = |t: PropensityTable| {
            ips_weight(r, &log, &EstimatorSpec::with_table(EstimatorKind::Pbm, t).unwrap()).unwrap()
        };
        assert_eq!(w(base.scaled(2.0)) * 2.0, w(base.clone()));
    }

    #[test]
    fn ranking_ties_and_order() {
        let docs = |order: &[usize]| {
            order
                .iter()
                .map(|&i| Document {
                    doc_id: i.to_string(),
                    features: vec![if i == 10 { 1.0 } else { 0.0 }],
                    grade: 0,
                })
                .collect::<Vec<_>>()
        };
        let c = RankingCorpus::new(
            vec![QueryGroup {
                query_id: "q".into(),
                documents: docs(&[10, 2, 1, 3]),
            }],
            1,
            5,
        )
        .unwrap();
        let constant = RelevanceModel::constant(0.3, 1);
        let ids = |ranked: Vec<Vec<(usize, f64)>>, c: &RankingCorpus| -> Vec<String> {
            ranked[0]
                .iter()
                .map(|&(d, _)| c.queries[0].documents[d].doc_id.clone())
                .collect()
        };
        assert_eq!(ids(score_and_rank(&constant, &c).unwrap(), &c), ["1", "2", "3", "10"]);

        let mut set = TrainingSet::default();
        set.push(vec![1.0], 9.0, 1.0);
        set.push(vec![0.0], 1.0, 9.0);
        let m = learner::fit(&set, 1, &RegressionConfig::default()).unwrap();
        let ranked = score_and_rank(&m, &c).unwrap();
        assert_eq!(ids(ranked.clone(), &c)[0], "10");
        assert!(ranked[0][0].1 > ranked[0][1].1);

        // Permuting input order leaves output order unchanged.
        let p = RankingCorpus::new(
            vec![QueryGroup {
                query_id: "q".into(),
                documents: docs(&[3, 1, 10, 2]),
            }],
            1,
            5,
        )
        .unwrap();
        assert_eq!(ids(score_and_rank(&m, &p).unwrap(), &p), ids(ranked, &c));

        let wrong = RelevanceModel::constant(0.3, 2);
        assert!(score_and_rank(&wrong, &c).is_err());
    }
}
