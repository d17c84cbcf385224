//! Learning-to-rank corpora: svmlight/LETOR ingestion, a seeded synthetic
//! generator, query-level splits and relevance binarization.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of relevance grades in the public LETOR sets and in synthetic corpora.
pub const GRADE_LEVELS: u8 = 5;

/// Marginal grade distribution of synthetic corpora, grades 0 through 4. Half
/// of all documents are relevant after binarization, so every rank of a
/// production ranking still carries relevant impressions.
pub const SYNTH_GRADE_WEIGHTS: [f64; 5] = [0.15, 0.15, 0.20, 0.25, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub features: Vec<f64>,
    pub grade: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub query_id: String,
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingCorpus {
    pub queries: Vec<QueryGroup>,
    pub feature_dim: usize,
    pub grade_levels: u8,
}

impl RankingCorpus {
    /// Builds a corpus and checks every structural invariant.
    pub fn new(queries: Vec<QueryGroup>, feature_dim: usize, grade_levels: u8) -> Result<Self> {
        let corpus = RankingCorpus {
            queries,
            feature_dim,
            grade_levels,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        let mut qids = HashSet::new();
        for q in &self.queries {
            if !qids.insert(q.query_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate query_id {}",
                    q.query_id
                )));
            }
            if q.documents.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "query {} has no documents",
                    q.query_id
                )));
            }
            let mut dids = HashSet::new();
            for d in &q.documents {
                if !dids.insert(d.doc_id.as_str()) {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate doc_id {} in query {}",
                        d.doc_id, q.query_id
                    )));
                }
                if d.features.len() != self.feature_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.feature_dim,
                        got: d.features.len(),
                    });
                }
                if d.grade >= self.grade_levels {
                    return Err(Error::InvalidArgument(format!(
                        "grade {} outside [0, {}]",
                        d.grade,
                        self.grade_levels - 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn n_documents(&self) -> usize {
        self.queries.iter().map(|q| q.documents.len()).sum()
    }

    pub fn query_index(&self, query_id: &str) -> Option<usize> {
        self.queries.iter().position(|q| q.query_id == query_id)
    }

    /// Sub-corpus made of the queries at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> RankingCorpus {
        RankingCorpus {
            queries: indices.iter().map(|&i| self.queries[i].clone()).collect(),
            feature_dim: self.feature_dim,
            grade_levels: self.grade_levels,
        }
    }
}

/// Binary relevance used by the click simulator: grades 3 and 4 are relevant.
pub fn binarize(grade: u8) -> Result<u8> {
    if grade >= GRADE_LEVELS {
        return Err(Error::InvalidArgument(format!(
            "grade {grade} outside [0, {}]",
            GRADE_LEVELS - 1
        )));
    }
    Ok(u8::from(grade > 2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    LetorSvmlight,
    SyntheticManifest,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "letor_svmlight" | "svmlight" | "letor" => Ok(CorpusFormat::LetorSvmlight),
            "synthetic_manifest" | "synthetic" | "manifest" => Ok(CorpusFormat::SyntheticManifest),
            other => Err(Error::Unknown {
                kind: "corpus format",
                name: other.to_string(),
            }),
        }
    }
}

/// Parameters of a synthetic corpus, as stored in a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticManifest {
    pub n_queries: usize,
    pub docs_per_query: usize,
    pub feature_dim: usize,
    pub seed: u64,
    #[serde(default = "default_signal")]
    pub signal: f64,
}

fn default_signal() -> f64 {
    SYNTH_SIGNAL
}

impl SyntheticManifest {
    /// Accepts either top-level keys or a `[corpus]` table.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let table = match value.get("corpus") {
            Some(toml::Value::Table(t)) => t.clone(),
            _ => {
                let mut t = value;
                t.remove("version");
                t
            }
        };
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn synthesize(&self) -> Result<RankingCorpus> {
        synthesize_corpus_with_signal(
            self.n_queries,
            self.docs_per_query,
            self.feature_dim,
            self.seed,
            self.signal,
        )
    }
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<RankingCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        CorpusFormat::LetorSvmlight => parse_svmlight(&text, None),
        CorpusFormat::SyntheticManifest => SyntheticManifest::from_toml(&text)?.synthesize(),
    }
}

/// Parses svmlight-with-qid text (`<grade> qid:<id> <idx>:<val> ... # comment`).
///
/// Indices are 1-based; missing indices are 0.0. When `feature_dim` is `None`
/// it is inferred as the largest index present. A trailing `docid = X`
/// comment names the document, otherwise its ordinal within the query is used.
pub fn parse_svmlight(text: &str, feature_dim: Option<usize>) -> Result<RankingCorpus> {
    struct Row {
        line: usize,
        grade: u8,
        qid: String,
        doc_id: Option<String>,
        sparse: Vec<(usize, f64)>,
    }

    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let (body, comment) = match raw.find('#') {
            Some(pos) => (&raw[..pos], Some(&raw[pos + 1..])),
            None => (raw, None),
        };
        let mut tokens = body.split_whitespace();
        let Some(grade_tok) = tokens.next() else {
            continue;
        };
        let grade_f: f64 = grade_tok
            .parse()
            .map_err(|_| Error::parse(line, format!("bad grade {grade_tok:?}")))?;
        if grade_f.fract() != 0.0 || !(0.0..f64::from(GRADE_LEVELS)).contains(&grade_f) {
            return Err(Error::parse(
                line,
                format!("grade {grade_tok} is not an integer in [0, {}]", GRADE_LEVELS - 1),
            ));
        }
        let qid_tok = tokens
            .next()
            .ok_or_else(|| Error::parse(line, "missing qid"))?;
        let qid = qid_tok
            .strip_prefix("qid:")
            .filter(|q| !q.is_empty())
            .ok_or_else(|| Error::parse(line, format!("expected qid:<id>, got {qid_tok:?}")))?;

        let mut sparse = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| Error::parse(line, format!("expected idx:val, got {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::parse(line, format!("bad feature index {idx:?}")))?;
            if idx == 0 {
                return Err(Error::parse(line, "feature indices are 1-based"));
            }
            if idx <= last {
                return Err(Error::parse(line, "feature indices must be strictly increasing"));
            }
            last = idx;
            let val: f64 = val
                .parse()
                .map_err(|_| Error::parse(line, format!("bad feature value {val:?}")))?;
            if !val.is_finite() {
                return Err(Error::parse(line, "non-finite feature value"));
            }
            sparse.push((idx, val));
        }

        let doc_id = comment.and_then(|c| {
            let c = c.trim();
            let rest = c.strip_prefix("docid")?.trim_start();
            let rest = rest.strip_prefix('=').unwrap_or(rest).trim();
            let id = rest.split_whitespace().next()?;
            Some(id.to_string())
        });

        rows.push(Row {
            line,
            grade: grade_f as u8,
            qid: qid.to_string(),
            doc_id,
            sparse,
        });
    }

    if rows.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let max_index = rows
        .iter()
        .filter_map(|r| r.sparse.last().map(|&(i, _)| i))
        .max()
        .unwrap_or(0);
    let dim = match feature_dim {
        Some(d) => {
            if let Some(r) = rows
                .iter()
                .find(|r| r.sparse.last().is_some_and(|&(i, _)| i > d))
            {
                return Err(Error::InconsistentFeatureDim {
                    line: r.line,
                    index: r.sparse.last().unwrap().0,
                    feature_dim: d,
                });
            }
            d
        }
        None => max_index,
    };
    if dim == 0 {
        return Err(Error::parse(rows[0].line, "no features in corpus"));
    }

    let mut queries: Vec<QueryGroup> = Vec::new();
    let mut index_of: std::collections::HashMap<String, usize> = Default::default();
    for row in rows {
        let qi = *index_of.entry(row.qid.clone()).or_insert_with(|| {
            queries.push(QueryGroup {
                query_id: row.qid.clone(),
                documents: Vec::new(),
            });
            queries.len() - 1
        });
        let group = &mut queries[qi];
        let mut features = vec![0.0; dim];
        for (idx, val) in row.sparse {
            features[idx - 1] = val;
        }
        let doc_id = row
            .doc_id
            .unwrap_or_else(|| group.documents.len().to_string());
        if group.documents.iter().any(|d| d.doc_id == doc_id) {
            return Err(Error::parse(
                row.line,
                format!("duplicate doc_id {doc_id} in query {}", group.query_id),
            ));
        }
        group.documents.push(Document {
            doc_id,
            features,
            grade: row.grade,
        });
    }

    RankingCorpus::new(queries, dim, GRADE_LEVELS)
}

/// Serializes a corpus as svmlight-with-qid, sparse, with `docid` comments.
pub fn write_svmlight(corpus: &RankingCorpus) -> String {
    let mut out = String::new();
    for q in &corpus.queries {
        for d in &q.documents {
            write!(out, "{} qid:{}", d.grade, q.query_id).unwrap();
            for (i, v) in d.features.iter().enumerate() {
                if *v != 0.0 {
                    write!(out, " {}:{}", i + 1, v).unwrap();
                }
            }
            writeln!(out, " # docid = {}", d.doc_id).unwrap();
        }
    }
    out
}

pub fn write_corpus(corpus: &RankingCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_svmlight(corpus)).map_err(|e| Error::io(path, e))
}

/// Default separation between grade-conditioned feature means, in noise units.
pub const SYNTH_SIGNAL: f64 = 0.3;

/// Seeded synthetic corpus: grade-conditioned Gaussian features.
///
/// Grades follow [`SYNTH_GRADE_WEIGHTS`]. Feature `f` of a document with grade
/// `g` is `signal * w_f * (g - 2) + N(0, 1)` where the loadings `w_f` are drawn
/// once per corpus from the seed.
pub fn synthesize_corpus(
    n_queries: usize,
    docs_per_query: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<RankingCorpus> {
    synthesize_corpus_with_signal(n_queries, docs_per_query, feature_dim, seed, SYNTH_SIGNAL)
}

pub fn synthesize_corpus_with_signal(
    n_queries: usize,
    docs_per_query: usize,
    feature_dim: usize,
    seed: u64,
    signal: f64,
) -> Result<RankingCorpus> {
    if n_queries == 0 || docs_per_query == 0 || feature_dim == 0 {
        return Err(Error::InvalidArgument(
            "n_queries, docs_per_query and feature_dim must be positive".into(),
        ));
    }
    if !signal.is_finite() || signal < 0.0 {
        return Err(Error::InvalidArgument("signal must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loadings: Vec<f64> = (0..feature_dim)
        .map(|f| {
            let w = rng.random_range(0.5..1.5);
            // Alternate signs so no single feature direction dominates.
            if f % 2 == 0 {
                w
            } else {
                -w
            }
        })
        .collect();
    let grades = WeightedIndex::new(SYNTH_GRADE_WEIGHTS).expect("static weights are valid");

    let queries = (0..n_queries)
        .map(|qi| QueryGroup {
            query_id: (qi + 1).to_string(),
            documents: (0..docs_per_query)
                .map(|di| {
                    let grade = grades.sample(&mut rng) as u8;
                    let centre = f64::from(grade) - 2.0;
                    let features = loadings
                        .iter()
                        .map(|w| {
                            let noise: f64 = StandardNormal.sample(&mut rng);
                            signal * w * centre + noise
                        })
                        .collect();
                    Document {
                        doc_id: di.to_string(),
                        features,
                        grade,
                    }
                })
                .collect(),
        })
        .collect();

    RankingCorpus::new(queries, feature_dim, GRADE_LEVELS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    #[serde(default = "default_production_fraction")]
    pub production_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

fn default_production_fraction() -> f64 {
    0.01
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            production_fraction: default_production_fraction(),
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train_fraction", self.train_fraction),
            ("production_fraction", self.production_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.train_fraction + self.test_fraction > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(
                "train_fraction + test_fraction exceeds 1".into(),
            ));
        }
        Ok(())
    }
}

/// Query-level partition. `production` is a flagged subset of `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: RankingCorpus,
    pub production: RankingCorpus,
    pub test: RankingCorpus,
}

/// Splits by query. Production queries are drawn from the training side and
/// stay inside `train`. Query order within each split follows the source.
pub fn split(corpus: &RankingCorpus, spec: &SplitSpec) -> Result<CorpusSplit> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = corpus.n_queries();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let n_test = ((spec.test_fraction * n as f64).round() as usize).min(n);
    let n_train = ((spec.train_fraction * n as f64).round() as usize).min(n - n_test);
    let mut n_prod = (spec.production_fraction * n as f64).round() as usize;
    if spec.production_fraction > 0.0 {
        n_prod = n_prod.max(1);
    }
    let n_prod = n_prod.min(n_train);
    if n_train == 0 {
        return Err(Error::InvalidArgument("split leaves the training set empty".into()));
    }
    if n_prod == 0 {
        return Err(Error::InvalidArgument(
            "split leaves the production sample empty".into(),
        ));
    }

    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..n_test + n_train].to_vec();
    let mut prod_idx = order[n_test..n_test + n_prod].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    prod_idx.sort_unstable();

    Ok(CorpusSplit {
        train: corpus.subset(&train_idx),
        production: corpus.subset(&prod_idx),
        test: corpus.subset(&test_idx),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svmlight_line_maps_fields() {
        let c = parse_svmlight("2 qid:7 1:0.5 3:1.0\n", Some(3)).unwrap();
        assert_eq!(c.queries.len(), 1);
        assert_eq!(c.queries[0].query_id, "7");
        let d = &c.queries[0].documents[0];
        assert_eq!(d.grade, 2);
        assert_eq!(d.features, vec![0.5, 0.0, 1.0]);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(matches!(parse_svmlight("", None), Err(Error::EmptyCorpus)));
        assert!(matches!(
            parse_svmlight("# only a comment\n\n", None),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_svmlight("1 qid:1 1:0.2\n1 qid:1 2:abc\n", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_svmlight("1 1:0.2\n", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_svmlight("7 qid:1 1:0.2\n", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn declared_dim_exceeded_is_inconsistent() {
        let err = parse_svmlight("1 qid:1 1:0.2\n0 qid:1 4:1\n", Some(3)).unwrap_err();
        assert!(matches!(
            err,
            Error::InconsistentFeatureDim {
                line: 2,
                index: 4,
                feature_dim: 3
            }
        ));
    }

    #[test]
    fn file_order_and_docid_comments() {
        let text = "0 qid:a 1:1 # docid = x\n3 qid:b 2:1\n1 qid:a 1:2 # docid = y\n";
        let c = parse_svmlight(text, None).unwrap();
        assert_eq!(c.feature_dim, 2);
        assert_eq!(c.queries[0].query_id, "a");
        let ids: Vec<_> = c.queries[0].documents.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(ids, ["x", "y"]);
        assert_eq!(c.queries[1].documents[0].doc_id, "0");
    }

    #[test]
    fn binarize_threshold() {
        assert_eq!(binarize(3).unwrap(), 1);
        assert_eq!(binarize(4).unwrap(), 1);
        assert_eq!(binarize(2).unwrap(), 0);
        assert_eq!(binarize(0).unwrap(), 0);
        assert!(binarize(5).is_err());
        for g in 0..4u8 {
            assert!(binarize(g).unwrap() <= binarize(g + 1).unwrap());
        }
    }

    #[test]
    fn synthesize_is_deterministic_and_in_range() {
        let a = synthesize_corpus(1, 5, 2, 0).unwrap();
        let b = synthesize_corpus(1, 5, 2, 0).unwrap();
        assert_eq!(a, b);
        let c = synthesize_corpus(50, 10, 3, 9).unwrap();
        assert!(c
            .queries
            .iter()
            .flat_map(|q| &q.documents)
            .all(|d| d.grade < 5));
        assert!(synthesize_corpus(0, 5, 2, 0).is_err());
    }

    #[test]
    fn split_one_percent_production() {
        let c = synthesize_corpus(100, 3, 2, 1).unwrap();
        let spec = SplitSpec {
            train_fraction: 0.8,
            production_fraction: 0.01,
            test_fraction: 0.2,
            seed: 5,
        };
        let s = split(&c, &spec).unwrap();
        assert_eq!(s.production.n_queries(), 1);
        assert_eq!(s.train.n_queries(), 80);
        assert_eq!(s.test.n_queries(), 20);
        let prod = &s.production.queries[0].query_id;
        assert!(s.train.queries.iter().any(|q| &q.query_id == prod));
        let again = split(&c, &spec).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn split_without_test_is_explicitly_empty() {
        let c = synthesize_corpus(10, 3, 2, 1).unwrap();
        let spec = SplitSpec {
            train_fraction: 1.0,
            production_fraction: 0.1,
            test_fraction: 0.0,
            seed: 0,
        };
        let s = split(&c, &spec).unwrap();
        assert!(s.test.is_empty());
        assert_eq!(s.train.n_queries(), 10);
    }

    #[test]
    fn split_rejects_empty_training_side() {
        let c = synthesize_corpus(10, 3, 2, 1).unwrap();
        let spec = SplitSpec {
            train_fraction: 0.0,
            production_fraction: 0.1,
            test_fraction: 1.0,
            seed: 0,
        };
        assert!(split(&c, &spec).is_err());
    }

    #[test]
    fn manifest_accepts_section_or_top_level() {
        let a = SyntheticManifest::from_toml(
            "version = 1\n[corpus]\nn_queries = 3\ndocs_per_query = 8\nfeature_dim = 4\nseed = 42\n",
        )
        .unwrap();
        let b = SyntheticManifest::from_toml(
            "n_queries = 3\ndocs_per_query = 8\nfeature_dim = 4\nseed = 42\n",
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(SyntheticManifest::from_toml("n_queries = 3\n").is_err());
    }
}
