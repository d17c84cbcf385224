//! Outlier detection within a single ranked list.
//!
//! Each observable feature column is min-max normalized over the list, the
//! interquartile rule gives per-column bounds, and an item's degree of
//! outlierness for that column is its distance outside the bounds. An item is
//! an outlier when any column's degree exceeds the threshold.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::RankingCorpus;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lists shorter than this carry no meaningful notion of outlierness.
pub const MIN_LIST_LEN: usize = 4;

/// Default threshold on the normalized degree of outlierness.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservableFeatureSet<T: Scalar = f64> {
    pub names: Vec<String>,
    /// One row per item, in presentation order.
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> ObservableFeatureSet<T> {
    pub fn new(names: Vec<String>, values: Vec<Vec<T>>) -> Result<Self> {
        for (i, row) in values.iter().enumerate() {
            if row.len() != names.len() {
                return Err(Error::DimensionMismatch {
                    expected: names.len(),
                    got: row.len(),
                });
            }
            if let Some(f) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { item: i, feature: f });
            }
        }
        Ok(ObservableFeatureSet { names, values })
    }

    /// Unnamed features `f0, f1, ...`.
    pub fn from_rows(values: Vec<Vec<T>>) -> Result<Self> {
        let width = values.first().map_or(0, Vec::len);
        let names = (0..width).map(|i| format!("f{i}")).collect();
        Self::new(names, values)
    }

    pub fn n_items(&self) -> usize {
        self.values.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    fn column(&self, f: usize) -> Vec<T> {
        self.values.iter().map(|row| row[f]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierVerdict<T: Scalar = f64> {
    /// items x features, non-negative.
    pub per_feature_degree: Vec<Vec<T>>,
    /// Same magnitudes; positive above the upper bound, negative below the lower.
    pub signed_degree: Vec<Vec<T>>,
    pub is_outlier: Vec<bool>,
    /// 1-based ranks of the outlier items, ascending.
    pub outlier_positions: Vec<usize>,
}

impl<T: Scalar> OutlierVerdict<T> {
    pub fn is_abnormal(&self) -> bool {
        !self.outlier_positions.is_empty()
    }

    /// Largest degree per item, over all features.
    pub fn max_degree(&self) -> Vec<T> {
        self.per_feature_degree
            .iter()
            .map(|row| row.iter().copied().fold(T::zero(), T::max))
            .collect()
    }
}

/// Positions of outliers in a presented list; the `o` of an examination
/// propensity indexed by rank and outlier configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutlierSignature {
    positions: Vec<usize>,
    lazy: bool,
}

impl OutlierSignature {
    /// The signature of a normal ranking.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(mut positions: Vec<usize>) -> Result<Self> {
        positions.sort_unstable();
        if positions.first() == Some(&0) {
            return Err(Error::InvalidArgument("signature ranks are 1-based".into()));
        }
        if positions.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate rank in signature".into()));
        }
        Ok(OutlierSignature {
            positions,
            lazy: false,
        })
    }

    pub fn single(position: usize) -> Result<Self> {
        Self::new(vec![position])
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_lazy(&self) -> bool {
        self.lazy
    }

    pub fn first(&self) -> Option<usize> {
        self.positions.first().copied()
    }

    pub fn contains(&self, rank: usize) -> bool {
        self.positions.binary_search(&rank).is_ok()
    }

    /// Keeps only the first (highest-ranked) outlier.
    pub fn to_lazy(&self) -> Self {
        OutlierSignature {
            positions: self.positions.iter().take(1).copied().collect(),
            lazy: true,
        }
    }

    /// Positions only; the key under which propensities are stored.
    pub fn key(&self) -> Self {
        OutlierSignature {
            positions: self.positions.clone(),
            lazy: false,
        }
    }

    /// Checks positions against a list of length `len`.
    pub fn check_len(&self, len: usize) -> Result<()> {
        match self.positions.last() {
            Some(&p) if p > len => Err(Error::InvalidArgument(format!(
                "signature rank {p} exceeds list length {len}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for OutlierSignature {
    /// `-` for the empty signature, otherwise ranks joined by `+`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.positions.is_empty() {
            return f.write_str("-");
        }
        for (i, p) in self.positions.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl FromStr for OutlierSignature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "-" || s.is_empty() {
            return Ok(Self::empty());
        }
        let positions = s
            .split('+')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad signature {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let sorted = positions.windows(2).all(|w| w[0] < w[1]);
        if !sorted {
            return Err(Error::InvalidArgument(format!(
                "signature ranks must be strictly increasing: {s:?}"
            )));
        }
        Self::new(positions)
    }
}

/// Linear-interpolation quantile of sorted data at position `p * (n - 1)`.
fn quantile_sorted<T: Scalar>(sorted: &[T], p: f64) -> T {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = T::lit(h - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Interquartile-rule fences `(Q1 - 1.5 IQR, Q3 + 1.5 IQR)`.
pub fn iqr_bounds<T: Scalar>(values: &[T]) -> Result<(T, T)> {
    if values.len() < MIN_LIST_LEN {
        return Err(Error::ListTooShort { len: values.len() });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { item: i, feature: 0 });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let fence = T::lit(1.5) * (q3 - q1);
    Ok((q1 - fence, q3 + fence))
}

/// Min-max normalization to [0, 1]; constant columns map to zeros.
fn normalize<T: Scalar>(column: &[T]) -> Vec<T> {
    let (lo, hi) = column
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    if span <= T::zero() {
        return vec![T::zero(); column.len()];
    }
    column.iter().map(|&v| (v - lo) / span).collect()
}

pub fn detect<T: Scalar>(features: &ObservableFeatureSet<T>, threshold: T) -> Result<OutlierVerdict<T>> {
    let n = features.n_items();
    if n < MIN_LIST_LEN {
        return Err(Error::ListTooShort { len: n });
    }
    for (i, row) in features.values.iter().enumerate() {
        if let Some(f) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { item: i, feature: f });
        }
    }
    let m = features.n_features();
    let mut degree = vec![vec![T::zero(); m]; n];
    let mut signed = vec![vec![T::zero(); m]; n];
    for f in 0..m {
        let col = normalize(&features.column(f));
        let (lower, upper) = iqr_bounds(&col)?;
        for (i, &v) in col.iter().enumerate() {
            if v > upper {
                degree[i][f] = v - upper;
                signed[i][f] = v - upper;
            } else if v < lower {
                degree[i][f] = lower - v;
                signed[i][f] = v - lower;
            }
        }
    }
    let is_outlier: Vec<bool> = degree
        .iter()
        .map(|row| row.iter().any(|&d| d > threshold))
        .collect();
    let outlier_positions = is_outlier
        .iter()
        .enumerate()
        .filter(|(_, &o)| o)
        .map(|(i, _)| i + 1)
        .collect();
    Ok(OutlierVerdict {
        per_feature_degree: degree,
        signed_degree: signed,
        is_outlier,
        outlier_positions,
    })
}

pub fn signature<T: Scalar>(verdict: &OutlierVerdict<T>, lazy: bool) -> OutlierSignature {
    let full = OutlierSignature {
        positions: verdict.outlier_positions.clone(),
        lazy: false,
    };
    if lazy {
        full.to_lazy()
    } else {
        full
    }
}

/// Where the observable features of presented items come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservableSource {
    /// Zero-based indices into each document's corpus feature vector.
    Columns(Vec<usize>),
    /// A separate table keyed by (query_id, doc_id).
    Sidecar(SidecarFeatures),
}

/// Observable features loaded from CSV `query_id,doc_id,<name>,<name>,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct SidecarFeatures {
    pub names: Vec<String>,
    rows: HashMap<(String, String), Vec<f64>>,
}

impl SidecarFeatures {
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "query_id" || cols[1] != "doc_id" {
            return Err(Error::parse(1, "header must be query_id,doc_id,<feature>..."));
        }
        let names: Vec<String> = cols[2..].iter().map(|c| c.to_string()).collect();
        let mut rows = HashMap::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::parse(i + 1, format!("expected {} fields", cols.len())));
            }
            let values = fields[2..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| Error::parse(i + 1, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let key = (fields[0].to_string(), fields[1].to_string());
            if rows.insert(key, values).is_some() {
                return Err(Error::parse(i + 1, "duplicate (query_id, doc_id)"));
            }
        }
        Ok(SidecarFeatures { names, rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

impl ObservableSource {
    /// Observable features of `docs` (document indices of query `query`),
    /// in the given order.
    pub fn features(&self, corpus: &RankingCorpus, query: usize, docs: &[usize]) -> Result<ObservableFeatureSet> {
        let q = &corpus.queries[query];
        match self {
            ObservableSource::Columns(cols) => {
                if let Some(&bad) = cols.iter().find(|&&c| c >= corpus.feature_dim) {
                    return Err(Error::InvalidArgument(format!(
                        "observable column {bad} outside feature_dim {}",
                        corpus.feature_dim
                    )));
                }
                let names = cols.iter().map(|c| format!("f{c}")).collect();
                let values = docs
                    .iter()
                    .map(|&d| cols.iter().map(|&c| q.documents[d].features[c]).collect())
                    .collect();
                ObservableFeatureSet::new(names, values)
            }
            ObservableSource::Sidecar(side) => {
                let values = docs
                    .iter()
                    .map(|&d| {
                        let doc_id = &q.documents[d].doc_id;
                        side.rows
                            .get(&(q.query_id.clone(), doc_id.clone()))
                            .cloned()
                            .ok_or_else(|| {
                                Error::InvalidArgument(format!(
                                    "sidecar has no row for query {} doc {doc_id}",
                                    q.query_id
                                ))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                ObservableFeatureSet::new(side.names.clone(), values)
            }
        }
    }
}

/// Signatures for presented lists; `lists[q]` holds document indices of
/// query `q` in presentation order. Lists shorter than [`MIN_LIST_LEN`] are
/// treated as normal.
pub fn detect_lists(
    corpus: &RankingCorpus,
    lists: &[Vec<usize>],
    source: &ObservableSource,
    threshold: f64,
    lazy: bool,
) -> Result<Vec<OutlierSignature>> {
    if lists.len() != corpus.n_queries() {
        return Err(Error::DimensionMismatch {
            expected: corpus.n_queries(),
            got: lists.len(),
        });
    }
    lists
        .par_iter()
        .enumerate()
        .map(|(q, docs)| {
            if docs.len() < MIN_LIST_LEN {
                return Ok(OutlierSignature::empty());
            }
            let verdict = detect(&source.features(corpus, q, docs)?, threshold)?;
            Ok(signature(&verdict, lazy))
        })
        .collect()
}
