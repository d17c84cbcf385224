//! Click simulation under position bias and outlier bias.
//!
//! A production ranker orders each query's documents once; every session
//! samples a query uniformly, shows the top `depth` documents and clicks each
//! one independently with probability `gamma * theta(rank, signature)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{binarize, RankingCorpus};
use crate::error::{Error, Result};
use crate::learner::{self, RegressionConfig, RelevanceModel, TrainingSet};
use crate::outliers::OutlierSignature;
use crate::ranker::score_and_rank;
use crate::scalar::Scalar;

pub const DEFAULT_DEPTH: usize = 10;

/// Examination probabilities indexed by rank and outlier signature.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityTable<T: Scalar = f64> {
    depth: usize,
    cells: BTreeMap<(OutlierSignature, usize), T>,
}

impl<T: Scalar> PropensityTable<T> {
    pub fn new(depth: usize) -> Self {
        PropensityTable {
            depth,
            cells: BTreeMap::new(),
        }
    }

    /// Pure position bias `(1/k)^eta` for ranks `1..=depth`.
    pub fn pbm(depth: usize, eta: T) -> Self {
        let mut t = Self::new(depth);
        for k in 1..=depth {
            t.cells
                .insert((OutlierSignature::empty(), k), pbm_propensity(k, eta));
        }
        t
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn insert(&mut self, rank: usize, signature: &OutlierSignature, theta: T) -> Result<()> {
        if rank == 0 || rank > self.depth {
            return Err(Error::Table(format!("rank {rank} outside 1..={}", self.depth)));
        }
        if !(theta >= T::zero() && theta <= T::one()) {
            return Err(Error::Table(format!(
                "theta {theta} at rank {rank}, signature {signature} outside [0, 1]"
            )));
        }
        self.cells.insert((signature.key(), rank), theta);
        Ok(())
    }

    pub fn get(&self, rank: usize, signature: &OutlierSignature) -> Option<T> {
        self.cells.get(&(signature.key(), rank)).copied()
    }

    /// Like [`get`](Self::get) but an absent cell is an error.
    pub fn theta(&self, rank: usize, signature: &OutlierSignature) -> Result<T> {
        self.get(rank, signature)
            .ok_or_else(|| Error::UncoveredSignature {
                rank,
                signature: signature.to_string(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &OutlierSignature, T)> + '_ {
        self.cells.iter().map(|((s, k), v)| (*k, s, *v))
    }

    pub fn signatures(&self) -> Vec<OutlierSignature> {
        let mut out: Vec<OutlierSignature> = Vec::new();
        for (s, _) in self.cells.keys() {
            if out.last() != Some(s) {
                out.push(s.clone());
            }
        }
        out
    }

    /// The no-outlier column must cover every rank.
    pub fn validate(&self) -> Result<()> {
        let empty = OutlierSignature::empty();
        for k in 1..=self.depth {
            if self.get(k, &empty).is_none() {
                return Err(Error::Table(format!(
                    "no-outlier column missing rank {k}"
                )));
            }
        }
        Ok(())
    }

    /// Ratio-preserving rescale, clamped to [0, 1].
    pub fn scaled(&self, factor: T) -> Self {
        PropensityTable {
            depth: self.depth,
            cells: self
                .cells
                .iter()
                .map(|(key, v)| (key.clone(), (*v * factor).min(T::one()).max(T::zero())))
                .collect(),
        }
    }

    /// CSV with header `rank,signature,theta`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,signature,theta\n");
        for ((sig, k), v) in &self.cells {
            writeln!(out, "{k},{sig},{v}").unwrap();
        }
        out
    }

    /// Parses the CSV format. `depth` is the largest rank present.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == "rank,signature,theta" => {}
            _ => return Err(Error::parse(1, "expected header rank,signature,theta")),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::parse(line_no, "expected 3 fields"));
            }
            let rank: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(line_no, "bad rank"))?;
            if rank == 0 {
                return Err(Error::parse(line_no, "ranks are 1-based"));
            }
            let sig: OutlierSignature = fields[1]
                .parse()
                .map_err(|e: Error| Error::parse(line_no, e.to_string()))?;
            let theta: f64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(line_no, "bad theta"))?;
            if !(0.0..=1.0).contains(&theta) {
                return Err(Error::Table(format!(
                    "line {line_no}: theta {theta} outside [0, 1]"
                )));
            }
            rows.push((rank, sig, T::lit(theta)));
        }
        let depth = rows.iter().map(|r| r.0).max().unwrap_or(0);
        if depth == 0 {
            return Err(Error::Table("empty propensity table".into()));
        }
        let mut table = Self::new(depth);
        for (rank, sig, theta) in rows {
            if table.get(rank, &sig).is_some() {
                return Err(Error::Table(format!("duplicate cell ({rank}, {sig})")));
            }
            table.insert(rank, &sig, theta)?;
        }
        table.validate()?;
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_propensity_table(path: impl AsRef<Path>) -> Result<PropensityTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PropensityTable::from_csv(&text)
}

/// `(1/k)^eta`.
pub fn pbm_propensity<T: Scalar>(rank: usize, eta: T) -> T {
    (T::one() / T::count(rank)).powf(eta)
}

/// Normal density with mean `mu` and standard deviation `sigma` at `x`.
pub fn gaussian_density<T: Scalar>(x: T, mu: T, sigma: T) -> T {
    let z = (x - mu) / sigma;
    let norm = T::one() / (sigma * T::lit(std::f64::consts::TAU).sqrt());
    norm * (-(z * z) / T::lit(2.0)).exp()
}

/// Position bias blended with a Gaussian bump centred on the outlier rank.
pub fn opbm_g<T: Scalar>(rank: usize, outlier: usize, alpha: T, sigma: T, eta: T) -> T {
    let bump = gaussian_density(T::count(rank), T::count(outlier), sigma);
    let v = (T::one() - alpha) * pbm_propensity(rank, eta) + alpha * bump;
    v.max(T::zero()).min(T::one())
}

/// Mean of [`opbm_g`] over every outlier position.
pub fn opbm_mg<T: Scalar>(rank: usize, outliers: &[usize], alpha: T, sigma: T, eta: T) -> T {
    if outliers.is_empty() {
        return pbm_propensity(rank, eta);
    }
    let sum: T = outliers
        .iter()
        .map(|&o| opbm_g(rank, o, alpha, sigma, eta))
        .sum();
    (sum / T::count(outliers.len())).max(T::zero()).min(T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClickModel {
    #[serde(rename = "pbm")]
    Pbm,
    #[serde(rename = "opbm_g")]
    OpbmG,
    #[serde(rename = "opbm_mg")]
    OpbmMg,
    #[serde(rename = "opbm_real")]
    OpbmReal,
}

impl std::str::FromStr for ClickModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pbm" => Ok(ClickModel::Pbm),
            "opbm_g" => Ok(ClickModel::OpbmG),
            "opbm_mg" => Ok(ClickModel::OpbmMg),
            "opbm_real" => Ok(ClickModel::OpbmReal),
            other => Err(Error::Unknown {
                kind: "click model",
                name: other.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickModelConfig {
    pub model: ClickModel,
    pub alpha: f64,
    pub sigma: f64,
    pub depth: usize,
    pub eta: f64,
    pub table_path: Option<PathBuf>,
    pub seed: u64,
    /// Session budget before giving up on the click target.
    pub max_sessions: Option<u64>,
}

impl Default for ClickModelConfig {
    fn default() -> Self {
        ClickModelConfig {
            model: ClickModel::Pbm,
            alpha: 0.0,
            sigma: 1.0,
            depth: DEFAULT_DEPTH,
            eta: 1.0,
            table_path: None,
            seed: 0,
            max_sessions: None,
        }
    }
}

impl ClickModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::Config("eta must be finite and >= 0".into()));
        }
        if self.model == ClickModel::OpbmReal && self.table_path.is_none() {
            return Err(Error::Config("opbm_real requires table_path".into()));
        }
        Ok(())
    }
}

/// A click model with its parameters resolved (tables loaded).
#[derive(Debug, Clone, PartialEq)]
pub struct ExaminationModel {
    pub model: ClickModel,
    pub alpha: f64,
    pub sigma: f64,
    pub depth: usize,
    pub eta: f64,
    pub table: Option<PropensityTable>,
}

impl ExaminationModel {
    pub fn from_config(config: &ClickModelConfig) -> Result<Self> {
        config.validate()?;
        let table = match (&config.model, &config.table_path) {
            (ClickModel::OpbmReal, Some(path)) => Some(load_propensity_table(path)?),
            _ => None,
        };
        Ok(ExaminationModel {
            model: config.model,
            alpha: config.alpha,
            sigma: config.sigma,
            depth: config.depth,
            eta: config.eta,
            table,
        })
    }

    /// An `opbm_real` model over an in-memory table.
    pub fn from_table(table: PropensityTable) -> Self {
        ExaminationModel {
            model: ClickModel::OpbmReal,
            alpha: 0.0,
            sigma: 1.0,
            depth: table.depth(),
            eta: 1.0,
            table: Some(table),
        }
    }

    /// Probability of examining `rank` in a list with outlier signature
    /// `signature`. Single-outlier models read the first outlier position.
    pub fn propensity(&self, rank: usize, signature: &OutlierSignature) -> Result<f64> {
        if rank == 0 || rank > self.depth {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} outside 1..={}",
                self.depth
            )));
        }
        let v = match self.model {
            ClickModel::Pbm => pbm_propensity(rank, self.eta),
            ClickModel::OpbmG => match signature.first() {
                None => pbm_propensity(rank, self.eta),
                Some(o) => opbm_g(rank, o, self.alpha, self.sigma, self.eta),
            },
            ClickModel::OpbmMg => {
                opbm_mg(rank, signature.positions(), self.alpha, self.sigma, self.eta)
            }
            ClickModel::OpbmReal => self
                .table
                .as_ref()
                .ok_or_else(|| Error::Config("opbm_real model without a table".into()))?
                .theta(rank, signature)?,
        };
        Ok(v.clamp(0.0, 1.0))
    }

    /// The true table over the given signatures.
    pub fn table_for(&self, signatures: &[OutlierSignature]) -> Result<PropensityTable> {
        let mut t = PropensityTable::new(self.depth);
        let empty = OutlierSignature::empty();
        for k in 1..=self.depth {
            let v = match self.model {
                ClickModel::OpbmReal => self.propensity(k, &empty)?,
                _ => pbm_propensity(k, self.eta),
            };
            t.insert(k, &empty, v)?;
        }
        for s in signatures {
            for k in 1..=self.depth {
                t.insert(k, s, self.propensity(k, s)?)?;
            }
        }
        Ok(t)
    }
}

/// Convenience wrapper for analytic models; `opbm_real` loads its table.
pub fn propensity(config: &ClickModelConfig, rank: usize, signature: &OutlierSignature) -> Result<f64> {
    ExaminationModel::from_config(config)?.propensity(rank, signature)
}

/// How synthetic outliers are assigned to rankings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierPlacement {
    /// Fraction of rankings that receive outliers.
    pub p_abnormal: f64,
    /// Fixed outlier ranks; empty means one outlier at a uniform rank.
    pub fixed_positions: Vec<usize>,
}

impl Default for OutlierPlacement {
    fn default() -> Self {
        OutlierPlacement {
            p_abnormal: 0.5,
            fixed_positions: Vec::new(),
        }
    }
}

/// Draws one signature per list; `list_lens` are presented lengths.
pub fn place_outliers(
    list_lens: &[usize],
    placement: &OutlierPlacement,
    seed: u64,
) -> Result<Vec<OutlierSignature>> {
    if !(0.0..=1.0).contains(&placement.p_abnormal) {
        return Err(Error::Config("p_abnormal outside [0, 1]".into()));
    }
    let fixed = OutlierSignature::new(placement.fixed_positions.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    list_lens
        .iter()
        .map(|&len| {
            let abnormal = rng.random::<f64>() < placement.p_abnormal;
            let pos = rng.random_range(1..=len.max(1));
            if !abnormal || len == 0 {
                return Ok(OutlierSignature::empty());
            }
            if fixed.is_empty() {
                OutlierSignature::single(pos)
            } else {
                fixed.check_len(len)?;
                Ok(fixed.clone())
            }
        })
        .collect()
}

/// Weak production ranker fitted on graded labels of a small query sample.
pub fn train_production_ranker(production: &RankingCorpus, config: &RegressionConfig) -> Result<RelevanceModel> {
    if production.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let top = f64::from(production.grade_levels.max(2) - 1);
    let mut set = TrainingSet::with_capacity(production.n_documents());
    for q in &production.queries {
        for d in &q.documents {
            let y = f64::from(d.grade) / top;
            set.push(d.features.clone(), y, 1.0 - y);
        }
    }
    learner::fit(&set, production.feature_dim, config)
}

/// One (query, document) impression in a simulated or ingested log.
/// `query` and `doc` index into the corpus the log was built against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClickRecord {
    pub session: u64,
    pub query: u32,
    pub doc: u32,
    pub rank: u16,
    /// Index into [`ClickLog::signatures`].
    pub signature: u32,
    pub impression: bool,
    pub click: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClickLog {
    pub records: Vec<ClickRecord>,
    /// Interned signatures referenced by records.
    pub signatures: Vec<OutlierSignature>,
    pub sessions: u64,
    pub depth: usize,
}

impl ClickLog {
    pub fn n_clicks(&self) -> u64 {
        self.records.iter().filter(|r| r.click).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn signature(&self, record: &ClickRecord) -> &OutlierSignature {
        &self.signatures[record.signature as usize]
    }

    /// Maps every signature through `f`, re-interning.
    pub fn rekey(&self, f: impl Fn(&OutlierSignature) -> OutlierSignature) -> ClickLog {
        let mut interner = Interner::default();
        let remap: Vec<u32> = self
            .signatures
            .iter()
            .map(|s| interner.intern(f(s)))
            .collect();
        ClickLog {
            records: self
                .records
                .iter()
                .map(|r| ClickRecord {
                    signature: remap[r.signature as usize],
                    ..*r
                })
                .collect(),
            signatures: interner.into_vec(),
            sessions: self.sessions,
            depth: self.depth,
        }
    }

    /// Keeps only the first outlier of each signature.
    pub fn lazy(&self) -> ClickLog {
        self.rekey(OutlierSignature::to_lazy)
    }

    /// Drops all outlier information.
    pub fn position_only(&self) -> ClickLog {
        self.rekey(|_| OutlierSignature::empty())
    }

    /// CSV `session,query_id,doc_id,rank,signature,impression,click`.
    pub fn to_csv(&self, corpus: &RankingCorpus) -> String {
        let mut out = String::with_capacity(self.records.len() * 24);
        out.push_str("session,query_id,doc_id,rank,signature,impression,click\n");
        let sigs: Vec<String> = self.signatures.iter().map(|s| s.to_string()).collect();
        for r in &self.records {
            let q = &corpus.queries[r.query as usize];
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.session,
                q.query_id,
                q.documents[r.doc as usize].doc_id,
                r.rank,
                sigs[r.signature as usize],
                u8::from(r.impression),
                u8::from(r.click)
            )
            .unwrap();
        }
        out
    }

    pub fn save(&self, corpus: &RankingCorpus, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv(corpus)).map_err(|e| Error::io(path, e))
    }

    /// Parses the CSV format, resolving ids against `corpus`.
    pub fn from_csv(text: &str, corpus: &RankingCorpus) -> Result<ClickLog> {
        let qindex: HashMap<&str, usize> = corpus
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.query_id.as_str(), i))
            .collect();
        let dindex: Vec<HashMap<&str, usize>> = corpus
            .queries
            .iter()
            .map(|q| {
                q.documents
                    .iter()
                    .enumerate()
                    .map(|(i, d)| (d.doc_id.as_str(), i))
                    .collect()
            })
            .collect();
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == "session,query_id,doc_id,rank,signature,impression,click" => {}
            _ => return Err(Error::parse(1, "expected click log header")),
        }
        let mut interner = Interner::default();
        let mut sig_cache: HashMap<String, u32> = HashMap::new();
        let mut records = Vec::new();
        let mut max_session = None::<u64>;
        let mut depth = 0usize;
        for (i, line) in lines {
            let n = i + 1;
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(Error::parse(n, "expected 7 fields"));
            }
            let session: u64 = f[0].parse().map_err(|_| Error::parse(n, "bad session"))?;
            let q = *qindex
                .get(f[1])
                .ok_or_else(|| Error::parse(n, format!("unknown query_id {}", f[1])))?;
            let d = *dindex[q]
                .get(f[2])
                .ok_or_else(|| Error::parse(n, format!("unknown doc_id {}", f[2])))?;
            let rank: u16 = f[3].parse().map_err(|_| Error::parse(n, "bad rank"))?;
            if rank == 0 {
                return Err(Error::parse(n, "ranks are 1-based"));
            }
            let sig = match sig_cache.get(f[4]) {
                Some(&id) => id,
                None => {
                    let s: OutlierSignature = f[4]
                        .parse()
                        .map_err(|e: Error| Error::parse(n, e.to_string()))?;
                    let id = interner.intern(s);
                    sig_cache.insert(f[4].to_string(), id);
                    id
                }
            };
            let flag = |s: &str| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(Error::parse(n, format!("expected 0/1, got {s:?}"))),
            };
            let impression = flag(f[5])?;
            let click = flag(f[6])?;
            if click && !impression {
                return Err(Error::parse(n, "click without impression"));
            }
            depth = depth.max(usize::from(rank));
            max_session = Some(max_session.map_or(session, |m| m.max(session)));
            records.push(ClickRecord {
                session,
                query: q as u32,
                doc: d as u32,
                rank,
                signature: sig,
                impression,
                click,
            });
        }
        Ok(ClickLog {
            records,
            signatures: interner.into_vec(),
            sessions: max_session.map_or(0, |m| m + 1),
            depth,
        })
    }

    pub fn load(path: impl AsRef<Path>, corpus: &RankingCorpus) -> Result<ClickLog> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, corpus)
    }
}

#[derive(Default)]
pub(crate) struct Interner {
    ids: HashMap<OutlierSignature, u32>,
    items: Vec<OutlierSignature>,
}

impl Interner {
    pub(crate) fn intern(&mut self, s: OutlierSignature) -> u32 {
        let s = s.key();
        if let Some(&id) = self.ids.get(&s) {
            return id;
        }
        let id = self.items.len() as u32;
        self.ids.insert(s.clone(), id);
        self.items.push(s);
        id
    }

    pub(crate) fn into_vec(self) -> Vec<OutlierSignature> {
        self.items
    }
}

/// What each query shows: top-`depth` document indices and its signature.
#[derive(Debug, Clone, PartialEq)]
pub struct Presentation {
    pub docs: Vec<usize>,
    pub signature: OutlierSignature,
}

/// Ranks every query with `ranker` and truncates to `depth`.
pub fn present(
    corpus: &RankingCorpus,
    ranker: &RelevanceModel,
    signatures: &[OutlierSignature],
    depth: usize,
) -> Result<Vec<Presentation>> {
    if signatures.len() != corpus.n_queries() {
        return Err(Error::DimensionMismatch {
            expected: corpus.n_queries(),
            got: signatures.len(),
        });
    }
    let ranked = score_and_rank(ranker, corpus)?;
    ranked
        .into_iter()
        .zip(signatures)
        .map(|(r, s)| {
            let docs: Vec<usize> = r.into_iter().take(depth).map(|(i, _)| i).collect();
            s.check_len(docs.len())?;
            Ok(Presentation {
                docs,
                signature: s.clone(),
            })
        })
        .collect()
}

/// Statistics of a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimulationSummary {
    pub sessions: u64,
    pub clicks: u64,
}

const SESSION_BATCH: u64 = 8192;

/// Simulates sessions until at least `n_clicks_target` clicks are logged.
///
/// Session `s` draws from its own ChaCha stream `s` under the master seed, so
/// the output does not depend on batching or thread count.
pub fn simulate(
    corpus: &RankingCorpus,
    ranker: &RelevanceModel,
    signatures: &[OutlierSignature],
    config: &ClickModelConfig,
    n_clicks_target: u64,
) -> Result<ClickLog> {
    let model = ExaminationModel::from_config(config)?;
    let presentations = present(corpus, ranker, signatures, config.depth)?;
    simulate_presented(corpus, &presentations, &model, config.seed, n_clicks_target, config.max_sessions)
}

pub fn simulate_presented(
    corpus: &RankingCorpus,
    presentations: &[Presentation],
    model: &ExaminationModel,
    seed: u64,
    n_clicks_target: u64,
    max_sessions: Option<u64>,
) -> Result<ClickLog> {
    let cap = max_sessions.unwrap_or_else(|| n_clicks_target.saturating_mul(100).max(100_000));
    run_sessions(corpus, presentations, model, seed, Stop::Clicks { target: n_clicks_target, cap })
}

/// Simulates exactly `sessions` sessions, however many clicks they yield.
pub fn simulate_sessions(
    corpus: &RankingCorpus,
    presentations: &[Presentation],
    model: &ExaminationModel,
    seed: u64,
    sessions: u64,
) -> Result<ClickLog> {
    run_sessions(corpus, presentations, model, seed, Stop::Sessions(sessions))
}

#[derive(Clone, Copy)]
enum Stop {
    Clicks { target: u64, cap: u64 },
    Sessions(u64),
}

fn run_sessions(
    corpus: &RankingCorpus,
    presentations: &[Presentation],
    model: &ExaminationModel,
    seed: u64,
    stop: Stop,
) -> Result<ClickLog> {
    if corpus.is_empty() || presentations.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if presentations.len() != corpus.n_queries() {
        return Err(Error::DimensionMismatch {
            expected: corpus.n_queries(),
            got: presentations.len(),
        });
    }
    let mut interner = Interner::default();
    // Per query: (signature id, [(doc, click probability)]).
    let plans: Vec<(u32, Vec<(u32, f64)>)> = presentations
        .iter()
        .enumerate()
        .map(|(qi, p)| {
            let sig = interner.intern(p.signature.clone());
            let items = p
                .docs
                .iter()
                .enumerate()
                .map(|(r, &d)| {
                    let gamma = f64::from(binarize(corpus.queries[qi].documents[d].grade)?);
                    Ok((d as u32, gamma * model.propensity(r + 1, &p.signature)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((sig, items))
        })
        .collect::<Result<_>>()?;
    let n_queries = plans.len();

    let run_session = |s: u64| -> Vec<ClickRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        let qi = rng.random_range(0..n_queries);
        let (sig, items) = &plans[qi];
        items
            .iter()
            .enumerate()
            .map(|(r, &(doc, p))| ClickRecord {
                session: s,
                query: qi as u32,
                doc,
                rank: (r + 1) as u16,
                signature: *sig,
                impression: true,
                click: rng.random::<f64>() < p,
            })
            .collect()
    };

    let mut records = Vec::new();
    let mut sessions = 0u64;
    match stop {
        Stop::Sessions(n) => {
            let mut next = 0u64;
            while next < n {
                let end = (next + SESSION_BATCH).min(n);
                let batch: Vec<Vec<ClickRecord>> = (next..end).into_par_iter().map(run_session).collect();
                records.extend(batch.into_iter().flatten());
                next = end;
            }
            sessions = n;
        }
        Stop::Clicks { target, cap } => {
            let mut clicks = 0u64;
            let mut next = 0u64;
            'outer: while clicks < target {
                if next >= cap {
                    return Err(Error::UnreachableTarget {
                        sessions: next,
                        clicks,
                        target,
                    });
                }
                let end = (next + SESSION_BATCH).min(cap);
                let batch: Vec<Vec<ClickRecord>> = (next..end).into_par_iter().map(run_session).collect();
                for session in batch {
                    clicks += session.iter().filter(|r| r.click).count() as u64;
                    records.extend(session);
                    sessions += 1;
                    if clicks >= target {
                        break 'outer;
                    }
                }
                next = end;
            }
        }
    }
    Ok(ClickLog {
        records,
        signatures: interner.into_vec(),
        sessions,
        depth: model.depth,
    })
}
