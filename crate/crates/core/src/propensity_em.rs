//! Regression-based EM for outlier-aware examination propensities.
//!
//! Clicks follow `P(C = 1) = theta[k, o] * gamma(q, d)`. The E-step computes
//! posteriors of examination and relevance for unclicked impressions; the
//! M-step averages examination posteriors per (rank, signature) cell and fits
//! a single relevance model `f(x)` on sampled (or soft) relevance labels. The
//! relevance model never sees the outlier signature.
//!
//! Log records are pooled by (query, doc, rank, signature) before iterating;
//! every quantity involved is a sum over records, so this is exact.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clicksim::{ClickLog, PropensityTable};
use crate::corpus::RankingCorpus;
use crate::error::{Error, Result};
use crate::learner::{self, RegressionConfig, RelevanceModel, TrainingSet};
use crate::outliers::OutlierSignature;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Draw `r ~ Bernoulli(P(R = 1 | ...))` per record.
    #[default]
    Sample,
    /// Use `P(R = 1 | ...)` as a fractional label.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iterations: usize,
    pub theta_floor: f64,
    pub normalize_anchor: bool,
    pub relevance_label_mode: LabelMode,
    /// Start from a relevance model regressed on clicks corrected by the
    /// initial propensities rather than from a constant 0.5.
    pub relevance_warm_start: bool,
    pub seed: u64,
    pub regression: RegressionConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iterations: 20,
            theta_floor: 1e-6,
            normalize_anchor: true,
            relevance_label_mode: LabelMode::Sample,
            relevance_warm_start: true,
            seed: 0,
            regression: RegressionConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_floor > 0.0 && self.theta_floor < 0.1) {
            return Err(Error::Config("theta_floor must be in (0, 0.1)".into()));
        }
        self.regression.validate()
    }
}

/// Marginal posteriors `P(E = 1 | ...)` and `P(R = 1 | ...)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior<T: Scalar = f64> {
    pub examined: T,
    pub relevant: T,
}

/// Joint posteriors `[E1R1, E1R0, E0R1, E0R0]` of one impression.
pub fn joint_posterior<T: Scalar>(theta: T, gamma: T, click: bool) -> Result<[T; 4]> {
    let unit = |v: T| v >= T::zero() && v <= T::one();
    if !unit(theta) || !unit(gamma) {
        return Err(Error::InvalidArgument(format!(
            "theta {theta} and gamma {gamma} must lie in [0, 1]"
        )));
    }
    let z = T::zero();
    if click {
        if theta * gamma <= z {
            return Err(Error::InvalidArgument(
                "click observed with theta * gamma = 0".into(),
            ));
        }
        return Ok([T::one(), z, z, z]);
    }
    let denom = T::one() - theta * gamma;
    if denom <= z {
        return Err(Error::InconsistentLog);
    }
    Ok([
        z,
        theta * (T::one() - gamma) / denom,
        (T::one() - theta) * gamma / denom,
        (T::one() - theta) * (T::one() - gamma) / denom,
    ])
}

/// Examination and relevance posteriors of one impression.
pub fn posterior<T: Scalar>(theta: T, gamma: T, click: bool) -> Result<Posterior<T>> {
    let [e1r1, e1r0, e0r1, _] = joint_posterior(theta, gamma, click)?;
    Ok(Posterior {
        examined: e1r1 + e1r0,
        relevant: e1r1 + e0r1,
    })
}

/// `theta[k, o]` = mean over the cell's records of `c + (1 - c) P(E = 1)`,
/// floored, then optionally rescaled so `theta[1, -] = 1`.
///
/// Cells without records are left out. Returns the table and the anchor scale
/// applied (1 when anchoring is off or the anchor cell is absent).
pub fn update_theta(
    log: &ClickLog,
    examined: &[f64],
    theta_floor: f64,
    normalize_anchor: bool,
) -> Result<(PropensityTable, f64)> {
    if examined.len() != log.records.len() {
        return Err(Error::DimensionMismatch {
            expected: log.records.len(),
            got: examined.len(),
        });
    }
    let mut sums: BTreeMap<(usize, u32), (f64, u64)> = BTreeMap::new();
    for (r, &pe) in log.records.iter().zip(examined) {
        if !r.impression {
            continue;
        }
        let v = if r.click { 1.0 } else { pe };
        let e = sums.entry((usize::from(r.rank), r.signature)).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let cells = sums
        .into_iter()
        .map(|((k, s), (sum, n))| ((k, log.signatures[s as usize].clone()), sum / n as f64));
    finish_theta(log.depth, cells, theta_floor, normalize_anchor)
}

fn finish_theta(
    depth: usize,
    cells: impl Iterator<Item = ((usize, OutlierSignature), f64)>,
    theta_floor: f64,
    normalize_anchor: bool,
) -> Result<(PropensityTable, f64)> {
    let raw: Vec<((usize, OutlierSignature), f64)> = cells
        .map(|(key, v)| (key, v.max(theta_floor)))
        .collect();
    let anchor = raw
        .iter()
        .find(|((k, s), _)| *k == 1 && s.is_empty())
        .map(|(_, v)| *v);
    let scale = match (normalize_anchor, anchor) {
        (true, Some(a)) => 1.0 / a,
        _ => 1.0,
    };
    let mut table = PropensityTable::new(depth);
    for ((k, s), v) in raw {
        table.insert(k, &s, (v * scale).clamp(theta_floor, 1.0))?;
    }
    Ok((table, scale))
}

fn features_of<'a>(corpus: &'a RankingCorpus, q: u32, d: u32) -> Result<&'a [f64]> {
    corpus
        .queries
        .get(q as usize)
        .and_then(|g| g.documents.get(d as usize))
        .map(|d| d.features.as_slice())
        .ok_or_else(|| Error::InvalidArgument(format!("record refers to missing document ({q}, {d})")))
}

/// Fits the relevance model from per-record relevance posteriors.
///
/// In `sample` mode each unclicked record draws `r ~ Bernoulli(relevant)`;
/// clicked records have `r = 1`. In `soft` mode the posterior is the label.
pub fn fit_relevance(
    log: &ClickLog,
    relevant: &[f64],
    corpus: &RankingCorpus,
    config: &RegressionConfig,
    mode: LabelMode,
    seed: u64,
) -> Result<RelevanceModel> {
    if relevant.len() != log.records.len() {
        return Err(Error::DimensionMismatch {
            expected: log.records.len(),
            got: relevant.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mass: BTreeMap<(u32, u32), (f64, f64)> = BTreeMap::new();
    for (r, &pr) in log.records.iter().zip(relevant) {
        if !r.impression {
            continue;
        }
        let label = if r.click {
            1.0
        } else {
            match mode {
                LabelMode::Soft => pr,
                LabelMode::Sample => {
                    let b = Bernoulli::new(pr.clamp(0.0, 1.0))
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    f64::from(u8::from(b.sample(&mut rng)))
                }
            }
        };
        let e = mass.entry((r.query, r.doc)).or_default();
        e.0 += label;
        e.1 += 1.0 - label;
    }
    let mut set = TrainingSet::with_capacity(mass.len());
    for ((q, d), (pos, neg)) in mass {
        set.push(features_of(corpus, q, d)?.to_vec(), pos, neg);
    }
    learner::fit(&set, corpus.feature_dim, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub theta_anchor_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub theta: PropensityTable,
    pub relevance: RelevanceModel,
    pub iteration: usize,
    pub log_likelihood: f64,
    pub trace: Vec<IterationMetrics>,
}

impl EmState {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,log_likelihood,theta_anchor_scale\n");
        for m in &self.trace {
            writeln!(out, "{},{},{}", m.iteration, m.log_likelihood, m.theta_anchor_scale).unwrap();
        }
        out
    }
}

/// Records pooled by (query, doc, rank, signature).
struct PooledCell {
    doc: usize,
    theta: usize,
    clicks: u64,
    impressions: u64,
}

struct PooledLog {
    cells: Vec<PooledCell>,
    /// (query, doc) per pooled document, sorted.
    docs: Vec<(u32, u32)>,
    /// (rank, signature) per theta cell, sorted.
    theta_keys: Vec<(usize, OutlierSignature)>,
}

impl PooledLog {
    fn new(log: &ClickLog) -> Self {
        let mut agg: BTreeMap<(u32, u32, usize, &OutlierSignature), (u64, u64)> = BTreeMap::new();
        for r in log.records.iter().filter(|r| r.impression) {
            let e = agg
                .entry((r.query, r.doc, usize::from(r.rank), log.signature(r)))
                .or_default();
            e.0 += u64::from(r.click);
            e.1 += 1;
        }
        let mut theta_keys: Vec<(usize, OutlierSignature)> = agg
            .keys()
            .map(|&(_, _, k, s)| (k, s.clone()))
            .collect();
        theta_keys.sort();
        theta_keys.dedup();
        let theta_index: HashMap<&(usize, OutlierSignature), usize> =
            theta_keys.iter().enumerate().map(|(i, k)| (k, i)).collect();

        let mut docs: Vec<(u32, u32)> = Vec::new();
        let mut cells = Vec::with_capacity(agg.len());
        for (&(q, d, k, s), &(clicks, impressions)) in &agg {
            if docs.last() != Some(&(q, d)) {
                docs.push((q, d));
            }
            cells.push(PooledCell {
                doc: docs.len() - 1,
                theta: theta_index[&(k, s.clone())],
                clicks,
                impressions,
            });
        }
        PooledLog {
            cells,
            docs,
            theta_keys,
        }
    }

    /// Starting propensities. Normal-ranking cells use the `1/k` prior. An
    /// abnormal cell starts from the prior scaled by its click-through rate
    /// relative to normal rankings at the same rank, which is exact when
    /// outlier placement is independent of relevance.
    fn initial_theta(&self, floor: f64) -> Vec<f64> {
        let mut counts = vec![(0u64, 0u64); self.theta_keys.len()];
        for c in &self.cells {
            counts[c.theta].0 += c.clicks;
            counts[c.theta].1 += c.impressions;
        }
        let ctr = |i: usize| counts[i].0 as f64 / counts[i].1 as f64;
        let normal: HashMap<usize, usize> = self
            .theta_keys
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| s.is_empty())
            .map(|(i, (k, _))| (*k, i))
            .collect();
        self.theta_keys
            .iter()
            .enumerate()
            .map(|(i, (k, s))| {
                let prior = initial_theta(*k, s);
                if s.is_empty() {
                    return prior;
                }
                match normal.get(k) {
                    Some(&j) if ctr(j) > 0.0 && counts[i].0 > 0 => {
                        (ctr(i) / ctr(j) / *k as f64).clamp(floor, MAX_ABNORMAL_INIT)
                    }
                    _ => prior,
                }
            })
            .collect()
    }

    /// Posteriors of an unclicked impression, per pooled cell.
    fn posteriors(&self, theta: &[f64], gamma: &[f64]) -> Result<Vec<Posterior>> {
        self.cells
            .par_iter()
            .map(|c| posterior(theta[c.theta], gamma[c.doc], false))
            .collect()
    }

    /// Fits `f(x)` on relevance labels drawn from (or equal to) the
    /// posteriors. Sampling uses ChaCha stream `stream` under the EM seed.
    fn relevance_step(
        &self,
        features: &[&[f64]],
        posts: &[Posterior],
        config: &EmConfig,
        stream: u64,
        dim: usize,
    ) -> Result<RelevanceModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        let mut mass = vec![(0.0f64, 0.0f64); self.docs.len()];
        for (c, p) in self.cells.iter().zip(posts) {
            let unclicked = c.impressions - c.clicks;
            let positives = match config.relevance_label_mode {
                LabelMode::Soft => unclicked as f64 * p.relevant,
                LabelMode::Sample if unclicked == 0 => 0.0,
                LabelMode::Sample => {
                    let b = Binomial::new(unclicked, p.relevant.clamp(0.0, 1.0))
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    b.sample(&mut rng) as f64
                }
            };
            let m = &mut mass[c.doc];
            m.0 += c.clicks as f64 + positives;
            m.1 += unclicked as f64 - positives;
        }
        let mut set = TrainingSet::with_capacity(mass.len());
        for (x, (pos, neg)) in features.iter().zip(mass) {
            set.push(x.to_vec(), pos, neg);
        }
        learner::fit(&set, dim, &config.regression)
    }

    /// Regresses IPS-corrected clicks `min(c / theta, 1)` on the features.
    fn ips_relevance(
        &self,
        features: &[&[f64]],
        theta: &[f64],
        config: &EmConfig,
        dim: usize,
    ) -> Result<RelevanceModel> {
        let mut mass = vec![(0.0f64, 0.0f64); self.docs.len()];
        for c in &self.cells {
            let n = c.impressions as f64;
            let pos = (c.clicks as f64 / theta[c.theta]).min(n);
            let m = &mut mass[c.doc];
            m.0 += pos;
            m.1 += n - pos;
        }
        let mut set = TrainingSet::with_capacity(mass.len());
        for (x, (pos, neg)) in features.iter().zip(mass) {
            set.push(x.to_vec(), pos, neg);
        }
        learner::fit(&set, dim, &config.regression)
    }

    fn log_likelihood(&self, theta: &[f64], gamma: &[f64]) -> f64 {
        self.cells
            .iter()
            .map(|c| {
                let p = theta[c.theta] * gamma[c.doc];
                let nc = (c.impressions - c.clicks) as f64;
                let mut ll = 0.0;
                if c.clicks > 0 {
                    ll += c.clicks as f64 * p.ln();
                }
                if nc > 0.0 {
                    ll += nc * (1.0 - p).ln();
                }
                ll
            })
            .sum()
    }
}

/// Initial propensity: `1/k`, except that cells of abnormal rankings start at
/// no more than 0.5, since `theta = 1` is a fixed point of the update.
pub fn initial_theta(rank: usize, signature: &OutlierSignature) -> f64 {
    let v = 1.0 / rank as f64;
    if signature.is_empty() {
        v
    } else {
        v.min(0.5)
    }
}

/// Upper bound on data-driven starting values of abnormal cells.
const MAX_ABNORMAL_INIT: f64 = 0.95;

/// Runs EM for exactly `max_iterations` iterations.
///
/// Normal-ranking cells start at `1/k`; abnormal cells start from their
/// click-through rate relative to normal rankings at the same rank. The
/// relevance model starts as a constant 0.5, or from IPS-corrected clicks
/// when `relevance_warm_start` is set.
pub fn run_em(log: &ClickLog, corpus: &RankingCorpus, config: &EmConfig) -> Result<EmState> {
    config.validate()?;
    if log.is_empty() {
        return Err(Error::InvalidArgument("empty click log".into()));
    }
    if let Some(r) = log.records.iter().find(|r| usize::from(r.rank) > log.depth || r.rank == 0) {
        return Err(Error::InvalidArgument(format!(
            "record rank {} outside 1..={}",
            r.rank, log.depth
        )));
    }
    let pooled = PooledLog::new(log);
    let features: Vec<&[f64]> = pooled
        .docs
        .iter()
        .map(|&(q, d)| features_of(corpus, q, d))
        .collect::<Result<_>>()?;

    let mut theta = pooled.initial_theta(config.theta_floor);
    let mut relevance = RelevanceModel::constant(0.5, corpus.feature_dim);
    let mut gamma = vec![0.5; pooled.docs.len()];
    let mut trace = Vec::with_capacity(config.max_iterations);
    let mut log_likelihood = pooled.log_likelihood(&theta, &gamma);

    let dim = corpus.feature_dim;
    if config.relevance_warm_start {
        relevance = pooled.ips_relevance(&features, &theta, config, dim)?;
        gamma = features.par_iter().map(|x| relevance.predict(x)).collect();
        log_likelihood = pooled.log_likelihood(&theta, &gamma);
    }

    for iteration in 1..=config.max_iterations {
        let posts = pooled.posteriors(&theta, &gamma)?;

        // M-step for theta.
        let mut sums = vec![(0.0f64, 0u64); theta.len()];
        for (c, p) in pooled.cells.iter().zip(&posts) {
            let s = &mut sums[c.theta];
            s.0 += c.clicks as f64 + (c.impressions - c.clicks) as f64 * p.examined;
            s.1 += c.impressions;
        }
        let (table, scale) = finish_theta(
            log.depth,
            pooled
                .theta_keys
                .iter()
                .cloned()
                .zip(sums.iter().map(|&(s, n)| s / n as f64)),
            config.theta_floor,
            config.normalize_anchor,
        )?;

        relevance = pooled.relevance_step(&features, &posts, config, iteration as u64, dim)?;
        gamma = features.par_iter().map(|x| relevance.predict(x)).collect();

        theta = pooled
            .theta_keys
            .iter()
            .map(|(k, s)| table.get(*k, s).expect("every pooled cell has a value"))
            .collect();
        let ll = pooled.log_likelihood(&theta, &gamma);
        if ll < log_likelihood {
            log::debug!("iteration {iteration}: log-likelihood decreased {log_likelihood} -> {ll}");
        }
        log_likelihood = ll;
        trace.push(IterationMetrics {
            iteration,
            log_likelihood: ll,
            theta_anchor_scale: scale,
        });
    }

    let mut table = PropensityTable::new(log.depth);
    for ((k, s), v) in pooled.theta_keys.iter().zip(&theta) {
        table.insert(*k, s, *v)?;
    }
    let empty = OutlierSignature::empty();
    for k in 1..=log.depth {
        if table.get(k, &empty).is_none() {
            log::warn!("no normal-ranking impressions at rank {k}; keeping the initial propensity");
            table.insert(k, &empty, initial_theta(k, &empty))?;
        }
    }

    Ok(EmState {
        theta: table,
        relevance,
        iteration: config.max_iterations,
        log_likelihood,
        trace,
    })
}

/// Writes the propensity table CSV.
pub fn export_table(state: &EmState, path: impl AsRef<Path>) -> Result<()> {
    state.theta.validate()?;
    state.theta.save(path)
}

/// Writes `iteration,log_likelihood,theta_anchor_scale`.
pub fn export_trace(state: &EmState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, state.trace_csv()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicksim::ClickRecord;
    use proptest::prelude::*;

    #[test]
    fn posterior_examples() {
        let p = posterior(0.5f64, 0.5, false).unwrap();
        assert!((p.examined - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.relevant - 1.0 / 3.0).abs() < 1e-15);
        let p = posterior(0.3, 0.8, true).unwrap();
        assert_eq!((p.examined, p.relevant), (1.0, 1.0));
        let p = posterior(0.0, 1.0, false).unwrap();
        assert_eq!((p.examined, p.relevant), (0.0, 1.0));
        assert!(matches!(posterior(1.0, 1.0, false), Err(Error::InconsistentLog)));
        assert!(posterior(0.0, 0.5, true).is_err());
        assert!(posterior(1.5, 0.5, false).is_err());
        let p32 = posterior(0.5f32, 0.5, false).unwrap();
        assert!((p32.examined - 1.0 / 3.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn joint_posterior_sums_to_one(theta in 1e-9f64..1.0, gamma in 1e-9f64..1.0) {
            let j = joint_posterior(theta, gamma, false).unwrap();
            prop_assert!((j.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(j.iter().all(|v| *v >= 0.0));
        }
    }

    fn rec(rank: u16, sig: u32, click: bool) -> ClickRecord {
        ClickRecord {
            session: 0,
            query: 0,
            doc: 0,
            rank,
            signature: sig,
            impression: true,
            click,
        }
    }

    #[test]
    fn update_theta_examples() {
        let log = ClickLog {
            records: vec![rec(1, 0, true), rec(1, 0, true), rec(2, 0, true), rec(2, 0, false)],
            signatures: vec![OutlierSignature::empty()],
            sessions: 2,
            depth: 2,
        };
        let (t, scale) = update_theta(&log, &[0.0, 0.0, 0.0, 0.5], 1e-6, false).unwrap();
        assert_eq!(t.get(1, &OutlierSignature::empty()), Some(1.0));
        assert_eq!(t.get(2, &OutlierSignature::empty()), Some(0.75));
        assert_eq!(scale, 1.0);
    }

    #[test]
    fn anchor_rescales_without_changing_ratios() {
        let log = ClickLog {
            records: vec![
                rec(1, 0, false),
                rec(2, 0, false),
                rec(2, 1, false),
                rec(3, 1, false),
            ],
            signatures: vec![OutlierSignature::empty(), OutlierSignature::single(2).unwrap()],
            sessions: 2,
            depth: 3,
        };
        let pe = [0.8, 0.4, 0.6, 0.2];
        let (raw, _) = update_theta(&log, &pe, 1e-6, false).unwrap();
        let (anch, scale) = update_theta(&log, &pe, 1e-6, true).unwrap();
        assert!((scale - 1.25).abs() < 1e-12);
        assert_eq!(anch.get(1, &OutlierSignature::empty()), Some(1.0));
        let cells: Vec<_> = raw.iter().map(|(k, s, v)| (k, s.clone(), v)).collect();
        for (k1, s1, v1) in &cells {
            for (k2, s2, v2) in &cells {
                let r_raw = v1 / v2;
                let r_anch = anch.get(*k1, s1).unwrap() / anch.get(*k2, s2).unwrap();
                assert!((r_raw - r_anch).abs() < 1e-12);
            }
        }
        let argmax = |t: &PropensityTable| {
            t.iter()
                .max_by(|a, b| a.2.total_cmp(&b.2))
                .map(|(k, s, _)| (k, s.clone()))
        };
        assert_eq!(argmax(&raw), argmax(&anch));
    }

    #[test]
    fn floor_applies() {
        let log = ClickLog {
            records: vec![rec(1, 0, false)],
            signatures: vec![OutlierSignature::empty()],
            sessions: 1,
            depth: 1,
        };
        let (t, _) = update_theta(&log, &[0.0], 1e-6, false).unwrap();
        assert_eq!(t.get(1, &OutlierSignature::empty()), Some(1e-6));
    }

    #[test]
    fn config_validation() {
        let bad = EmConfig {
            theta_floor: 0.2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(EmConfig::default().validate().is_ok());
    }

    #[test]
    fn initial_theta_avoids_the_fixed_point() {
        assert_eq!(initial_theta(1, &OutlierSignature::empty()), 1.0);
        assert_eq!(initial_theta(1, &OutlierSignature::single(3).unwrap()), 0.5);
        assert_eq!(initial_theta(4, &OutlierSignature::single(3).unwrap()), 0.25);
    }
}
