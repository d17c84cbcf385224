//! Observational analyses of click logs: CTR per position, CTR curves grouped
//! by outlier position, and outlier versus non-outlier page summaries.
//!
//! A ranking (or page) is a (query, signature) pair. Simulated logs present
//! each query with one signature, so a page aggregates every session of that
//! query.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clicksim::ClickLog;
use crate::error::{Error, Result};
use crate::eval::{ctr, t_test_two_sample};

/// Default minimum share of rankings a group needs to get its own curve.
pub const DEFAULT_MIN_SUPPORT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtrCell {
    pub rank: usize,
    pub clicks: u64,
    pub impressions: u64,
    pub ctr: f64,
}

/// One CTR-versus-rank series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrCurve {
    pub group: String,
    /// Ranks with at least one impression, ascending.
    pub cells: Vec<CtrCell>,
}

impl CtrCurve {
    pub fn at(&self, rank: usize) -> Option<&CtrCell> {
        self.cells.iter().find(|c| c.rank == rank)
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrBreakdown {
    /// Every impression, regardless of outliers.
    pub per_rank: CtrCurve,
    /// Items that are outliers at their rank.
    pub outlier: CtrCurve,
    /// Items of normal rankings, the position-matched baseline.
    pub non_outlier: CtrCurve,
    /// Per-group curves from [`ctr_by_outlier_group`]; empty otherwise.
    pub groups: Vec<CtrCurve>,
    /// Single-outlier groups left out for lack of support.
    pub suppressed_groups: usize,
}

impl CtrBreakdown {
    /// Tidy CSV `rank,group,clicks,impressions,ctr` over all series.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,group,clicks,impressions,ctr\n");
        let series = [&self.per_rank, &self.outlier, &self.non_outlier]
            .into_iter()
            .chain(self.groups.iter());
        for curve in series {
            for c in &curve.cells {
                writeln!(out, "{},{},{},{},{}", c.rank, curve.group, c.clicks, c.impressions, c.ctr).unwrap();
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Default, Clone, Copy)]
struct Tally {
    clicks: u64,
    impressions: u64,
}

impl Tally {
    fn add(&mut self, click: bool) {
        self.clicks += u64::from(click);
        self.impressions += 1;
    }
}

fn curve(group: impl Into<String>, tallies: &BTreeMap<usize, Tally>) -> Result<CtrCurve> {
    let cells = tallies
        .iter()
        .map(|(&rank, t)| {
            Ok(CtrCell {
                rank,
                clicks: t.clicks,
                impressions: t.impressions,
                ctr: ctr(t.clicks, t.impressions)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CtrCurve {
        group: group.into(),
        cells,
    })
}

fn require_nonempty(log: &ClickLog) -> Result<()> {
    if log.records.iter().any(|r| r.impression) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("click log has no impressions".into()))
    }
}

/// Per-rank CTR over all impressions, over outlier items, and over items of
/// normal rankings.
pub fn ctr_per_position(log: &ClickLog) -> Result<CtrBreakdown> {
    require_nonempty(log)?;
    let mut all: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut outlier: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut normal: BTreeMap<usize, Tally> = BTreeMap::new();
    for r in log.records.iter().filter(|r| r.impression) {
        let k = usize::from(r.rank);
        let sig = log.signature(r);
        all.entry(k).or_default().add(r.click);
        if sig.contains(k) {
            outlier.entry(k).or_default().add(r.click);
        } else if sig.is_empty() {
            normal.entry(k).or_default().add(r.click);
        }
    }
    Ok(CtrBreakdown {
        per_rank: curve("all", &all)?,
        outlier: curve("outlier", &outlier)?,
        non_outlier: curve("non_outlier", &normal)?,
        groups: Vec::new(),
        suppressed_groups: 0,
    })
}

/// Adds one curve per single-outlier position with at least
/// `min_support_fraction` of all rankings, plus the normal-ranking curve.
/// Rankings with several outliers belong to no group.
pub fn ctr_by_outlier_group(log: &ClickLog, min_support_fraction: f64) -> Result<CtrBreakdown> {
    if !(0.0..=1.0).contains(&min_support_fraction) {
        return Err(Error::InvalidArgument("min_support_fraction outside [0, 1]".into()));
    }
    let mut breakdown = ctr_per_position(log)?;

    let mut rankings: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut per_group: BTreeMap<usize, (BTreeSet<(u32, u32)>, BTreeMap<usize, Tally>)> = BTreeMap::new();
    let mut normal: BTreeMap<usize, Tally> = BTreeMap::new();
    for r in log.records.iter().filter(|r| r.impression) {
        rankings.insert((r.query, r.signature));
        let sig = log.signature(r);
        let k = usize::from(r.rank);
        match sig.positions() {
            [] => normal.entry(k).or_default().add(r.click),
            &[o] => {
                let g = per_group.entry(o).or_default();
                g.0.insert((r.query, r.signature));
                g.1.entry(k).or_default().add(r.click);
            }
            _ => {}
        }
    }

    let total = rankings.len() as f64;
    let mut groups = vec![curve("normal", &normal)?];
    let mut suppressed = 0;
    for (o, (members, tallies)) in &per_group {
        if (members.len() as f64) < min_support_fraction * total {
            suppressed += 1;
            continue;
        }
        groups.push(curve(format!("outlier_at_{o}"), tallies)?);
    }
    breakdown.groups = groups;
    breakdown.suppressed_groups = suppressed;
    Ok(breakdown)
}

/// Per-class page averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub avg_clicks: f64,
    pub avg_impressions: f64,
    pub avg_ctr: f64,
    /// Pages contributing to the averages.
    pub pages: usize,
}

/// Click totals per class; they add up to the log's clicks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTotals {
    pub outlier_clicks: u64,
    pub non_outlier_clicks: u64,
    pub normal_ranking_clicks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSummary {
    pub outlier: ClassMeans,
    pub non_outlier: ClassMeans,
    /// Pooled t-test on per-page average clicks, outlier minus non-outlier.
    /// Absent when either class has fewer than two pages.
    pub clicks_test: Option<Significance>,
    /// Same for per-page CTR.
    pub ctr_test: Option<Significance>,
    pub totals: ClassTotals,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub t: f64,
    pub p: f64,
}

impl OutlierSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Default)]
struct Page {
    outlier: Tally,
    outlier_items: BTreeMap<u32, ()>,
    other: Tally,
    other_items: BTreeMap<u32, ()>,
}

/// Compares outlier items with the other items of abnormal rankings.
///
/// Within each abnormal page, a class's average clicks and impressions are
/// per item and its CTR is clicks over impressions; these page values are
/// averaged over pages and compared with a pooled Student's t-test.
pub fn outlier_vs_nonoutlier_summary(log: &ClickLog) -> Result<OutlierSummary> {
    require_nonempty(log)?;
    let mut pages: BTreeMap<(u32, u32), Page> = BTreeMap::new();
    let mut totals = ClassTotals {
        outlier_clicks: 0,
        non_outlier_clicks: 0,
        normal_ranking_clicks: 0,
    };
    for r in log.records.iter().filter(|r| r.impression) {
        let sig = log.signature(r);
        let click = u64::from(r.click);
        if sig.is_empty() {
            totals.normal_ranking_clicks += click;
            continue;
        }
        let page = pages.entry((r.query, r.signature)).or_default();
        if sig.contains(usize::from(r.rank)) {
            totals.outlier_clicks += click;
            page.outlier.add(r.click);
            page.outlier_items.insert(r.doc, ());
        } else {
            totals.non_outlier_clicks += click;
            page.other.add(r.click);
            page.other_items.insert(r.doc, ());
        }
    }
    if pages.is_empty() {
        return Err(Error::NoAbnormalRankings);
    }

    // (avg clicks, avg impressions, ctr) per page and class.
    let mut out_rows = Vec::with_capacity(pages.len());
    let mut other_rows = Vec::with_capacity(pages.len());
    for page in pages.values() {
        for (tally, items, rows) in [
            (page.outlier, page.outlier_items.len(), &mut out_rows),
            (page.other, page.other_items.len(), &mut other_rows),
        ] {
            if tally.impressions > 0 {
                let n = items as f64;
                rows.push((
                    tally.clicks as f64 / n,
                    tally.impressions as f64 / n,
                    ctr::<f64>(tally.clicks, tally.impressions)?,
                ));
            }
        }
    }
    let means = |rows: &[(f64, f64, f64)]| {
        let n = rows.len().max(1) as f64;
        ClassMeans {
            avg_clicks: rows.iter().map(|r| r.0).sum::<f64>() / n,
            avg_impressions: rows.iter().map(|r| r.1).sum::<f64>() / n,
            avg_ctr: rows.iter().map(|r| r.2).sum::<f64>() / n,
            pages: rows.len(),
        }
    };
    let column = |rows: &[(f64, f64, f64)], f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let test = |f: fn(&(f64, f64, f64)) -> f64| -> Result<Option<Significance>> {
        if out_rows.len() < 2 || other_rows.len() < 2 {
            return Ok(None);
        }
        let r = t_test_two_sample(&column(&out_rows, f), &column(&other_rows, f))?;
        Ok(Some(Significance { t: r.t, p: r.p }))
    };
    let clicks_test = test(|r| r.0)?;
    let ctr_test = test(|r| r.2)?;
    Ok(OutlierSummary {
        outlier: means(&out_rows),
        non_outlier: means(&other_rows),
        clicks_test,
        ctr_test,
        totals,
    })
}
