//! Pointwise relevance learners with a weighted logistic loss.
//!
//! Training rows carry a positive and a negative weight, so a row can stand
//! for many log records of the same document (`pos` = mass labelled 1,
//! `neg` = mass labelled 0). Cross-entropy is linear in the label, which makes
//! this exact for aggregated, fractional or sampled labels alike.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLAMP: f64 = 1e-6;
const FORMAT_HEADER: &str = "opbm-model v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    BoostedStumps,
    LogisticLinear,
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boosted_stumps" | "gbdt" => Ok(LearnerKind::BoostedStumps),
            "logistic_linear" | "linear" => Ok(LearnerKind::LogisticLinear),
            other => Err(Error::Unknown {
                kind: "learner",
                name: other.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub learner: LearnerKind,
    pub rounds: usize,
    pub learning_rate: f64,
    /// Leaves per tree; 2 gives stumps.
    pub max_leaves: usize,
    /// L2 penalty on leaf values.
    pub l2: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            learner: LearnerKind::BoostedStumps,
            rounds: 100,
            learning_rate: 0.1,
            max_leaves: 2,
            l2: 1.0,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("regression rounds must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(2..=64).contains(&self.max_leaves) {
            return Err(Error::Config("max_leaves must be in [2, 64]".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config("l2 must be >= 0".into()));
        }
        Ok(())
    }
}

/// Rows with per-row positive and negative label mass.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub rows: Vec<Vec<f64>>,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl TrainingSet {
    pub fn with_capacity(n: usize) -> Self {
        TrainingSet {
            rows: Vec::with_capacity(n),
            pos: Vec::with_capacity(n),
            neg: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, x: Vec<f64>, pos: f64, neg: f64) {
        self.rows.push(x);
        self.pos.push(pos);
        self.neg.push(neg);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

/// Regression tree over raw margins; rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Trees { base: f64, trees: Vec<Tree> },
    Linear { bias: f64, weights: Vec<f64> },
}

/// A fitted function from feature vectors to a clamped probability of relevance.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceModel {
    pub params: ModelParams,
    pub feature_dim: usize,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl RelevanceModel {
    /// Predicts `p` everywhere.
    pub fn constant(p: f64, feature_dim: usize) -> Self {
        let p = p.clamp(DEFAULT_CLAMP, 1.0 - DEFAULT_CLAMP);
        RelevanceModel {
            params: ModelParams::Trees {
                base: logit(p),
                trees: Vec::new(),
            },
            feature_dim,
            clamp_lo: DEFAULT_CLAMP,
            clamp_hi: 1.0 - DEFAULT_CLAMP,
        }
    }

    pub fn is_constant(&self) -> bool {
        match &self.params {
            ModelParams::Trees { trees, .. } => trees.is_empty(),
            ModelParams::Linear { weights, .. } => weights.iter().all(|w| *w == 0.0),
        }
    }

    pub fn margin(&self, x: &[f64]) -> f64 {
        match &self.params {
            ModelParams::Trees { base, trees } => {
                base + trees.iter().map(|t| t.predict(x)).sum::<f64>()
            }
            ModelParams::Linear { bias, weights } => {
                bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.margin(x)).clamp(self.clamp_lo, self.clamp_hi)
    }

    pub fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{FORMAT_HEADER}").unwrap();
        writeln!(out, "feature_dim {}", self.feature_dim).unwrap();
        writeln!(out, "clamp {} {}", self.clamp_lo, self.clamp_hi).unwrap();
        match &self.params {
            ModelParams::Trees { base, trees } => {
                writeln!(out, "learner boosted_stumps").unwrap();
                writeln!(out, "base {base}").unwrap();
                writeln!(out, "trees {}", trees.len()).unwrap();
                for tree in trees {
                    writeln!(out, "tree {}", tree.nodes.len()).unwrap();
                    for node in &tree.nodes {
                        match node {
                            Node::Leaf(v) => writeln!(out, "leaf {v}").unwrap(),
                            Node::Split {
                                feature,
                                threshold,
                                left,
                                right,
                            } => writeln!(out, "split {feature} {threshold} {left} {right}").unwrap(),
                        }
                    }
                }
            }
            ModelParams::Linear { bias, weights } => {
                writeln!(out, "learner logistic_linear").unwrap();
                writeln!(out, "bias {bias}").unwrap();
                let w: Vec<String> = weights.iter().map(|w| w.to_string()).collect();
                writeln!(out, "weights {}", w.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .enumerate()
            .filter(|(_, l)| !l.is_empty());
        fn take<'a>(
            lines: &mut impl Iterator<Item = (usize, &'a str)>,
            key: &str,
        ) -> Result<(usize, Vec<&'a str>)> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::Model(format!("unexpected end of file, expected {key}")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(Error::Model(format!("line {}: expected {key}", i + 1)));
            }
            Ok((i + 1, parts.collect()))
        }
        fn num<T: std::str::FromStr>(line: usize, s: Option<&&str>) -> Result<T> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Model(format!("line {line}: bad number")))
        }

        let header = text.lines().find(|l| !l.trim().is_empty()).map(str::trim);
        if header != Some(FORMAT_HEADER) {
            return Err(Error::Model(format!("expected header {FORMAT_HEADER:?}")));
        }
        // consume header
        let _ = take(&mut lines, "opbm-model")?;
        let (l, v) = take(&mut lines, "feature_dim")?;
        let feature_dim: usize = num(l, v.first())?;
        let (l, v) = take(&mut lines, "clamp")?;
        let clamp_lo: f64 = num(l, v.first())?;
        let clamp_hi: f64 = num(l, v.get(1))?;
        let (l, v) = take(&mut lines, "learner")?;
        let params = match v.first().copied() {
            Some("boosted_stumps") => {
                let (l, v) = take(&mut lines, "base")?;
                let base: f64 = num(l, v.first())?;
                let (l, v) = take(&mut lines, "trees")?;
                let n_trees: usize = num(l, v.first())?;
                let mut trees = Vec::with_capacity(n_trees);
                for _ in 0..n_trees {
                    let (l, v) = take(&mut lines, "tree")?;
                    let n_nodes: usize = num(l, v.first())?;
                    let mut nodes = Vec::with_capacity(n_nodes);
                    for _ in 0..n_nodes {
                        let (i, line) = lines
                            .next()
                            .ok_or_else(|| Error::Model("truncated tree".into()))?;
                        let parts: Vec<&str> = line.split_whitespace().collect();
                        let node = match parts.first().copied() {
                            Some("leaf") => Node::Leaf(num(i + 1, parts.get(1))?),
                            Some("split") => Node::Split {
                                feature: num(i + 1, parts.get(1))?,
                                threshold: num(i + 1, parts.get(2))?,
                                left: num(i + 1, parts.get(3))?,
                                right: num(i + 1, parts.get(4))?,
                            },
                            _ => return Err(Error::Model(format!("line {}: bad node", i + 1))),
                        };
                        if let Node::Split {
                            feature,
                            left,
                            right,
                            ..
                        } = node
                        {
                            if feature >= feature_dim || left >= n_nodes || right >= n_nodes {
                                return Err(Error::Model(format!(
                                    "line {}: node index out of range",
                                    i + 1
                                )));
                            }
                        }
                        nodes.push(node);
                    }
                    trees.push(Tree { nodes });
                }
                ModelParams::Trees { base, trees }
            }
            Some("logistic_linear") => {
                let (l, v) = take(&mut lines, "bias")?;
                let bias: f64 = num(l, v.first())?;
                let (l, v) = take(&mut lines, "weights")?;
                let weights = v
                    .iter()
                    .map(|w| w.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Model(format!("line {l}: bad weight")))?;
                if weights.len() != feature_dim {
                    return Err(Error::Model(format!(
                        "line {l}: {} weights for feature_dim {feature_dim}",
                        weights.len()
                    )));
                }
                ModelParams::Linear { bias, weights }
            }
            _ => return Err(Error::Model(format!("line {l}: unknown learner"))),
        };
        if !(0.0 < clamp_lo && clamp_lo < clamp_hi && clamp_hi < 1.0) {
            return Err(Error::Model("clamp bounds must satisfy 0 < lo < hi < 1".into()));
        }
        Ok(RelevanceModel {
            params,
            feature_dim,
            clamp_lo,
            clamp_hi,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Weighted cross-entropy of a model on a training set, per unit of mass.
pub fn mean_log_loss(model: &RelevanceModel, data: &TrainingSet) -> f64 {
    let mut loss = 0.0;
    let mut mass = 0.0;
    for ((x, &p), &n) in data.rows.iter().zip(&data.pos).zip(&data.neg) {
        let f = model.predict(x);
        loss -= p * f.ln() + n * (1.0 - f).ln();
        mass += p + n;
    }
    if mass > 0.0 {
        loss / mass
    } else {
        0.0
    }
}

/// Fits a relevance model. A set whose labels are all identical yields a
/// constant model and a warning.
pub fn fit(data: &TrainingSet, feature_dim: usize, config: &RegressionConfig) -> Result<RelevanceModel> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for (i, x) in data.rows.iter().enumerate() {
        if x.len() != feature_dim {
            return Err(Error::DimensionMismatch {
                expected: feature_dim,
                got: x.len(),
            });
        }
        let (p, n) = (data.pos[i], data.neg[i]);
        if !(p >= 0.0 && n >= 0.0 && p.is_finite() && n.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "row {i}: label mass must be finite and non-negative"
            )));
        }
    }
    let total_pos: f64 = data.pos.iter().sum();
    let total_neg: f64 = data.neg.iter().sum();
    if total_pos + total_neg <= 0.0 {
        return Err(Error::InvalidArgument("training set has no label mass".into()));
    }
    let base_rate = total_pos / (total_pos + total_neg);
    if total_pos == 0.0 || total_neg == 0.0 {
        log::warn!("all training labels identical (rate {base_rate}); returning constant model");
        return Ok(RelevanceModel::constant(base_rate, feature_dim));
    }
    Ok(match config.learner {
        LearnerKind::BoostedStumps => fit_trees(data, feature_dim, base_rate, config),
        LearnerKind::LogisticLinear => fit_linear(data, feature_dim, base_rate, config),
    })
}

struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    g_left: f64,
    h_left: f64,
}

fn fit_trees(
    data: &TrainingSet,
    dim: usize,
    base_rate: f64,
    config: &RegressionConfig,
) -> RelevanceModel {
    let n = data.len();
    let clamp = DEFAULT_CLAMP;
    let base = logit(base_rate.clamp(clamp, 1.0 - clamp));
    let mass: Vec<f64> = data.pos.iter().zip(&data.neg).map(|(p, q)| p + q).collect();

    // Row order per feature, ties broken by row index.
    let sorted: Vec<Vec<usize>> = (0..dim)
        .into_par_iter()
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                data.rows[a][f]
                    .total_cmp(&data.rows[b][f])
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    let mut margin = vec![base; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut node_of = vec![0usize; n];
    let mut trees = Vec::with_capacity(config.rounds);
    let lambda = config.l2;
    let min_hess = 1e-6;

    for _ in 0..config.rounds {
        for i in 0..n {
            let p = sigmoid(margin[i]);
            grad[i] = mass[i] * p - data.pos[i];
            hess[i] = (mass[i] * p * (1.0 - p)).max(1e-12);
        }

        // Leaf-wise growth: nodes[leaf] holds its (G, H) until split.
        let mut nodes: Vec<Node> = vec![Node::Leaf(0.0)];
        let mut stats: Vec<(f64, f64)> = vec![(grad.iter().sum(), hess.iter().sum())];
        node_of.iter_mut().for_each(|v| *v = 0);
        let mut open: Vec<usize> = vec![0];
        let mut leaves = 1;

        let best_split = |node: usize, node_of: &[usize], stats: &[(f64, f64)]| {
            let (g_tot, h_tot) = stats[node];
            let parent = g_tot * g_tot / (h_tot + lambda);
            (0..dim)
                .into_par_iter()
                .filter_map(|f| {
                    let mut g_l = 0.0;
                    let mut h_l = 0.0;
                    let mut best: Option<SplitCandidate> = None;
                    let mut prev: Option<f64> = None;
                    for &i in &sorted[f] {
                        if node_of[i] != node {
                            continue;
                        }
                        let v = data.rows[i][f];
                        if let Some(pv) = prev {
                            if v > pv && h_l >= min_hess && h_tot - h_l >= min_hess {
                                let g_r = g_tot - g_l;
                                let h_r = h_tot - h_l;
                                let gain = g_l * g_l / (h_l + lambda) + g_r * g_r / (h_r + lambda)
                                    - parent;
                                if best.as_ref().is_none_or(|b| gain > b.gain) {
                                    best = Some(SplitCandidate {
                                        gain,
                                        feature: f,
                                        threshold: pv + (v - pv) / 2.0,
                                        g_left: g_l,
                                        h_left: h_l,
                                    });
                                }
                            }
                        }
                        g_l += grad[i];
                        h_l += hess[i];
                        prev = Some(v);
                    }
                    best
                })
                .reduce_with(|a, b| {
                    if b.gain > a.gain || (b.gain == a.gain && b.feature < a.feature) {
                        b
                    } else {
                        a
                    }
                })
                .filter(|c| c.gain > 1e-12)
        };

        let mut candidates: Vec<Option<SplitCandidate>> = vec![best_split(0, &node_of, &stats)];
        while leaves < config.max_leaves {
            // Pick the open leaf with the largest gain, lowest index on ties.
            let pick = open
                .iter()
                .enumerate()
                .filter_map(|(slot, &node)| candidates[node].as_ref().map(|c| (slot, node, c.gain)))
                .fold(None::<(usize, usize, f64)>, |acc, cur| match acc {
                    Some(a) if a.2 >= cur.2 => Some(a),
                    _ => Some(cur),
                });
            let Some((slot, node, _)) = pick else { break };
            let cand = candidates[node].take().expect("picked candidate");
            let (g_tot, h_tot) = stats[node];
            let left = nodes.len();
            let right = left + 1;
            nodes.push(Node::Leaf(0.0));
            nodes.push(Node::Leaf(0.0));
            stats.push((cand.g_left, cand.h_left));
            stats.push((g_tot - cand.g_left, h_tot - cand.h_left));
            nodes[node] = Node::Split {
                feature: cand.feature,
                threshold: cand.threshold,
                left,
                right,
            };
            for i in 0..n {
                if node_of[i] == node {
                    node_of[i] = if data.rows[i][cand.feature] <= cand.threshold {
                        left
                    } else {
                        right
                    };
                }
            }
            open.swap_remove(slot);
            open.push(left);
            open.push(right);
            leaves += 1;
            candidates.push(None);
            candidates.push(None);
            if leaves < config.max_leaves {
                candidates[left] = best_split(left, &node_of, &stats);
                candidates[right] = best_split(right, &node_of, &stats);
            }
        }

        if leaves == 1 {
            // No useful split remains.
            break;
        }
        for (idx, node) in nodes.iter_mut().enumerate() {
            if let Node::Leaf(v) = node {
                let (g, h) = stats[idx];
                *v = -config.learning_rate * g / (h + lambda);
            }
        }
        let tree = Tree { nodes };
        for i in 0..n {
            margin[i] += tree.predict(&data.rows[i]);
        }
        trees.push(tree);
    }

    RelevanceModel {
        params: ModelParams::Trees { base, trees },
        feature_dim: dim,
        clamp_lo: clamp,
        clamp_hi: 1.0 - clamp,
    }
}

/// Damped Newton iterations on the weighted logistic loss with a small ridge.
fn fit_linear(
    data: &TrainingSet,
    dim: usize,
    base_rate: f64,
    config: &RegressionConfig,
) -> RelevanceModel {
    let p_dim = dim + 1;
    let mut beta = vec![0.0; p_dim];
    beta[0] = logit(base_rate.clamp(DEFAULT_CLAMP, 1.0 - DEFAULT_CLAMP));
    let ridge = 1e-6 * data.pos.iter().zip(&data.neg).map(|(a, b)| a + b).sum::<f64>() / data.len() as f64;

    for _ in 0..config.rounds {
        let mut g = vec![0.0; p_dim];
        let mut h = vec![vec![0.0; p_dim]; p_dim];
        for (i, x) in data.rows.iter().enumerate() {
            let z = beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
            let p = sigmoid(z);
            let m = data.pos[i] + data.neg[i];
            let r = m * p - data.pos[i];
            let w = (m * p * (1.0 - p)).max(1e-12);
            let xi = |j: usize| if j == 0 { 1.0 } else { x[j - 1] };
            for a in 0..p_dim {
                g[a] += r * xi(a);
                for b in a..p_dim {
                    h[a][b] += w * xi(a) * xi(b);
                }
            }
        }
        for a in 0..p_dim {
            g[a] += ridge * beta[a];
            h[a][a] += ridge + 1e-12;
            for b in 0..a {
                h[a][b] = h[b][a];
            }
        }
        let Some(step) = solve(h, g) else { break };
        let mut max_step: f64 = 0.0;
        for (b, s) in beta.iter_mut().zip(&step) {
            *b -= s;
            max_step = max_step.max(s.abs());
        }
        if max_step < 1e-10 {
            break;
        }
    }

    RelevanceModel {
        params: ModelParams::Linear {
            bias: beta[0],
            weights: beta[1..].to_vec(),
        },
        feature_dim: dim,
        clamp_lo: DEFAULT_CLAMP,
        clamp_hi: 1.0 - DEFAULT_CLAMP,
    }
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}
