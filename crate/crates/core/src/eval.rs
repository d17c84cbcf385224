//! Ranking metrics, cross-entropy of corrected clicks and two-sample t-tests.

use serde::{Deserialize, Serialize};

use crate::clicksim::ClickLog;
use crate::corpus::{binarize, RankingCorpus};
use crate::error::{Error, Result};
use crate::ranker::{corrected_clicks, EstimatorSpec};
use crate::scalar::Scalar;

pub const DEFAULT_CE_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    /// `2^g - 1` on the original grade.
    #[default]
    Graded,
    /// `2^r - 1` on the binarized grade, i.e. 0 or 1.
    Binary,
}

fn gain<T: Scalar>(grade: i32, mode: GainMode) -> T {
    let g = match mode {
        GainMode::Graded => grade,
        GainMode::Binary => i32::from(grade > 2),
    };
    T::lit(2.0).powi(g) - T::one()
}

fn dcg<T: Scalar>(grades: &[i32], k: usize, mode: GainMode) -> T {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain::<T>(g, mode) / T::count(i + 2).log2())
        .sum()
}

/// NDCG@k with `2^g - 1` gains and `log2(i + 1)` discounts.
///
/// The ideal DCG sorts `ideal_grades` in descending order. Queries with no
/// positive gain score 0.
pub fn ndcg_at_k<T: Scalar>(ranked_grades: &[i32], ideal_grades: &[i32], k: usize) -> Result<T> {
    ndcg_at_k_with(ranked_grades, ideal_grades, k, GainMode::Graded)
}

pub fn ndcg_at_k_with<T: Scalar>(
    ranked_grades: &[i32],
    ideal_grades: &[i32],
    k: usize,
    mode: GainMode,
) -> Result<T> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if ranked_grades.iter().chain(ideal_grades).any(|&g| g < 0) {
        return Err(Error::InvalidArgument("negative grade".into()));
    }
    let mut ideal = ideal_grades.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: T = dcg(&ideal, k, mode);
    if idcg <= T::zero() {
        return Ok(T::zero());
    }
    Ok(dcg::<T>(ranked_grades, k, mode) / idcg)
}

/// Mean NDCG@k over queries given per-query rankings of document indices.
pub fn mean_ndcg(
    corpus: &RankingCorpus,
    ranked: &[Vec<(usize, f64)>],
    k: usize,
    mode: GainMode,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for (q, list) in corpus.queries.iter().zip(ranked) {
        let grades: Vec<i32> = list
            .iter()
            .map(|&(d, _)| i32::from(q.documents[d].grade))
            .collect();
        let ideal: Vec<i32> = q.documents.iter().map(|d| i32::from(d.grade)).collect();
        total += ndcg_at_k_with::<f64>(&grades, &ideal, k, mode)?;
    }
    Ok(total / corpus.n_queries() as f64)
}

/// Mean of `-[y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[eps, 1 - eps]`.
pub fn mean_binary_ce<T: Scalar>(predictions: &[T], labels: &[u8], clamp_eps: T) -> Result<T> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: predictions.len(),
            got: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    if !(clamp_eps > T::zero() && clamp_eps < T::lit(0.5)) {
        return Err(Error::InvalidArgument("clamp_eps must be in (0, 0.5)".into()));
    }
    let hi = T::one() - clamp_eps;
    let mut total = T::zero();
    for (&p, &y) in predictions.iter().zip(labels) {
        if p.is_nan() {
            return Err(Error::InvalidArgument("NaN prediction".into()));
        }
        let p = p.max(clamp_eps).min(hi);
        total = total
            - if y > 0 {
                p.ln()
            } else {
                (T::one() - p).ln()
            };
    }
    Ok(total / T::count(predictions.len()))
}

/// Mean CE between per-document corrected clicks and binarized true relevance.
///
/// Each logged (query, document) contributes its mean corrected click over
/// its impressions, the IPS estimate of its relevance.
pub fn corrected_click_ce(
    log: &ClickLog,
    corpus: &RankingCorpus,
    spec: &EstimatorSpec,
    clamp_eps: f64,
) -> Result<f64> {
    let cells = corrected_clicks(log, spec)?;
    let mut preds = Vec::with_capacity(cells.len());
    let mut labels = Vec::with_capacity(cells.len());
    for (&(q, d), cell) in &cells {
        preds.push(cell.estimate());
        labels.push(binarize(corpus.queries[q as usize].documents[d as usize].grade)?);
    }
    mean_binary_ce(&preds, &labels, clamp_eps)
}

/// Click-through rate; zero impressions give 0.
pub fn ctr<T: Scalar>(clicks: u64, impressions: u64) -> Result<T> {
    if clicks > impressions {
        return Err(Error::InvalidArgument(format!(
            "{clicks} clicks exceed {impressions} impressions"
        )));
    }
    if impressions == 0 {
        return Ok(T::zero());
    }
    Ok(T::lit(clicks as f64) / T::lit(impressions as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variance {
    #[default]
    Pooled,
    Welch,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided two-sample Student's t-test with pooled variance.
pub fn t_test_two_sample(a: &[f64], b: &[f64]) -> Result<TTest> {
    t_test(a, b, Variance::Pooled)
}

/// Two-sided two-sample t-test.
///
/// Zero variance with equal means gives `t = 0, p = 1`; zero variance with
/// different means gives `t = +-inf, p = 0`.
pub fn t_test(a: &[f64], b: &[f64], variance: Variance) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("each sample needs at least 2 values".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite sample value".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (se, df) = match variance {
        Variance::Pooled => {
            let df = na + nb - 2.0;
            let sp = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            ((sp * (1.0 / na + 1.0 / nb)).sqrt(), df)
        }
        Variance::Welch => {
            let (sa, sb) = (va / na, vb / nb);
            let se2 = sa + sb;
            let df = if se2 > 0.0 {
                se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0))
            } else {
                na + nb - 2.0
            };
            (se2.sqrt(), df)
        }
    };
    let diff = ma - mb;
    if se == 0.0 {
        return Ok(if diff == 0.0 {
            TTest { t: 0.0, p: 1.0, df }
        } else {
            TTest {
                t: diff.signum() * f64::INFINITY,
                p: 0.0,
                df,
            }
        });
    }
    let t = diff / se;
    Ok(TTest {
        t,
        p: student_t_two_sided(t, df),
        df,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - front * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 1000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

pub const METRIC_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub estimator: String,
    pub k: usize,
    pub ndcg_at_k: f64,
    pub mean_ce: f64,
    pub n_queries: usize,
    pub n_records: usize,
    pub seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "schema_version,estimator,k,ndcg_at_k,mean_ce,n_queries,n_records,seed";

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ndcg_at_k) {
            return Err(Error::InvalidArgument("ndcg outside [0, 1]".into()));
        }
        if !self.mean_ce.is_finite() || self.mean_ce < 0.0 {
            return Err(Error::InvalidArgument("mean_ce must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.schema_version,
            self.estimator,
            self.k,
            self.ndcg_at_k,
            self.mean_ce,
            self.n_queries,
            self.n_records,
            self.seed
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn permutations(items: &[i32]) -> Vec<Vec<i32>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }

    fn brute_dcg(grades: &[i32], k: usize) -> f64 {
        let mut s = 0.0;
        for (i, &g) in grades.iter().enumerate().take(k) {
            s += (2f64.powi(g) - 1.0) / ((i + 2) as f64).log2();
        }
        s
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k::<f64>(&[3, 2, 1, 0], &[0, 1, 2, 3], 4).unwrap(), 1.0);
        let v: f64 = ndcg_at_k(&[0, 1], &[1, 0], 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_k::<f64>(&[0, 0, 0], &[0, 0, 0], 3).unwrap(), 0.0);
        assert!(ndcg_at_k::<f64>(&[1], &[1], 0).is_err());
        assert!(ndcg_at_k::<f64>(&[-1], &[1], 1).is_err());
        let f: f32 = ndcg_at_k(&[0, 1], &[1, 0], 2).unwrap();
        assert!((f64::from(f) - 0.63093).abs() < 1e-5);
    }

    #[test]
    fn binary_gains_ignore_grade_magnitude() {
        let g: f64 = ndcg_at_k_with(&[3, 4], &[4, 3], 2, GainMode::Binary).unwrap();
        assert!((g - 1.0).abs() < 1e-15);
        let h: f64 = ndcg_at_k_with(&[3, 4], &[4, 3], 2, GainMode::Graded).unwrap();
        assert!(h < 1.0);
    }

    proptest! {
        #[test]
        fn ndcg_matches_permutation_brute_force(
            grades in prop::collection::vec(0i32..5, 1..=6),
            k in 1usize..8,
            perm_seed in any::<u64>(),
        ) {
            let perms = permutations(&grades);
            let ranked = &perms[(perm_seed % perms.len() as u64) as usize];
            let ideal = perms.iter().map(|p| brute_dcg(p, k)).fold(0.0, f64::max);
            let expected = if ideal > 0.0 { brute_dcg(ranked, k) / ideal } else { 0.0 };
            let got: f64 = ndcg_at_k(ranked, &grades, k).unwrap();
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn appending_zero_grades_past_k_is_neutral(
            grades in prop::collection::vec(0i32..5, 1..8),
            extra in 0usize..5,
        ) {
            let k = grades.len();
            let mut longer = grades.clone();
            longer.extend(std::iter::repeat_n(0, extra));
            let a: f64 = ndcg_at_k(&grades, &grades, k).unwrap();
            let b: f64 = ndcg_at_k(&longer, &longer, k).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ce_minimized_at_label_mean(labels in prop::collection::vec(0u8..2, 2..40), delta in 0.01f64..0.3) {
            let mean = labels.iter().map(|&y| f64::from(y)).sum::<f64>() / labels.len() as f64;
            let at = |p: f64| mean_binary_ce(&vec![p; labels.len()], &labels, 1e-6).unwrap();
            let best = at(mean);
            prop_assert!(best <= at((mean + delta).min(1.0)) + 1e-12);
            prop_assert!(best <= at((mean - delta).max(0.0)) + 1e-12);
        }

        #[test]
        fn t_test_is_antisymmetric(
            a in prop::collection::vec(-10.0f64..10.0, 2..20),
            b in prop::collection::vec(-10.0f64..10.0, 2..20),
        ) {
            let ab = t_test_two_sample(&a, &b).unwrap();
            let ba = t_test_two_sample(&b, &a).unwrap();
            prop_assert_eq!(ab.t, -ba.t);
            prop_assert_eq!(ab.p, ba.p);
        }
    }

    #[test]
    fn ce_examples() {
        let ce = mean_binary_ce(&[0.0, 1.0, 1.0], &[0, 1, 1], 1e-6).unwrap();
        assert!((ce - (-(1.0f64 - 1e-6).ln())).abs() < 1e-15);
        let ce = mean_binary_ce(&[0.5, 0.5], &[0, 1], 1e-6).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        let ce = mean_binary_ce(&[3.0f64], &[1], 1e-6).unwrap();
        assert!((ce - 1e-6).abs() < 1e-9);
        assert!(mean_binary_ce::<f64>(&[], &[], 1e-6).is_err());
        assert!(mean_binary_ce(&[0.5], &[1, 0], 1e-6).is_err());
    }

    #[test]
    fn ctr_examples() {
        assert_eq!(ctr::<f64>(1, 2).unwrap(), 0.5);
        assert_eq!(ctr::<f64>(0, 0).unwrap(), 0.0);
        assert!(ctr::<f64>(3, 2).is_err());
    }

    #[test]
    fn t_test_degenerate_cases() {
        let a = [1.0, 2.0, 3.0];
        let r = t_test_two_sample(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = t_test_two_sample(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = t_test_two_sample(&[2.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(r.t.is_infinite() && r.t > 0.0);
        assert!(t_test_two_sample(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn huge_shift_is_significant() {
        let a: Vec<f64> = (0..10).map(|i| f64::from(i) * 0.1).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 1000.0 * 0.3).collect();
        assert!(t_test_two_sample(&a, &b).unwrap().p < 1e-6);
    }

    #[test]
    fn incomplete_beta_known_values() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a; I_x(1, b) = 1 - (1 - x)^b.
        for x in [0.1, 0.37, 0.5, 0.93] {
            assert!((regularized_incomplete_beta(x, 1.0, 1.0) - x).abs() < 1e-14);
            assert!((regularized_incomplete_beta(x, 3.5, 1.0) - x.powf(3.5)).abs() < 1e-13);
            assert!(
                (regularized_incomplete_beta(x, 1.0, 2.5) - (1.0 - (1.0 - x).powf(2.5))).abs()
                    < 1e-13
            );
        }
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn report_csv_and_json() {
        let r = MetricReport {
            schema_version: METRIC_SCHEMA_VERSION,
            estimator: "opbm".into(),
            k: 10,
            ndcg_at_k: 0.5,
            mean_ce: 0.25,
            n_queries: 3,
            n_records: 30,
            seed: 7,
        };
        r.validate().unwrap();
        assert_eq!(r.csv_row(), "1,opbm,10,0.5,0.25,3,30,7");
        assert_eq!(MetricReport::CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
