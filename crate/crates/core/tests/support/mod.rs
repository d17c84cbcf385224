//! Helpers shared by integration tests.
#![allow(dead_code)]

/// Two-sample t-test cases frozen from scipy.stats.ttest_ind
/// (equal_var=True for pooled, equal_var=False for Welch), as (t, p).
pub struct Case {
    pub a: &'static [f64],
    pub b: &'static [f64],
    pub pooled: (f64, f64),
    pub welch: (f64, f64),
}

pub const T_TEST_CASES: [Case; 5] = [
    Case {
        a: &[1.0, 2.0, 3.0],
        b: &[1.0, 2.0, 3.0, 4.0, 5.0],
        pooled: (-0.9682458365518544, 0.3703147228597593),
        welch: (-1.0954451150103324, 0.3161334219263932),
    },
    Case {
        a: &[1.1, 2.3, 2.9, 4.2],
        b: &[5.0, 6.1, 7.3, 6.6, 8.0],
        pooled: (-4.897460395096814, 0.0017582105556759723),
        welch: (-4.825276512719592, 0.002732097985535521),
    },
    Case {
        a: &[0.2, 0.4, 0.1, 0.3, 0.35, 0.25],
        b: &[0.3, 0.5, 0.45, 0.4],
        pooled: (-2.256304299271065, 0.05403310377069921),
        welch: (-2.375954816557457, 0.04635785428014574),
    },
    Case {
        a: &[10.0, 12.0, 9.0, 11.0, 13.0, 10.0, 12.0],
        b: &[8.0, 9.0, 7.0, 10.0, 9.0, 8.0],
        pooled: (3.5626265159721267, 0.004452286189469757),
        welch: (3.6503250672298626, 0.003919856292509491),
    },
    Case {
        a: &[-1.5, 0.3, 2.2, -0.7, 1.1],
        b: &[0.1, 0.4, -0.2, 0.3, 0.2, 0.05, 0.15, 0.0],
        pooled: (0.3052312473556152, 0.7658880990956317),
        welch: (0.2367348483636326, 0.8242722576473482),
    },
];

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
