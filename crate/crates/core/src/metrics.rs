//! Paired summaries of per-channel metrics and the adaptation-set
//! sensitivity study.
//!
//! Sums are taken over sorted values with compensated summation, so every
//! summary is exactly invariant to row order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Neumaier-compensated sum of `values` taken in ascending order.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in sorted(values) {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean(values: &[f64]) -> f64 {
    stable_sum(values) / values.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); zero for one value.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (stable_sum(&sq) / (values.len() - 1) as f64).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    let v = sorted(values);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub std_error: f64,
    pub count: usize,
}

impl MethodStats {
    pub fn of(method: &str, values: &[f64]) -> Self {
        let std = std_dev(values);
        Self {
            method: method.to_string(),
            mean: mean(values),
            std,
            median: median(values),
            std_error: std / (values.len() as f64).sqrt(),
            count: values.len(),
        }
    }
}

/// Row-wise differences `a - b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDiff {
    pub a: String,
    pub b: String,
    pub mean_diff: f64,
    pub std_diff: f64,
    pub std_error: f64,
    /// Rows with `a > b`, `a < b`, `a == b`.
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

impl PairDiff {
    /// Mean difference in units of its standard error.
    pub fn z_score(&self) -> f64 {
        if self.std_error > 0.0 {
            self.mean_diff / self.std_error
        } else if self.mean_diff == 0.0 {
            0.0
        } else {
            self.mean_diff.signum() * f64::INFINITY
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub methods: Vec<MethodStats>,
    /// Every ordered pair `(i, j)` with `i < j`.
    pub pairs: Vec<PairDiff>,
}

impl PairedSummary {
    pub fn method(&self, name: &str) -> Option<&MethodStats> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn pair(&self, a: &str, b: &str) -> Option<&PairDiff> {
        self.pairs.iter().find(|p| p.a == a && p.b == b)
    }
}

/// Per-method statistics and pairwise differences of equally long columns.
pub fn summarize(columns: &[(&str, &[f64])]) -> Result<PairedSummary> {
    let n = columns.first().map(|c| c.1.len()).ok_or(Error::Empty("summary columns"))?;
    if n == 0 {
        return Err(Error::Empty("summary rows"));
    }
    if let Some((name, c)) = columns.iter().find(|c| c.1.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "column {name} has {} rows, expected {n}",
            c.len()
        )));
    }
    let methods = columns.iter().map(|(name, v)| MethodStats::of(name, v)).collect();
    let mut pairs = Vec::new();
    for i in 0..columns.len() {
        for j in i + 1..columns.len() {
            let (an, av) = columns[i];
            let (bn, bv) = columns[j];
            let d: Vec<f64> = av.iter().zip(bv).map(|(x, y)| x - y).collect();
            let s = MethodStats::of("", &d);
            pairs.push(PairDiff {
                a: an.to_string(),
                b: bn.to_string(),
                mean_diff: s.mean,
                std_diff: s.std,
                std_error: s.std_error,
                a_wins: d.iter().filter(|&&x| x > 0.0).count(),
                b_wins: d.iter().filter(|&&x| x < 0.0).count(),
                ties: d.iter().filter(|&&x| x == 0.0).count(),
            });
        }
    }
    Ok(PairedSummary { methods, pairs })
}

/// One mean metric per random adaptation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub method: String,
    pub adapt_size: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

/// Runs `eval(d)` for `d = 0..n_datasets` (dataset draw `d` must depend on
/// `d` only) and collects the spread of the resulting mean metrics.
pub fn sensitivity_study<F>(method: &str, n_datasets: usize, adapt_size: usize, eval: F) -> Result<Sensitivity>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    if n_datasets == 0 {
        return Err(Error::Empty("sensitivity datasets"));
    }
    let values: Vec<f64> = (0..n_datasets).into_par_iter().map(&eval).collect::<Result<_>>()?;
    Ok(Sensitivity {
        method: method.to_string(),
        adapt_size,
        mean: mean(&values),
        std: std_dev(&values),
        median: median(&values),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert_eq, proptest};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: [f64; 20] = [
        12.31, 9.87, 14.02, 11.55, 10.9, 13.47, 8.76, 12.08, 11.11, 10.34, 15.2, 9.05, 12.9, 13.33, 10.01, 11.78,
        12.64, 9.99, 14.4, 10.56,
    ];
    const B: [f64; 20] = [
        11.02, 9.9, 13.1, 11.0, 10.45, 12.2, 8.8, 11.5, 10.7, 10.1, 14.0, 9.2, 12.1, 12.95, 9.5, 11.1, 12.0, 10.3,
        13.2, 10.0,
    ];

    #[test]
    fn matches_external_recomputation() {
        // Reference values from Python's `statistics` module.
        let s = summarize(&[("a", &A), ("b", &B)]).unwrap();
        let a = s.method("a").unwrap();
        assert!((a.mean - 11.7135).abs() < 1e-12);
        assert!((a.std - 1.8138365126815708).abs() < 1e-12);
        assert!((a.median - 11.665).abs() < 1e-12);
        let b = s.method("b").unwrap();
        assert!((b.mean - 11.156).abs() < 1e-12);
        assert!((b.std - 1.4456592013043008).abs() < 1e-12);
        let d = s.pair("a", "b").unwrap();
        assert!((d.mean_diff - 0.5575).abs() < 1e-12);
        assert!((d.std_diff - 0.4704742847718451).abs() < 1e-12);
        assert_eq!((d.a_wins, d.b_wins, d.ties), (16, 4, 0));
    }

    #[test]
    fn identical_and_constant_columns() {
        let s = summarize(&[("a", &A), ("b", &A)]).unwrap();
        let d = s.pair("a", "b").unwrap();
        assert_eq!((d.mean_diff, d.ties), (0.0, 20));
        let c = [3.25; 7];
        assert_eq!(summarize(&[("c", &c)]).unwrap().methods[0].std, 0.0);
    }

    #[test]
    fn mismatched_pairing_is_rejected() {
        assert!(summarize(&[("a", &A), ("b", &B[..19])]).is_err());
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn sensitivity_counts_and_fixed_sets() {
        let s = sensitivity_study("fast", 100, 20, |d| Ok(d as f64 * 0.5)).unwrap();
        assert_eq!(s.values.len(), 100);
        assert_eq!(s.values[10], 5.0);
        let fixed = sensitivity_study("fast", 100, 20, |_| Ok(1.5)).unwrap();
        assert_eq!(fixed.std, 0.0);
    }

    proptest! {
        #[test]
        fn summaries_are_permutation_invariant(seed in 0u64..1000, n in 2usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<(f64, f64)> = (0..n)
                .map(|i| ((i as f64).sin() * 1e3 + 1e-3 * i as f64, (i as f64 * 0.7).cos() * 1e-2))
                .collect();
            let mut perm = rows.clone();
            perm.shuffle(&mut rng);
            let split = |r: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { r.iter().cloned().unzip() };
            let (a0, b0) = split(&rows);
            let (a1, b1) = split(&perm);
            let s0 = summarize(&[("a", &a0), ("b", &b0)]).unwrap();
            let s1 = summarize(&[("a", &a1), ("b", &b1)]).unwrap();
            prop_assert_eq!(s0, s1);
        }
    }
}
