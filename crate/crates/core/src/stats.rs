//! Small sample statistics: means, standard errors, paired one-sided tests.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{invalid, Result};

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
pub fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Standard error of the mean.
pub fn std_error(v: &[f64]) -> f64 {
    (variance(v) / v.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub n: usize,
    /// Mean of `a - b`.
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for the alternative `mean(a - b) < 0`.
    pub p_less: f64,
}

/// Paired t-test of `a` against `b` with alternative `a < b`.
pub fn paired_less(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(invalid("paired samples differ in length"));
    }
    if a.len() < 2 {
        return Err(invalid("paired test needs at least two pairs"));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diff.len();
    let m = mean(&diff);
    let se = std_error(&diff);
    let (t, p_less) = if se > 0.0 {
        let t = m / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| invalid(e.to_string()))?;
        (t, dist.cdf(t))
    } else if m < 0.0 {
        (f64::NEG_INFINITY, 0.0)
    } else if m > 0.0 {
        (f64::INFINITY, 1.0)
    } else {
        (0.0, 0.5)
    };
    Ok(PairedTest { n, mean_diff: m, t, p_less })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedRankTest {
    /// Pairs with a non-zero difference.
    pub n: usize,
    /// Rank sum of the positive differences `a - b`.
    pub rank_sum: f64,
    pub z: f64,
    /// One-sided p-value for the alternative that `a - b` is shifted below zero.
    pub p_less: f64,
}

/// Wilcoxon signed-rank test of `a` against `b` with alternative `a < b`,
/// normal approximation with the tie-corrected variance and no continuity
/// correction. Zero differences are dropped. Infinite values are allowed as
/// long as no difference is undefined.
pub fn signed_rank_less(a: &[f64], b: &[f64]) -> Result<SignedRankTest> {
    if a.len() != b.len() {
        return Err(invalid("paired samples differ in length"));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diff.iter().any(|d| d.is_nan()) {
        return Err(invalid("undefined paired difference"));
    }
    let n = diff.len();
    if n < 2 {
        return Err(invalid("signed-rank test needs at least two non-zero differences"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diff[i].abs().total_cmp(&diff[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && diff[order[end]].abs() == diff[order[start]].abs() {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        let t = (end - start) as f64;
        tie_term += t * t * t - t;
        start = end;
    }
    let rank_sum: f64 = (0..n).filter(|&i| diff[i] > 0.0).map(|i| ranks[i]).sum();
    let nf = n as f64;
    let expected = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (rank_sum - expected) / var.sqrt();
    let p_less = Normal::new(0.0, 1.0).map_err(|e| invalid(e.to_string()))?.cdf(z);
    Ok(SignedRankTest { n, rank_sum, z, p_less })
}
