//! Two-sample statistics and curve-shape fits.
//!
//! Pairwise sums run row by row (rows in parallel), each row and the final
//! row reduction compensated and in index order, so results do not depend
//! on the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut k = KahanSum::default();
        for v in iter {
            k.add(v);
        }
        k
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_samples(a: &[Vec<f64>], b: &[Vec<f64>], min: usize) -> Result<usize> {
    if a.len() < min || b.len() < min {
        return Err(LabError::Config(format!(
            "two-sample statistics need at least {min} points per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    for p in a.iter().chain(b) {
        if p.len() != d {
            return Err(LabError::Shape {
                expected: d,
                found: p.len(),
            });
        }
    }
    Ok(d)
}

/// Sum of `|p_i - q_j|` over all `i, j`.
fn cross_sum(p: &[&[f64]], q: &[&[f64]]) -> f64 {
    let rows: Vec<f64> = p
        .par_iter()
        .map(|x| q.iter().map(|y| dist(x, y)).collect::<KahanSum>().total())
        .collect();
    rows.into_iter().collect::<KahanSum>().total()
}

/// Sum of `|p_i - p_j|` over ordered pairs `i != j`.
fn within_sum(p: &[&[f64]]) -> f64 {
    let rows: Vec<f64> = (0..p.len())
        .into_par_iter()
        .map(|i| p[i + 1..].iter().map(|y| dist(p[i], y)).collect::<KahanSum>().total())
        .collect();
    2.0 * rows.into_iter().collect::<KahanSum>().total()
}

fn refs(a: &[Vec<f64>]) -> Vec<&[f64]> {
    a.iter().map(Vec::as_slice).collect()
}

/// Energy distance, U-statistic form: self-pairs are excluded from the
/// within-set means. Unbiased, so it can dip below zero by `O(1/n)` when
/// the two sets share a distribution.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_samples(a, b, 2)?;
    let (ra, rb) = (refs(a), refs(b));
    Ok(u_statistic(&ra, &rb))
}

/// Orders the two sets canonically so swapping the arguments reproduces the
/// same floating-point operations.
fn canonical<'x, 'y>(a: &'x [&'y [f64]], b: &'x [&'y [f64]]) -> (&'x [&'y [f64]], &'x [&'y [f64]]) {
    let key = |s: &[&[f64]]| s.len();
    let swap = match key(a).cmp(&key(b)) {
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => a
            .iter()
            .flat_map(|p| p.iter())
            .zip(b.iter().flat_map(|p| p.iter()))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            == Some(std::cmp::Ordering::Greater),
    };
    if swap {
        (b, a)
    } else {
        (a, b)
    }
}

fn u_statistic(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let (a, b) = canonical(a, b);
    let (n, m) = (a.len() as f64, b.len() as f64);
    2.0 * cross_sum(a, b) / (n * m) - (within_sum(a) / (n * (n - 1.0)) + within_sum(b) / (m * (m - 1.0)))
}

/// Energy distance, V-statistic form: all-pairs means including self-pairs.
/// Non-negative, and exactly zero for identical sets.
pub fn energy_distance_v(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_samples(a, b, 1)?;
    if a == b {
        return Ok(0.0);
    }
    let (ra, rb) = (refs(a), refs(b));
    let (ra, rb) = canonical(&ra, &rb);
    let (n, m) = (ra.len() as f64, rb.len() as f64);
    let v = 2.0 * cross_sum(ra, rb) / (n * m) - (within_sum(ra) / (n * n) + within_sum(rb) / (m * m));
    Ok(v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePoint {
    pub quantile: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleResult {
    /// U-statistic energy distance of the original labelling.
    pub statistic: f64,
    /// Quantiles of the permutation null, increasing in quantile.
    pub null_quantiles: Vec<QuantilePoint>,
    pub n_perm: usize,
    /// `(1 + #{null >= statistic}) / (1 + n_perm)`.
    pub p_value: f64,
}

impl TwoSampleResult {
    pub fn quantile(&self, q: f64) -> Option<f64> {
        self.null_quantiles
            .iter()
            .find(|p| (p.quantile - q).abs() < 1e-12)
            .map(|p| p.value)
    }
}

/// Null quantile levels reported by [`permutation_test`].
pub const NULL_LEVELS: [f64; 5] = [0.5, 0.9, 0.95, 0.99, 0.999];

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Permutation test of the energy distance under label shuffling.
/// Permutation `k` shuffles with ChaCha8 stream `k` of `seed`.
pub fn permutation_test(a: &[Vec<f64>], b: &[Vec<f64>], n_perm: usize, seed: u64) -> Result<TwoSampleResult> {
    if n_perm < 100 {
        return Err(LabError::Config(format!("n_perm must be >= 100, got {n_perm}")));
    }
    check_samples(a, b, 2)?;
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
    let n = a.len();
    let statistic = u_statistic(&pooled[..n], &pooled[n..]);
    let mut null: Vec<f64> = (0..n_perm)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut idx: Vec<usize> = (0..pooled.len()).collect();
            idx.shuffle(&mut rng);
            let perm: Vec<&[f64]> = idx.iter().map(|&i| pooled[i]).collect();
            u_statistic(&perm[..n], &perm[n..])
        })
        .collect();
    let exceed = null.iter().filter(|v| **v >= statistic).count();
    null.sort_by(f64::total_cmp);
    let null_quantiles = NULL_LEVELS
        .iter()
        .map(|&q| QuantilePoint {
            quantile: q,
            value: quantile_sorted(&null, q),
        })
        .collect();
    Ok(TwoSampleResult {
        statistic,
        null_quantiles,
        n_perm,
        p_value: (1 + exceed) as f64 / (1 + n_perm) as f64,
    })
}

/// Least-squares slope of `ln ys` against `ln xs`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(LabError::Shape {
            expected: xs.len(),
            found: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(LabError::Config(format!("loglog_slope needs at least 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(LabError::Config("loglog_slope needs finite positive entries".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}
