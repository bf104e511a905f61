//! Exact accumulators, deterministic replica fan-out and a few distribution
//! helpers.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::{Error, Result};

/// Replicas below this count are rejected by every estimator.
pub const MIN_REPLICAS: u64 = 30;

/// Two-sided confidence matching a ±3σ interval.
pub const THREE_SIGMA: f64 = 0.997_300_203_936_739_8;

/// Accumulators that can be combined.
pub trait Merge {
    fn merge(&mut self, other: Self);
}

/// Point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithCI {
    pub estimate: f64,
    pub stderr: f64,
    pub replicas: u64,
    pub confidence: f64,
}

impl EstimateWithCI {
    pub fn new(estimate: f64, stderr: f64, replicas: u64) -> Self {
        Self {
            estimate,
            stderr: stderr.max(0.0),
            replicas,
            confidence: THREE_SIGMA,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    fn half_width(&self) -> f64 {
        normal_quantile(0.5 + self.confidence / 2.0) * self.stderr
    }

    pub fn ci_lo(&self) -> f64 {
        self.estimate - self.half_width()
    }

    pub fn ci_hi(&self) -> f64 {
        self.estimate + self.half_width()
    }

    /// Whether `reference` lies within `k` standard errors.
    pub fn agrees(&self, reference: f64, k: f64) -> bool {
        (self.estimate - reference).abs() <= k * self.stderr
    }

    pub fn scale(self, c: f64) -> Self {
        Self {
            estimate: self.estimate * c,
            stderr: self.stderr * c.abs(),
            ..self
        }
    }

    pub fn shift(self, c: f64) -> Self {
        Self {
            estimate: self.estimate + c,
            ..self
        }
    }

    /// Difference of two independent estimates.
    pub fn minus(self, other: Self) -> Self {
        Self::new(
            self.estimate - other.estimate,
            self.stderr.hypot(other.stderr),
            self.replicas.min(other.replicas),
        )
    }
}

/// Power sums of an integer sample, kept exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Moments {
    pub n: u64,
    s1: i128,
    s2: i128,
    s3: i128,
    s4: i128,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: i64) {
        let x = x as i128;
        self.n += 1;
        self.s1 += x;
        self.s2 += x * x;
        self.s3 += x * x * x;
        self.s4 += x * x * x * x;
    }

    pub fn mean(&self) -> f64 {
        self.s1 as f64 / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        let n = self.n as f64;
        // n * s2 - s1^2 is exact in integers
        let num = self.n as i128 * self.s2 - self.s1 * self.s1;
        num as f64 / (n * (n - 1.0))
    }

    pub fn stderr_mean(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }

    /// Fourth central moment (plug-in).
    pub fn central4(&self) -> f64 {
        let n = self.n as f64;
        let m = self.mean();
        let (s1, s2, s3, s4) = (
            self.s1 as f64,
            self.s2 as f64,
            self.s3 as f64,
            self.s4 as f64,
        );
        (s4 - 4.0 * m * s3 + 6.0 * m * m * s2 - 4.0 * m.powi(3) * s1) / n + m.powi(4)
    }

    /// Large-sample standard error of the sample variance.
    pub fn stderr_variance(&self) -> f64 {
        let n = self.n as f64;
        let v = self.variance();
        ((self.central4() - v * v * (n - 3.0) / (n - 1.0)) / n)
            .max(0.0)
            .sqrt()
    }

    pub fn mean_estimate(&self) -> EstimateWithCI {
        EstimateWithCI::new(self.mean(), self.stderr_mean(), self.n)
    }

    pub fn variance_estimate(&self) -> EstimateWithCI {
        EstimateWithCI::new(self.variance(), self.stderr_variance(), self.n)
    }
}

impl Merge for Moments {
    fn merge(&mut self, o: Self) {
        self.n += o.n;
        self.s1 += o.s1;
        self.s2 += o.s2;
        self.s3 += o.s3;
        self.s4 += o.s4;
    }
}

/// Integer-valued sample stored as value counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Histogram {
    counts: BTreeMap<i64, u64>,
    total: u64,
}

impl Histogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: i64) {
        *self.counts.entry(x).or_default() += 1;
        self.total += 1;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, x: i64) -> u64 {
        self.counts.get(&x).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    pub fn proportion(&self, x: i64) -> EstimateWithCI {
        proportion(self.count(x), self.total)
    }

    /// Empirical P(X >= k).
    pub fn tail_ge(&self, k: i64) -> EstimateWithCI {
        proportion(self.counts.range(k..).map(|(_, &c)| c).sum(), self.total)
    }

    /// Empirical P(X <= k).
    pub fn tail_le(&self, k: i64) -> EstimateWithCI {
        proportion(self.counts.range(..=k).map(|(_, &c)| c).sum(), self.total)
    }

    /// Sample mean of `f(X)` with its standard error.
    pub fn mean_of(&self, f: impl Fn(i64) -> f64) -> EstimateWithCI {
        let n = self.total as f64;
        let mean = self.iter().map(|(x, c)| c as f64 * f(x)).sum::<f64>() / n;
        let ss = self
            .iter()
            .map(|(x, c)| c as f64 * (f(x) - mean).powi(2))
            .sum::<f64>();
        let var = if self.total > 1 { ss / (n - 1.0) } else { 0.0 };
        EstimateWithCI::new(mean, (var / n).sqrt(), self.total)
    }

    pub fn moments(&self) -> Moments {
        let mut m = Moments::new();
        for (x, c) in self.iter() {
            let x = x as i128;
            let c128 = c as i128;
            m.n += c;
            m.s1 += c128 * x;
            m.s2 += c128 * x * x;
            m.s3 += c128 * x * x * x;
            m.s4 += c128 * x * x * x * x;
        }
        m
    }
}

impl Merge for Histogram {
    fn merge(&mut self, o: Self) {
        for (k, v) in o.counts {
            *self.counts.entry(k).or_default() += v;
        }
        self.total += o.total;
    }
}

impl<A: Merge> Merge for Vec<A> {
    fn merge(&mut self, o: Self) {
        assert_eq!(
            self.len(),
            o.len(),
            "merging accumulators of different shape"
        );
        for (a, b) in self.iter_mut().zip(o) {
            a.merge(b);
        }
    }
}

impl<A: Merge, B: Merge> Merge for (A, B) {
    fn merge(&mut self, o: Self) {
        self.0.merge(o.0);
        self.1.merge(o.1);
    }
}

impl Merge for u64 {
    fn merge(&mut self, o: Self) {
        *self += o;
    }
}

/// Binomial proportion estimate.
pub fn proportion(hits: u64, n: u64) -> EstimateWithCI {
    let p = hits as f64 / n as f64;
    EstimateWithCI::new(p, (p * (1.0 - p) / n as f64).sqrt(), n)
}

/// Replicas per work unit; results never depend on this or on `workers`.
pub const CHUNK: u64 = 256;

/// Runs `kernel(replica, &mut acc)` for every replica on a pool of `workers`
/// threads. Replicas are grouped into fixed chunks, each folded into a fresh
/// accumulator, and chunk results are merged in chunk order.
pub fn fan_out<A, I, K>(replicas: u64, workers: usize, init: I, kernel: K) -> Result<A>
where
    A: Merge + Send,
    I: Fn() -> A + Sync,
    K: Fn(u64, &mut A) -> Result<()> + Sync,
{
    let chunks = replicas.div_ceil(CHUNK);
    let run_chunk = |c: u64| -> Result<A> {
        let mut acc = init();
        for r in c * CHUNK..((c + 1) * CHUNK).min(replicas) {
            kernel(r, &mut acc)?;
        }
        Ok(acc)
    };
    let parts: Vec<Result<A>> = if workers <= 1 {
        (0..chunks).map(run_chunk).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidSpec(format!("worker pool: {e}")))?;
        pool.install(|| (0..chunks).into_par_iter().map(run_chunk).collect())
    };
    let mut total = init();
    for p in parts {
        total.merge(p?);
    }
    Ok(total)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(p)
}

pub fn normal_sf(z: f64) -> f64 {
    1.0 - Normal::new(0.0, 1.0).expect("standard normal").cdf(z)
}

/// Upper tail of the chi-square law with `dof` degrees of freedom.
pub fn chi_square_sf(x: f64, dof: f64) -> f64 {
    1.0 - ChiSquared::new(dof).expect("positive dof").cdf(x)
}

/// Pearson goodness-of-fit: returns (statistic, degrees of freedom, p-value).
/// `expected` holds probabilities of the cells, which must sum to one.
pub fn chi_square_gof(observed: &[u64], expected: &[f64]) -> Result<(f64, f64, f64)> {
    if observed.len() != expected.len() || observed.len() < 2 {
        return Err(Error::InvalidSpec(
            "chi-square needs at least two matching cells".into(),
        ));
    }
    let n: u64 = observed.iter().sum();
    let mut stat = 0.0;
    for (&o, &e) in observed.iter().zip(expected) {
        let e = e * n as f64;
        if e <= 0.0 {
            if o > 0 {
                return Ok((f64::INFINITY, observed.len() as f64 - 1.0, 0.0));
            }
            continue;
        }
        stat += (o as f64 - e).powi(2) / e;
    }
    let dof = observed.len() as f64 - 1.0;
    Ok((stat, dof, chi_square_sf(stat, dof)))
}

/// Two-sided p-value of the pooled two-proportion z-test.
pub fn two_proportion_p(x1: u64, n1: u64, x2: u64, n2: u64) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let pooled = (x1 + x2) as f64 / (n1f + n2f);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    if se == 0.0 {
        return 1.0;
    }
    let z = (x1 as f64 / n1f - x2 as f64 / n2f).abs() / se;
    2.0 * normal_sf(z)
}

/// Two-sample comparison of integer samples: adjacent values are pooled
/// into bins holding at least `min_count` observations of the combined
/// sample, then each bin is tested with a two-proportion z-test at
/// Bonferroni-corrected level `alpha / bins`. Returns the smallest p-value
/// times the number of bins (capped at 1) and the number of bins.
pub fn binned_two_sample(a: &Histogram, b: &Histogram, min_count: u64) -> (f64, usize) {
    let mut combined = a.clone();
    combined.merge(b.clone());
    let mut bins: Vec<(i64, i64)> = Vec::new();
    let mut start = None;
    let mut acc = 0;
    for (x, c) in combined.iter() {
        start.get_or_insert(x);
        acc += c;
        if acc >= min_count {
            bins.push((start.take().unwrap(), x));
            acc = 0;
        }
    }
    if let Some(s) = start {
        match bins.last_mut() {
            Some(last) => last.1 = combined.iter().last().unwrap().0,
            None => bins.push((s, combined.iter().last().unwrap().0)),
        }
    }
    let in_bin = |h: &Histogram, (lo, hi): (i64, i64)| {
        h.iter()
            .filter(|&(x, _)| x >= lo && x <= hi)
            .map(|(_, c)| c)
            .sum::<u64>()
    };
    let m = bins.len();
    let min_p = bins
        .iter()
        .map(|&bin| two_proportion_p(in_bin(a, bin), a.total(), in_bin(b, bin), b.total()))
        .fold(1.0f64, f64::min);
    ((min_p * m as f64).min(1.0), m)
}
