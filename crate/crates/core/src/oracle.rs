//! Exact small-system computations: transition semigroups by
//! uniformization, the exact (configuration, Q) pair chain, and the
//! reflected walk in a time-dependent environment.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Neighborhood, RateModel};
use crate::lattice::{check_density, Configuration, DensityProfile, Rates, Topology};
use crate::rng::{exp_gap, unit, RngStream};
use crate::{Error, Result};

/// Largest state space any oracle will enumerate.
pub const STATE_LIMIT: usize = 1 << 24;

/// Sparse generator of a finite continuous-time Markov chain.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    rows: Vec<Vec<(u32, f64)>>,
    exit: Vec<f64>,
}

impl GeneratorMatrix {
    /// Builds the generator of `states` states from their outgoing jumps.
    pub fn from_fn(
        states: usize,
        mut jumps: impl FnMut(usize) -> Vec<(usize, f64)>,
    ) -> Result<Self> {
        if states > STATE_LIMIT {
            return Err(Error::StateGuard {
                states,
                limit: STATE_LIMIT,
            });
        }
        let mut rows = Vec::with_capacity(states);
        let mut exit = Vec::with_capacity(states);
        for s in 0..states {
            let mut row: Vec<(u32, f64)> = Vec::new();
            for (d, r) in jumps(s) {
                if r > 0.0 && d != s {
                    row.push((d as u32, r));
                }
            }
            exit.push(row.iter().map(|x| x.1).sum());
            rows.push(row);
        }
        Ok(Self { rows, exit })
    }

    /// Exclusion dynamics on every configuration of a tiny topology; the
    /// state index is the occupation bit mask.
    pub fn exclusion(topology: Topology, model: &RateModel) -> Result<Self> {
        let n = topology.len();
        if n > 24 {
            return Err(Error::StateGuard {
                states: usize::MAX,
                limit: STATE_LIMIT,
            });
        }
        let range = model.range();
        Self::from_fn(1 << n, |mask| {
            let occ = |i: usize| mask >> i & 1 == 1;
            let mut out = Vec::new();
            for i in (0..n).filter(|&i| occ(i)) {
                for k in 1..=range {
                    for dir in [1i64, -1] {
                        let Some(j) = topology.shift(i, dir * k as i64) else {
                            continue;
                        };
                        if occ(j) || j == i {
                            continue;
                        }
                        let rate = match model {
                            RateModel::NearestNeighbor(r) => {
                                if dir > 0 {
                                    r.p()
                                } else {
                                    r.q()
                                }
                            }
                            RateModel::General(g) => {
                                let nb = Neighborhood::from_fn(range, |o| {
                                    topology.shift(i, o).is_some_and(occ)
                                });
                                let f = if dir > 0 { g.right(k) } else { g.left(k) };
                                f.eval(&nb)
                            }
                        };
                        out.push((mask ^ (1 << i) ^ (1 << j), rate));
                    }
                }
            }
            out
        })
    }

    pub fn states(&self) -> usize {
        self.rows.len()
    }

    pub fn off_diagonal(&self, s: usize) -> &[(u32, f64)] {
        &self.rows[s]
    }

    pub fn exit_rate(&self, s: usize) -> f64 {
        self.exit[s]
    }

    /// `ν G` for a row vector `ν`.
    pub fn apply_left(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (s, &m) in v.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            out[s] -= m * self.exit[s];
            for &(d, r) in &self.rows[s] {
                out[d as usize] += m * r;
            }
        }
        out
    }

    /// Largest entry of `|ν G|`; zero exactly when `ν` is stationary.
    pub fn stationarity_residual(&self, v: &[f64]) -> f64 {
        self.apply_left(v).iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    /// `ν e^{tG}` by uniformization with total error at most `tol`.
    pub fn evolve(&self, init: &[f64], t: f64, tol: f64) -> Result<Vec<f64>> {
        if init.len() != self.states() {
            return Err(Error::SizeMismatch {
                profile: init.len(),
                topology: self.states(),
            });
        }
        if t.is_nan() || t < 0.0 {
            return Err(Error::NegativeTime(t));
        }
        if tol.is_nan() || tol <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "tolerance {tol} must be positive"
            )));
        }
        let lambda = self.exit.iter().fold(0.0f64, |a, &x| a.max(x));
        if t == 0.0 || lambda == 0.0 {
            return Ok(init.to_vec());
        }
        // keep e^{-Λ dt} well away from underflow
        let pieces = (lambda * t / 20.0).ceil().max(1.0) as usize;
        let dt = t / pieces as f64;
        let mean = lambda * dt;
        let piece_tol = tol / pieces as f64;
        let mut v = init.to_vec();
        for _ in 0..pieces {
            let mut term = v.clone();
            let mut weight = (-mean).exp();
            let mut cumulative = weight;
            let mut acc: Vec<f64> = term.iter().map(|x| x * weight).collect();
            let mut k = 0u64;
            while cumulative < 1.0 - piece_tol / 2.0 {
                k += 1;
                // term <- term P with P = I + G / Λ
                let g = self.apply_left(&term);
                for (a, b) in term.iter_mut().zip(&g) {
                    *a += b / lambda;
                }
                weight *= mean / k as f64;
                cumulative += weight;
                for (a, b) in acc.iter_mut().zip(&term) {
                    *a += weight * b;
                }
                if k > 100_000 {
                    return Err(Error::InvalidSpec(
                        "uniformization series did not converge".into(),
                    ));
                }
            }
            for x in &mut acc {
                if *x < 0.0 && *x >= -tol {
                    *x = 0.0;
                }
            }
            v = acc;
        }
        Ok(v)
    }
}

/// Initial law of an exact computation.
#[derive(Debug, Clone)]
pub enum InitialLaw {
    Point(Configuration),
    Product(DensityProfile),
    /// Uniform over configurations with exactly this many particles.
    UniformCount(usize),
}

impl InitialLaw {
    fn vector(&self, topology: Topology) -> Result<Vec<f64>> {
        let n = topology.len();
        if n > 24 {
            return Err(Error::StateGuard {
                states: usize::MAX,
                limit: STATE_LIMIT,
            });
        }
        let mut v = vec![0.0; 1 << n];
        match self {
            InitialLaw::Point(c) => {
                if c.topology() != topology {
                    return Err(Error::InvalidInitialData(
                        "initial configuration on another topology".into(),
                    ));
                }
                v[c.mask() as usize] = 1.0;
            }
            InitialLaw::Product(p) => {
                if p.topology() != topology {
                    return Err(Error::InvalidInitialData(
                        "profile on another topology".into(),
                    ));
                }
                for (mask, x) in v.iter_mut().enumerate() {
                    *x = (0..n)
                        .map(|i| {
                            if mask >> i & 1 == 1 {
                                p.at_index(i)
                            } else {
                                1.0 - p.at_index(i)
                            }
                        })
                        .product();
                }
            }
            InitialLaw::UniformCount(k) => {
                let hits: Vec<usize> = (0..v.len())
                    .filter(|m| m.count_ones() as usize == *k)
                    .collect();
                if hits.is_empty() {
                    return Err(Error::InvalidInitialData(format!(
                        "{k} particles do not fit on {n} sites"
                    )));
                }
                for m in &hits {
                    v[*m] = 1.0 / hits.len() as f64;
                }
            }
        }
        Ok(v)
    }
}

/// Law of the configuration at one time, indexed by occupation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDistribution {
    topology: Topology,
    probs: Vec<f64>,
}

impl ExactDistribution {
    pub fn prob(&self, c: &Configuration) -> f64 {
        self.probs[c.mask() as usize]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// `P(ω_i = 1)` for the site with index `i`.
    pub fn occupation(&self, i: usize) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|(m, _)| m >> i & 1 == 1)
            .map(|(_, p)| p)
            .sum()
    }

    /// Total variation distance to an empirical law given as counts per mask.
    pub fn total_variation(&self, counts: &BTreeMap<u64, u64>) -> f64 {
        let n: u64 = counts.values().sum();
        let mut tv = 0.0;
        for (m, &p) in self.probs.iter().enumerate() {
            let e = counts.get(&(m as u64)).copied().unwrap_or(0) as f64 / n as f64;
            tv += (p - e).abs();
        }
        tv / 2.0
    }
}

/// Exact law at time `t` of the exclusion process on a tiny topology.
pub fn exact_distribution(
    initial: &InitialLaw,
    model: &RateModel,
    topology: Topology,
    t: f64,
    tol: f64,
) -> Result<ExactDistribution> {
    let g = GeneratorMatrix::exclusion(topology, model)?;
    let v = initial.vector(topology)?;
    Ok(ExactDistribution {
        topology,
        probs: g.evolve(&v, t, tol)?,
    })
}

/// Both sides of the two-point identity on a closed window.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondClassExact {
    pub sites: Vec<i64>,
    /// `P(Q(t) = j)` from the pair chain.
    pub q_law: Vec<f64>,
    /// `Cov[ω_j(t), ω_0(0)]` from the single-configuration chain.
    pub covariance: Vec<f64>,
    pub rho: f64,
}

impl SecondClassExact {
    /// Largest `|Cov - ρ(1-ρ) P(Q = j)|` over the window.
    pub fn identity_gap(&self) -> f64 {
        let w = self.rho * (1.0 - self.rho);
        self.q_law
            .iter()
            .zip(&self.covariance)
            .fold(0.0, |a, (p, c)| a.max((c - w * p).abs()))
    }
}

/// Largest window the pair chain accepts.
pub const PAIR_CHAIN_SITES: usize = 13;

/// Exact `P(Q(t) = j)` and `Cov[ω_j(t), ω_0(0)]` on the closed segment
/// `window`, which must contain the origin. Both start from Bernoulli(ρ)
/// product measure; Q starts at the origin.
pub fn exact_second_class(
    window: Topology,
    rho: f64,
    rates: Rates,
    t: f64,
    tol: f64,
) -> Result<SecondClassExact> {
    exact_second_class_raw(window, rho, rates.p(), rates.q(), t, tol)
}

fn exact_second_class_raw(
    window: Topology,
    rho: f64,
    right: f64,
    left: f64,
    t: f64,
    tol: f64,
) -> Result<SecondClassExact> {
    check_density(rho)?;
    if window.is_ring() {
        return Err(Error::InvalidTopology(
            "the pair chain needs a segment".into(),
        ));
    }
    let n = window.len();
    if n > PAIR_CHAIN_SITES {
        return Err(Error::StateGuard {
            states: n << n,
            limit: PAIR_CHAIN_SITES << PAIR_CHAIN_SITES,
        });
    }
    let origin = window
        .index_of(0)
        .ok_or(Error::SiteOutOfRange { site: 0 })?;
    let edges: Vec<(usize, usize, f64)> = (0..n - 1)
        .flat_map(|i| [(i, i + 1, right), (i + 1, i, left)])
        .collect();
    let bern = |mask: usize, skip: usize| -> f64 {
        (0..n)
            .filter(|&i| i != skip)
            .map(|i| if mask >> i & 1 == 1 { rho } else { 1.0 - rho })
            .product()
    };

    // single chain
    let single = GeneratorMatrix::from_fn(1 << n, |mask| {
        edges
            .iter()
            .filter(|&&(f, to, _)| mask >> f & 1 == 1 && mask >> to & 1 == 0)
            .map(|&(f, to, r)| (mask ^ (1 << f) ^ (1 << to), r))
            .collect()
    })?;
    let full: Vec<f64> = (0..1usize << n).map(|m| bern(m, usize::MAX)).collect();
    let given: Vec<f64> = (0..1usize << n)
        .map(|m| if m >> origin & 1 == 1 { full[m] } else { 0.0 })
        .collect();
    let full_t = single.evolve(&full, t, tol / 4.0)?;
    let given_t = single.evolve(&given, t, tol / 4.0)?;
    let covariance: Vec<f64> = (0..n)
        .map(|j| {
            let (mut joint, mut mean) = (0.0, 0.0);
            for m in 0..1usize << n {
                if m >> j & 1 == 1 {
                    joint += given_t[m];
                    mean += full_t[m];
                }
            }
            joint - rho * mean
        })
        .collect();

    // pair chain: state = q * 2^n + upper mask, upper occupied at q
    let size = n << n;
    let pair = GeneratorMatrix::from_fn(size, |s| {
        let (q, upper) = (s >> n, s & ((1 << n) - 1));
        if upper >> q & 1 == 0 {
            return Vec::new();
        }
        let mut out = Vec::new();
        for &(f, to, r) in &edges {
            let occ = |i: usize| upper >> i & 1 == 1;
            let next = if q == to {
                occ(f).then_some((f, upper))
            } else if occ(f) && !occ(to) {
                let u = upper ^ (1 << f) ^ (1 << to);
                Some((if q == f { to } else { q }, u))
            } else {
                None
            };
            if let Some((nq, nu)) = next {
                out.push(((nq << n) | nu, r));
            }
        }
        out
    })?;
    let mut init = vec![0.0; size];
    for upper in 0..1usize << n {
        if upper >> origin & 1 == 1 {
            init[(origin << n) | upper] = bern(upper, origin);
        }
    }
    let law = pair.evolve(&init, t, tol / 4.0)?;
    let q_law: Vec<f64> = (0..n)
        .map(|q| law[q << n..(q + 1) << n].iter().sum())
        .collect();
    Ok(SecondClassExact {
        sites: (0..n).map(|i| window.site_at(i)).collect(),
        q_law,
        covariance,
        rho,
    })
}

/// Stationary law of the reflected walk: `π(j) = (1 - q/p)(q/p)^j`.
pub fn geometric_pi(j: i64, rates: Rates) -> Result<f64> {
    if j < 0 {
        return Err(Error::SiteOutOfRange { site: j });
    }
    let r = rates.q() / rates.p();
    Ok((1.0 - r) * r.powi(j as i32))
}

/// Largest `|π(x) p - π(x+1) q|` over `x = -jmax..=-1`, where `π(x)` is
/// the probability that the reflected walk sits at `x <= 0`.
pub fn detailed_balance_residual(rates: Rates, jmax: i64) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in -jmax..=-1 {
        let here = geometric_pi(-x, rates)?;
        let next = geometric_pi(-(x + 1), rates)?;
        worst = worst.max((here * rates.p() - next * rates.q()).abs());
    }
    Ok(worst)
}

/// Open/closed state of the edges `{x-1, x}` over time, right-continuous.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnvironmentSchedule {
    closed_by_default: bool,
    initial: BTreeMap<i64, bool>,
    flips: BTreeMap<i64, Vec<f64>>,
}

impl EnvironmentSchedule {
    /// Every edge open at all times.
    pub fn open() -> Self {
        Self::default()
    }

    /// Every edge closed at all times.
    pub fn closed() -> Self {
        Self {
            closed_by_default: true,
            ..Self::default()
        }
    }

    /// Edge `{x-1, x}` starts in state `open`.
    pub fn with_initial(mut self, x: i64, open: bool) -> Self {
        self.initial.insert(x, open);
        self
    }

    /// Edge `{x-1, x}` toggles at each of `times`.
    pub fn with_flips(mut self, x: i64, times: &[f64]) -> Result<Self> {
        let mut v: Vec<f64> = times.to_vec();
        if v.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "flip times at {x} must be finite and nonnegative"
            )));
        }
        v.extend(self.flips.remove(&x).unwrap_or_default());
        v.sort_by(f64::total_cmp);
        if v.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSchedule(format!(
                "two flips at the same time on edge {x}"
            )));
        }
        self.flips.insert(x, v);
        Ok(self)
    }

    /// Random schedule on edges `lo..=hi`: random initial states and
    /// `flips_per_edge` flips at uniform times in `[0, horizon]`.
    pub fn adversarial(
        seed: u64,
        lo: i64,
        hi: i64,
        horizon: f64,
        flips_per_edge: usize,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Self::open();
        for x in lo..=hi {
            s = s.with_initial(x, rng.random::<bool>());
            let times: Vec<f64> = (0..flips_per_edge)
                .map(|_| rng.random::<f64>() * horizon)
                .collect();
            s = s.with_flips(x, &times)?;
        }
        Ok(s)
    }

    /// `u(x, t)`: whether edge `{x-1, x}` is open at time `t`.
    pub fn is_open(&self, x: i64, t: f64) -> bool {
        let start = self
            .initial
            .get(&x)
            .copied()
            .unwrap_or(!self.closed_by_default);
        let n = self
            .flips
            .get(&x)
            .map_or(0, |v| v.partition_point(|&s| s <= t));
        start ^ (n % 2 == 1)
    }
}

/// Rates of the comparison walk off the negative half-line: up from
/// `x >= 0` and down from `x >= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RightRegion {
    pub up: f64,
    pub down: f64,
}

/// Final positions of the coupled walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkSample {
    /// The walk restricted to `x <= 0`, started from the geometric law.
    pub y: i64,
    /// The free walk.
    pub z: i64,
}

/// Runs the coupled walks `Y <= Z` in `schedule` up to `t_end`.
///
/// Both attempt `x -> x+1` at rate `p` from `x <= -1` and `x -> x-1` at
/// rate `q` from `x <= 0`; Y never leaves `x <= 0`, Z follows `right` off
/// the half-line. An attempt across `{x-1, x}` succeeds iff `u(x, t) = 1`.
/// Walkers at the same site share their clocks, so the order is kept.
pub fn simulate_reflected_walk(
    schedule: &EnvironmentSchedule,
    rates: Rates,
    right: RightRegion,
    t_end: f64,
    z0: i64,
    rng: &RngStream,
) -> Result<WalkSample> {
    if t_end.is_nan() || t_end < 0.0 {
        return Err(Error::NegativeTime(t_end));
    }
    if z0 < 0 {
        return Err(Error::InvalidInitialData(format!(
            "comparison walk must start at or above 0, got {z0}"
        )));
    }
    let mut g = rng.lane(crate::rng::Lane::Main);
    let ratio = rates.q() / rates.p();
    // Y(0) = -j with P(j) = (1 - r) r^j
    let mut y = 0i64;
    if ratio > 0.0 {
        let u = unit(g.next_u64());
        let mut cdf = 1.0 - ratio;
        while u >= cdf && y > -10_000 {
            y -= 1;
            cdf += (1.0 - ratio) * ratio.powi((-y) as i32);
        }
    }
    let mut z = z0;
    let (p, q) = (rates.p(), rates.q());
    let y_up = |x: i64| if x <= -1 { p } else { 0.0 };
    let y_down = |_: i64| q;
    let z_up = |x: i64| if x <= -1 { p } else { right.up };
    let z_down = |x: i64| if x <= 0 { q } else { right.down };
    let mut now = 0.0;
    loop {
        // clocks per occupied site: up and down at the larger of the walkers' rates there
        let sites: Vec<i64> = if y == z { vec![y] } else { vec![y, z] };
        let mut clocks: Vec<(i64, i64, f64)> = Vec::with_capacity(4);
        for &x in &sites {
            let up = if x == y && x == z {
                y_up(x).max(z_up(x))
            } else if x == y {
                y_up(x)
            } else {
                z_up(x)
            };
            let down = if x == y && x == z {
                y_down(x).max(z_down(x))
            } else if x == y {
                y_down(x)
            } else {
                z_down(x)
            };
            clocks.push((x, 1, up));
            clocks.push((x, -1, down));
        }
        let total: f64 = clocks.iter().map(|c| c.2).sum();
        if total <= 0.0 {
            break;
        }
        now += exp_gap(&mut g, total);
        if now > t_end {
            break;
        }
        let mut u = unit(g.next_u64()) * total;
        let mut pick = clocks[clocks.len() - 1];
        for &c in &clocks {
            if u < c.2 {
                pick = c;
                break;
            }
            u -= c.2;
        }
        let (x, dir, rate) = pick;
        let edge = if dir > 0 { x + 1 } else { x };
        if !schedule.is_open(edge, now) {
            continue;
        }
        let mark = unit(g.next_u64()) * rate;
        if x == y {
            let r = if dir > 0 { y_up(x) } else { y_down(x) };
            if mark < r {
                y += dir;
            }
        }
        if x == z {
            let r = if dir > 0 { z_up(x) } else { z_down(x) };
            if mark < r {
                z += dir;
            }
        }
        assert!(y <= z, "walk order broken at t = {now}: Y = {y} > Z = {z}");
        assert!(y <= 0, "reflected walk left the half-line");
    }
    Ok(WalkSample { y, z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{GeneralModel, RateFn};

    fn nn(p: f64) -> RateModel {
        RateModel::NearestNeighbor(Rates::with_p(p).unwrap())
    }

    #[test]
    fn zero_time_returns_initial_law() {
        let t = Topology::ring(5).unwrap();
        let c = Configuration::from_bits(t, "11000").unwrap();
        let d = exact_distribution(&InitialLaw::Point(c.clone()), &nn(0.7), t, 0.0, 1e-12).unwrap();
        assert_eq!(d.prob(&c), 1.0);
        assert_eq!(d.total(), 1.0);
    }

    #[test]
    fn single_particle_on_three_ring_is_folded_poisson() {
        let t = Topology::ring(3).unwrap();
        let c = Configuration::from_bits(t, "100").unwrap();
        let d = exact_distribution(
            &InitialLaw::Point(c),
            &RateModel::NearestNeighbor(Rates::tasep()),
            t,
            1.0,
            1e-13,
        )
        .unwrap();
        let mut folded = [0.0; 3];
        let mut term = (-1.0f64).exp();
        for n in 0..60 {
            folded[n % 3] += term;
            term /= (n + 1) as f64;
        }
        for (k, f) in folded.iter().enumerate() {
            assert!((d.occupation(k) - f).abs() < 1e-12, "site {k}");
        }
    }

    #[test]
    fn uniform_fixed_count_is_stationary_on_ring() {
        let t = Topology::ring(6).unwrap();
        let g = GeneratorMatrix::exclusion(t, &nn(0.7)).unwrap();
        let v = InitialLaw::UniformCount(3).vector(t).unwrap();
        assert_eq!(v.iter().filter(|x| **x > 0.0).count(), 20);
        assert!(g.stationarity_residual(&v) < 1e-15);
        let d = exact_distribution(&InitialLaw::UniformCount(3), &nn(0.7), t, 2.0, 1e-12).unwrap();
        for i in 0..6 {
            assert!((d.occupation(i) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn product_measure_is_stationary_for_constant_rates_and_not_for_facilitated() {
        let t = Topology::ring(6).unwrap();
        let prod = InitialLaw::Product(DensityProfile::constant(t, 0.4).unwrap())
            .vector(t)
            .unwrap();
        let g = GeneratorMatrix::exclusion(t, &nn(0.8)).unwrap();
        assert!(g.stationarity_residual(&prod) < 1e-15);
        let two = GeneralModel::new(
            vec![RateFn::Constant(0.5), RateFn::Constant(0.3)],
            vec![RateFn::Constant(0.1), RateFn::Constant(0.0)],
        )
        .unwrap();
        let g = GeneratorMatrix::exclusion(t, &RateModel::General(two)).unwrap();
        assert!(g.stationarity_residual(&prod) < 1e-15);
        let fac = GeneralModel::new(
            vec![RateFn::local(|n| n.get(-1) as u8 as f64)],
            vec![RateFn::Constant(0.0)],
        )
        .unwrap();
        let g = GeneratorMatrix::exclusion(t, &RateModel::General(fac)).unwrap();
        assert!(g.stationarity_residual(&prod) > 1e-3);
    }

    #[test]
    fn evolution_preserves_probability() {
        let t = Topology::segment(0, 7).unwrap();
        let d = exact_distribution(
            &InitialLaw::Product(DensityProfile::constant(t, 0.3).unwrap()),
            &nn(0.9),
            t,
            30.0,
            1e-10,
        )
        .unwrap();
        assert!((d.total() - 1.0).abs() < 1e-10);
        assert!(d.probs().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn state_guard() {
        let t = Topology::segment(0, 24).unwrap();
        assert!(matches!(
            GeneratorMatrix::exclusion(t, &nn(0.7)),
            Err(Error::StateGuard { .. })
        ));
        let w = Topology::segment(-7, 7).unwrap();
        assert!(matches!(
            exact_second_class(w, 0.5, Rates::tasep(), 1.0, 1e-10),
            Err(Error::StateGuard { .. })
        ));
    }

    #[test]
    fn pair_chain_at_time_zero() {
        let w = Topology::segment(-3, 3).unwrap();
        let e = exact_second_class(w, 0.3, Rates::with_p(0.7).unwrap(), 0.0, 1e-12).unwrap();
        for (k, &s) in e.sites.iter().enumerate() {
            let expect = if s == 0 { 1.0 } else { 0.0 };
            assert!((e.q_law[k] - expect).abs() < 1e-12);
            assert!((e.covariance[k] - 0.21 * expect).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_holds_exactly_on_a_window() {
        let w = Topology::segment(-4, 4).unwrap();
        let e = exact_second_class(w, 0.5, Rates::tasep(), 0.4, 1e-12).unwrap();
        assert!(e.identity_gap() < 1e-10, "gap {}", e.identity_gap());
        assert!((e.q_law.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let e = exact_second_class(w, 0.3, Rates::with_p(0.75).unwrap(), 2.0, 1e-12).unwrap();
        assert!(e.identity_gap() < 1e-10);
    }

    #[test]
    fn reversing_rates_mirrors_q() {
        let w = Topology::segment(-4, 4).unwrap();
        let a = exact_second_class_raw(w, 0.5, 0.8, 0.2, 1.0, 1e-12).unwrap();
        let b = exact_second_class_raw(w, 0.5, 0.2, 0.8, 1.0, 1e-12).unwrap();
        let n = a.q_law.len();
        for k in 0..n {
            assert!((a.q_law[k] - b.q_law[n - 1 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn geometric_values() {
        let r = Rates::new(0.6, 0.4).unwrap();
        assert!((geometric_pi(0, r).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((geometric_pi(1, r).unwrap() - 2.0 / 9.0).abs() < 1e-15);
        assert!(geometric_pi(-1, r).is_err());
        let total: f64 = (0..200).map(|j| geometric_pi(j, r).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(geometric_pi(0, Rates::tasep()).unwrap(), 1.0);
        assert_eq!(geometric_pi(3, Rates::tasep()).unwrap(), 0.0);
        assert!(detailed_balance_residual(r, 50).unwrap() < 1e-12);
    }

    #[test]
    fn schedule_is_right_continuous() {
        let s = EnvironmentSchedule::open()
            .with_flips(2, &[1.0, 3.0])
            .unwrap();
        assert!(s.is_open(2, 0.999));
        assert!(!s.is_open(2, 1.0));
        assert!(!s.is_open(2, 2.0));
        assert!(s.is_open(2, 3.0));
        assert!(s.is_open(5, 1.5));
        assert!(!EnvironmentSchedule::closed().is_open(0, 0.0));
        assert!(EnvironmentSchedule::open().with_flips(0, &[-1.0]).is_err());
        assert!(EnvironmentSchedule::open()
            .with_flips(0, &[1.0, 1.0])
            .is_err());
        assert_eq!(
            EnvironmentSchedule::adversarial(3, -5, 5, 2.0, 10).unwrap(),
            EnvironmentSchedule::adversarial(3, -5, 5, 2.0, 10).unwrap()
        );
    }

    #[test]
    fn closed_environment_freezes_walks() {
        let r = Rates::new(0.6, 0.4).unwrap();
        let right = RightRegion { up: 0.5, down: 0.5 };
        for s in 0..200 {
            let w = simulate_reflected_walk(
                &EnvironmentSchedule::closed(),
                r,
                right,
                5.0,
                0,
                &RngStream::new(s, 0),
            )
            .unwrap();
            assert_eq!(w.z, 0);
            assert!(w.y <= 0);
        }
    }

    #[test]
    fn reflected_walk_stays_geometric_in_the_open() {
        let r = Rates::new(0.6, 0.4).unwrap();
        let right = RightRegion { up: 0.6, down: 0.4 };
        let n = 20_000u64;
        let mut at0 = 0u64;
        for s in 0..n {
            let w = simulate_reflected_walk(
                &EnvironmentSchedule::open(),
                r,
                right,
                3.0,
                0,
                &RngStream::replica(5, 1, s),
            )
            .unwrap();
            at0 += (w.y == 0) as u64;
            assert!(w.y <= w.z);
        }
        let f = at0 as f64 / n as f64;
        let se = (1.0 / 3.0 * 2.0 / 3.0 / n as f64).sqrt();
        assert!((f - 1.0 / 3.0).abs() < 4.0 * se, "P(Y = 0) = {f}");
    }
}
