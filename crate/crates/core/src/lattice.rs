//! Lattices, occupation configurations, rates and closed-form
//! stationary quantities.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::rng::{unit, Lane, RngStream};
use crate::{Error, Result};

/// Number of sites sharing one initial-uniform lane and one clock lane.
pub const BLOCK: usize = 64;

/// Jump rates of a `(p, q)`-ASEP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    p: f64,
    q: f64,
}

impl Rates {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        let ok = q >= 0.0 && q < p && p <= 1.0 && (p + q - 1.0).abs() <= 1e-12;
        if !ok || !p.is_finite() || !q.is_finite() {
            return Err(Error::InvalidRates { p, q });
        }
        Ok(Self { p, q })
    }

    /// Rates with `q = 1 - p`.
    pub fn with_p(p: f64) -> Result<Self> {
        Self::new(p, 1.0 - p)
    }

    /// Totally asymmetric case `p = 1, q = 0`.
    pub fn tasep() -> Self {
        Self { p: 1.0, q: 0.0 }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Drift `p - q`.
    pub fn theta(&self) -> f64 {
        self.p - self.q
    }
}

/// Finite lattice: a closed segment `lo..=hi` or a ring `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Topology {
    Segment { lo: i64, hi: i64 },
    Ring { n: usize },
}

impl Topology {
    pub fn segment(lo: i64, hi: i64) -> Result<Self> {
        if lo >= hi {
            return Err(Error::InvalidTopology(format!(
                "segment needs lo < hi, got {lo}..{hi}"
            )));
        }
        Ok(Topology::Segment { lo, hi })
    }

    pub fn ring(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidTopology(format!(
                "ring needs n >= 2, got {n}"
            )));
        }
        Ok(Topology::Ring { n })
    }

    /// Segment `center - half_width ..= center + half_width`.
    pub fn centered(center: i64, half_width: i64) -> Result<Self> {
        Self::segment(center - half_width, center + half_width)
    }

    pub fn len(&self) -> usize {
        match *self {
            Topology::Segment { lo, hi } => (hi - lo + 1) as usize,
            Topology::Ring { n } => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_ring(&self) -> bool {
        matches!(self, Topology::Ring { .. })
    }

    /// Site label of the first index.
    pub fn first_site(&self) -> i64 {
        match *self {
            Topology::Segment { lo, .. } => lo,
            Topology::Ring { .. } => 0,
        }
    }

    pub fn last_site(&self) -> i64 {
        self.first_site() + self.len() as i64 - 1
    }

    pub fn index_of(&self, site: i64) -> Option<usize> {
        let i = site - self.first_site();
        (i >= 0 && (i as usize) < self.len()).then_some(i as usize)
    }

    pub fn site_at(&self, index: usize) -> i64 {
        self.first_site() + index as i64
    }

    pub fn contains(&self, site: i64) -> bool {
        self.index_of(site).is_some()
    }

    /// Index reached by moving `offset` sites from `index`, wrapping on rings.
    pub fn shift(&self, index: usize, offset: i64) -> Option<usize> {
        match *self {
            Topology::Ring { n } => Some((index as i64 + offset).rem_euclid(n as i64) as usize),
            Topology::Segment { .. } => {
                let j = index as i64 + offset;
                (j >= 0 && (j as usize) < self.len()).then_some(j as usize)
            }
        }
    }

    /// Key of the 64-site block holding `index`; absolute for segments so
    /// that overlapping windows share lanes.
    pub fn block_key(&self, index: usize) -> i64 {
        self.site_at(index).div_euclid(BLOCK as i64)
    }
}

/// Occupation variables of a finite lattice, one bit per site.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Configuration {
    topology: Topology,
    words: Vec<u64>,
}

impl Configuration {
    pub fn empty(topology: Topology) -> Self {
        let words = vec![0u64; topology.len().div_ceil(64)];
        Self { topology, words }
    }

    pub fn full(topology: Topology) -> Self {
        let mut c = Self::empty(topology);
        for i in 0..topology.len() {
            c.set_index(i, true);
        }
        c
    }

    /// Configuration with particles at the given sites.
    pub fn from_sites(topology: Topology, sites: &[i64]) -> Result<Self> {
        let mut c = Self::empty(topology);
        for &s in sites {
            let i = topology
                .index_of(s)
                .ok_or(Error::SiteOutOfRange { site: s })?;
            c.set_index(i, true);
        }
        Ok(c)
    }

    /// Parses a string of `0`/`1` characters, first character at the first site.
    pub fn from_bits(topology: Topology, bits: &str) -> Result<Self> {
        let chars: Vec<char> = bits.chars().filter(|c| !c.is_whitespace()).collect();
        if chars.len() != topology.len() {
            return Err(Error::SizeMismatch {
                profile: chars.len(),
                topology: topology.len(),
            });
        }
        let mut c = Self::empty(topology);
        for (i, ch) in chars.into_iter().enumerate() {
            match ch {
                '0' => {}
                '1' => c.set_index(i, true),
                other => {
                    return Err(Error::Parse(format!(
                        "unexpected occupation character {other:?}"
                    )))
                }
            }
        }
        Ok(c)
    }

    /// Builds a configuration from a bitmask over indices (bit `i` = index `i`).
    pub fn from_mask(topology: Topology, mask: u64) -> Self {
        let mut c = Self::empty(topology);
        for i in 0..topology.len().min(64) {
            if mask >> i & 1 == 1 {
                c.set_index(i, true);
            }
        }
        c
    }

    /// Bitmask over indices; only valid for at most 64 sites.
    pub fn mask(&self) -> u64 {
        debug_assert!(self.topology.len() <= 64);
        self.words[0]
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn len(&self) -> usize {
        self.topology.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topology.is_empty()
    }

    #[inline]
    pub fn get(&self, index: usize) -> bool {
        self.words[index >> 6] >> (index & 63) & 1 == 1
    }

    #[inline]
    pub fn set_index(&mut self, index: usize, value: bool) {
        let bit = 1u64 << (index & 63);
        if value {
            self.words[index >> 6] |= bit;
        } else {
            self.words[index >> 6] &= !bit;
        }
    }

    #[inline]
    pub(crate) fn toggle(&mut self, index: usize) {
        self.words[index >> 6] ^= 1u64 << (index & 63);
    }

    /// Moves a particle `from -> to` if the exclusion rule allows it.
    #[inline]
    pub fn try_jump(&mut self, from: usize, to: usize) -> bool {
        if self.get(from) && !self.get(to) {
            self.toggle(from);
            self.toggle(to);
            true
        } else {
            false
        }
    }

    pub fn occupied(&self, site: i64) -> Result<bool> {
        let i = self
            .topology
            .index_of(site)
            .ok_or(Error::SiteOutOfRange { site })?;
        Ok(self.get(i))
    }

    pub fn set(&mut self, site: i64, value: bool) -> Result<()> {
        let i = self
            .topology
            .index_of(site)
            .ok_or(Error::SiteOutOfRange { site })?;
        self.set_index(i, value);
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Number of particles at indices `lo..=hi` (empty when `lo > hi`).
    pub fn count_range(&self, lo: usize, hi: usize) -> usize {
        if lo > hi {
            return 0;
        }
        let hi = hi.min(self.len() - 1);
        let (wl, wh) = (lo >> 6, hi >> 6);
        let low_mask = !0u64 << (lo & 63);
        let high_mask = !0u64 >> (63 - (hi & 63));
        if wl == wh {
            return (self.words[wl] & low_mask & high_mask).count_ones() as usize;
        }
        let mut n = (self.words[wl] & low_mask).count_ones() as usize;
        for w in &self.words[wl + 1..wh] {
            n += w.count_ones() as usize;
        }
        n + (self.words[wh] & high_mask).count_ones() as usize
    }

    /// Number of particles at sites `lo..=hi`, clipped to the topology.
    pub fn count_sites(&self, lo: i64, hi: i64) -> usize {
        let lo = lo.max(self.topology.first_site());
        let hi = hi.min(self.topology.last_site());
        if lo > hi {
            return 0;
        }
        let f = self.topology.first_site();
        self.count_range((lo - f) as usize, (hi - f) as usize)
    }

    /// Occupied sites in increasing order.
    pub fn positions(&self) -> Vec<i64> {
        self.indices().map(|i| self.topology.site_at(i)).collect()
    }

    /// Occupied indices in increasing order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    None
                } else {
                    let b = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some(wi * 64 + b)
                }
            })
        })
    }

    /// Coordinatewise `self <= other`.
    pub fn le(&self, other: &Configuration) -> bool {
        self.topology == other.topology
            && self
                .words
                .iter()
                .zip(&other.words)
                .all(|(a, b)| a & !b == 0)
    }

    /// Indices where `self` has a particle and `other` does not.
    pub fn excess_over(&self, other: &Configuration) -> Vec<usize> {
        let mut out = Vec::new();
        for (wi, (a, b)) in self.words.iter().zip(&other.words).enumerate() {
            let mut w = a & !b;
            while w != 0 {
                out.push(wi * 64 + w.trailing_zeros() as usize);
                w &= w - 1;
            }
        }
        out
    }

    /// Number of indices `lo..=hi` where `self` has a particle and `other` does not.
    pub fn excess_count_range(&self, other: &Configuration, lo: usize, hi: usize) -> usize {
        if lo > hi {
            return 0;
        }
        (lo..=hi.min(self.len() - 1))
            .filter(|&i| self.get(i) && !other.get(i))
            .count()
    }
}

impl fmt::Debug for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Configuration({:?}, {})", self.topology, self)
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len() {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Per-site Bernoulli densities.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    topology: Topology,
    rho: Vec<f64>,
}

impl DensityProfile {
    pub fn constant(topology: Topology, rho: f64) -> Result<Self> {
        check_density(rho)?;
        Ok(Self {
            topology,
            rho: vec![rho; topology.len()],
        })
    }

    pub fn from_fn(topology: Topology, mut f: impl FnMut(i64) -> f64) -> Result<Self> {
        let rho: Vec<f64> = (0..topology.len())
            .map(|i| f(topology.site_at(i)))
            .collect();
        Self::from_values(topology, rho)
    }

    pub fn from_values(topology: Topology, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != topology.len() {
            return Err(Error::SizeMismatch {
                profile: rho.len(),
                topology: topology.len(),
            });
        }
        for &r in &rho {
            check_density(r)?;
        }
        Ok(Self { topology, rho })
    }

    /// Replaces the density at one site (e.g. a forced particle or hole).
    pub fn with_site(mut self, site: i64, rho: f64) -> Result<Self> {
        check_density(rho)?;
        let i = self
            .topology
            .index_of(site)
            .ok_or(Error::SiteOutOfRange { site })?;
        self.rho[i] = rho;
        Ok(self)
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn values(&self) -> &[f64] {
        &self.rho
    }

    pub fn at_index(&self, index: usize) -> f64 {
        self.rho[index]
    }
}

/// One uniform per site, keyed by absolute 64-site block.
pub fn site_uniforms(topology: Topology, rng: &RngStream) -> Vec<f64> {
    let n = topology.len();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let key = topology.block_key(i);
        let offset = topology.site_at(i).rem_euclid(BLOCK as i64) as usize;
        let mut lane = rng.lane(Lane::Init(key));
        for _ in 0..offset {
            lane.next_u64();
        }
        let take = (BLOCK - offset).min(n - i);
        for _ in 0..take {
            out.push(unit(lane.next_u64()));
        }
        i += take;
    }
    out
}

/// Samples a product configuration: site `i` is occupied iff `U_i < rho_i`.
///
/// The uniforms depend only on `(rng key, site)`, so profiles ordered
/// sitewise give coordinatewise ordered configurations.
pub fn sample_config(
    topology: Topology,
    profile: &DensityProfile,
    rng: &RngStream,
) -> Result<Configuration> {
    if profile.topology.len() != topology.len() {
        return Err(Error::SizeMismatch {
            profile: profile.topology.len(),
            topology: topology.len(),
        });
    }
    let u = site_uniforms(topology, rng);
    Ok(threshold(topology, &u, profile.values()))
}

pub(crate) fn threshold(topology: Topology, u: &[f64], rho: &[f64]) -> Configuration {
    let mut c = Configuration::empty(topology);
    for (i, (&ui, &r)) in u.iter().zip(rho).enumerate() {
        if ui < r {
            c.set_index(i, true);
        }
    }
    c
}

/// Samples several profiles from the same uniforms.
pub fn sample_coupled(
    topology: Topology,
    profiles: &[&DensityProfile],
    rng: &RngStream,
) -> Result<Vec<Configuration>> {
    let u = site_uniforms(topology, rng);
    profiles
        .iter()
        .map(|p| {
            if p.topology.len() != topology.len() {
                Err(Error::SizeMismatch {
                    profile: p.topology.len(),
                    topology: topology.len(),
                })
            } else {
                Ok(threshold(topology, &u, p.values()))
            }
        })
        .collect()
}

pub fn check_density(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::DensityOutOfRange(rho))
    }
}

/// Stationary flux `(p - q) rho (1 - rho)` across a fixed edge.
pub fn flux(rho: f64, rates: Rates) -> Result<f64> {
    check_density(rho)?;
    Ok(rates.theta() * rho * (1.0 - rho))
}

/// Characteristic speed `(p - q)(1 - 2 rho)`, the derivative of the flux.
pub fn char_speed(rho: f64, rates: Rates) -> Result<f64> {
    check_density(rho)?;
    Ok(rates.theta() * (1.0 - 2.0 * rho))
}

/// Stationary mean current `t H(rho) - x rho` across the path `(1/2, 0) -> (x + 1/2, t)`.
pub fn mean_current(rho: f64, rates: Rates, x: i64, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    Ok(t * flux(rho, rates)? - x as f64 * rho)
}
