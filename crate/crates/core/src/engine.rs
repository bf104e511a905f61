//! Poisson-clock (Harris) construction.
//!
//! Every directed edge `(i, i + k)` carries a Poisson clock. Clocks are
//! generated per 64-edge block by superposition: a block fires at the total
//! rate of its clocks and a firing is assigned to a uniformly chosen clock
//! of the block. Blocks are merged by a tournament tree on their next firing
//! time. A block's stream is keyed by its absolute position, so runs on
//! overlapping windows with the same [`RngStream`] share every clock on the
//! common edges.

use std::sync::Arc;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::lattice::{check_density, Configuration, Rates, Topology, BLOCK};
use crate::rng::{exp_gap, fraction_threshold, index_and_fraction, unit, Lane, RngStream};
use crate::{Error, Result};

/// Local window seen by a rate function: offsets `-R..=R` around the
/// jumping particle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighborhood {
    bits: u64,
    radius: usize,
}

impl Neighborhood {
    pub fn from_fn(radius: usize, mut occupied: impl FnMut(i64) -> bool) -> Self {
        let mut bits = 0;
        for j in -(radius as i64)..=radius as i64 {
            if occupied(j) {
                bits |= 1 << (j + radius as i64);
            }
        }
        Self { bits, radius }
    }

    /// Occupation at `offset`; offsets beyond the radius read as vacant.
    pub fn get(&self, offset: i64) -> bool {
        let r = self.radius as i64;
        (-r..=r).contains(&offset) && self.bits >> (offset + r) & 1 == 1
    }

    pub fn radius(&self) -> usize {
        self.radius
    }
}

/// A jump rate as a function of the local configuration, bounded by 1.
#[derive(Clone)]
pub enum RateFn {
    Constant(f64),
    Local(Arc<dyn Fn(&Neighborhood) -> f64 + Send + Sync>),
}

impl RateFn {
    pub fn local(f: impl Fn(&Neighborhood) -> f64 + Send + Sync + 'static) -> Self {
        RateFn::Local(Arc::new(f))
    }

    fn bound(&self) -> f64 {
        match self {
            RateFn::Constant(c) => *c,
            RateFn::Local(_) => 1.0,
        }
    }

    pub fn eval(&self, n: &Neighborhood) -> f64 {
        match self {
            RateFn::Constant(c) => *c,
            RateFn::Local(f) => f(n),
        }
    }
}

impl std::fmt::Debug for RateFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RateFn::Constant(c) => write!(f, "Constant({c})"),
            RateFn::Local(_) => f.write_str("Local(..)"),
        }
    }
}

/// Bounded-range exclusion with configuration-dependent rates: a particle
/// at `i` jumps to `i + k` at rate `right[k-1](θ_i ω)` and to `i - k` at
/// rate `left[k-1](θ_i ω)` whenever the target is empty.
#[derive(Debug, Clone)]
pub struct GeneralModel {
    right: Vec<RateFn>,
    left: Vec<RateFn>,
}

impl GeneralModel {
    pub fn new(right: Vec<RateFn>, left: Vec<RateFn>) -> Result<Self> {
        if right.is_empty() || right.len() != left.len() {
            return Err(Error::InvalidInitialData(format!(
                "need the same positive number of right and left rates, got {} and {}",
                right.len(),
                left.len()
            )));
        }
        if right.len() > 20 {
            return Err(Error::InvalidInitialData("jump range above 20".into()));
        }
        for r in right.iter().chain(&left) {
            if let RateFn::Constant(c) = r {
                if !(0.0..=1.0).contains(c) {
                    return Err(Error::InvalidInitialData(format!(
                        "constant rate {c} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(Self { right, left })
    }

    /// Constant-rate model equal in law to the nearest-neighbour ASEP.
    pub fn constant_nearest(rates: Rates) -> Self {
        Self {
            right: vec![RateFn::Constant(rates.p())],
            left: vec![RateFn::Constant(rates.q())],
        }
    }

    pub fn range(&self) -> usize {
        self.right.len()
    }

    pub fn right(&self, k: usize) -> &RateFn {
        &self.right[k - 1]
    }

    pub fn left(&self, k: usize) -> &RateFn {
        &self.left[k - 1]
    }

    fn reads_neighborhood(&self) -> bool {
        self.right
            .iter()
            .chain(&self.left)
            .any(|r| matches!(r, RateFn::Local(_)))
    }

    /// Expected net rate of particle motion across a fixed edge under the
    /// Bernoulli(`rho`) product measure, by exact enumeration.
    pub fn flux(&self, rho: f64) -> Result<f64> {
        check_density(rho)?;
        let r = self.range() as i64;
        // sites -r ..= 2r cover both neighbourhoods of every jump across edge (0, k)
        let width = (3 * r + 1) as u32;
        let mut total = 0.0;
        for mask in 0u64..(1 << width) {
            let occ = |s: i64| mask >> (s + r) & 1 == 1;
            let ones = mask.count_ones() as i32;
            let weight = rho.powi(ones) * (1.0 - rho).powi(width as i32 - ones);
            if weight == 0.0 {
                continue;
            }
            for k in 1..=r {
                if occ(0) && !occ(k) {
                    let n = Neighborhood::from_fn(r as usize, &occ);
                    total += weight * k as f64 * self.right(k as usize).eval(&n);
                }
                if occ(k) && !occ(0) {
                    let n = Neighborhood::from_fn(r as usize, |j| occ(k + j));
                    total -= weight * k as f64 * self.left(k as usize).eval(&n);
                }
            }
        }
        Ok(total)
    }
}

/// Dynamics driven by the clocks.
#[derive(Debug, Clone)]
pub enum RateModel {
    NearestNeighbor(Rates),
    General(GeneralModel),
}

impl RateModel {
    pub fn range(&self) -> usize {
        match self {
            RateModel::NearestNeighbor(_) => 1,
            RateModel::General(g) => g.range(),
        }
    }
}

/// One clock firing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attempt {
    pub time: f64,
    pub from: usize,
    pub to: usize,
    pub k: usize,
    pub rightward: bool,
    /// Extra uniform bits, present only when acceptance must be thinned.
    pub mark: u64,
}

#[derive(Debug, Clone, Copy)]
struct JumpClass {
    k: usize,
    right: f64,
    left: f64,
    right_share: u64,
}

#[derive(Debug, Clone)]
struct BlockClock {
    rng: ChaCha8Rng,
    /// Index of the first nominal lower end; negative when the block starts
    /// before the segment.
    base: i64,
    span: usize,
    weights: Vec<f64>,
    rate: f64,
    next: f64,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    time: f64,
    lower: u32,
    class: u16,
    rightward: bool,
    mark: u64,
}

/// Firings generated per slab, on average, once slabs reach full length.
const SLAB_EVENTS: f64 = 2048.0;
/// Length of the first slab in expected firings; later slabs double.
const FIRST_SLAB_EVENTS: f64 = 16.0;

/// Superposed Poisson clocks of all directed edges of a topology.
///
/// On a segment every block carries the clocks of all 64 edges whose lower
/// end lies in its absolute 64-site range; firings on edges that leave the
/// segment are discarded. The block streams therefore do not depend on where
/// the segment ends. Firings are produced block by block over short time
/// slabs and served in time order.
#[derive(Debug, Clone)]
pub struct ClockSuite {
    topology: Topology,
    classes: Vec<JumpClass>,
    max_k: usize,
    blocks: Vec<BlockClock>,
    live: (usize, usize),
    slab: Vec<Slot>,
    pos: usize,
    slab_end: f64,
    slab_len: f64,
    slab_cap: f64,
    marks: bool,
}

impl ClockSuite {
    /// Clocks at rate `p` on every `(i, i+1)` and `q` on every `(i+1, i)`.
    pub fn nearest_neighbor(topology: Topology, rates: Rates, rng: &RngStream) -> Self {
        Self::build(topology, &[(1, rates.p(), rates.q())], false, rng)
    }

    /// Clocks for a general model; each class runs at its rate bound and
    /// firings are thinned by the caller using [`Attempt::mark`].
    pub fn general(topology: Topology, model: &GeneralModel, rng: &RngStream) -> Self {
        let classes: Vec<(usize, f64, f64)> = (1..=model.range())
            .map(|k| (k, model.right(k).bound(), model.left(k).bound()))
            .collect();
        Self::build(topology, &classes, model.reads_neighborhood(), rng)
    }

    fn build(
        topology: Topology,
        classes: &[(usize, f64, f64)],
        marks: bool,
        rng: &RngStream,
    ) -> Self {
        let classes: Vec<JumpClass> = classes
            .iter()
            .map(|&(k, right, left)| JumpClass {
                k,
                right,
                left,
                right_share: if right + left > 0.0 {
                    fraction_threshold(right / (right + left))
                } else {
                    0
                },
            })
            .collect();
        let n = topology.len();
        let mut blocks = Vec::new();
        let mut first = 0;
        while first < n {
            let offset = topology.site_at(first).rem_euclid(BLOCK as i64) as usize;
            let (base, span, len) = if topology.is_ring() {
                let len = (BLOCK - offset).min(n - first);
                (first as i64, len, len)
            } else {
                (
                    first as i64 - offset as i64,
                    BLOCK,
                    (BLOCK - offset).min(n - first),
                )
            };
            let weights: Vec<f64> = classes
                .iter()
                .map(|c| {
                    if topology.is_ring() && c.k >= n {
                        0.0
                    } else {
                        span as f64 * (c.right + c.left)
                    }
                })
                .collect();
            let rate: f64 = weights.iter().sum();
            let mut clock = rng.lane(Lane::Clock(topology.block_key(first)));
            let next = if rate > 0.0 {
                exp_gap(&mut clock, rate)
            } else {
                f64::INFINITY
            };
            blocks.push(BlockClock {
                rng: clock,
                base,
                span,
                weights,
                rate,
                next,
            });
            first += len;
        }
        let total: f64 = blocks.iter().map(|b| b.rate).sum();
        let nblocks = blocks.len();
        Self {
            topology,
            max_k: classes.iter().map(|c| c.k).max().unwrap_or(1),
            classes,
            blocks,
            live: (0, nblocks),
            slab: Vec::new(),
            pos: 0,
            slab_end: 0.0,
            slab_len: if total > 0.0 {
                FIRST_SLAB_EVENTS / total
            } else {
                f64::INFINITY
            },
            slab_cap: if total > 0.0 {
                SLAB_EVENTS / total
            } else {
                f64::INFINITY
            },
            marks,
        }
    }

    fn refill(&mut self) {
        self.slab.clear();
        self.pos = 0;
        let single = self.classes.len() == 1;
        let ring = self.topology.is_ring();
        let n = self.topology.len() as i64;
        while self.slab.is_empty() && self.slab_end.is_finite() {
            let end = self.slab_end + self.slab_len;
            for blk in &mut self.blocks[self.live.0..self.live.1] {
                while blk.next < end {
                    let class = if single {
                        0
                    } else {
                        let mut u = unit(blk.rng.next_u64()) * blk.rate;
                        let mut c = 0;
                        while c + 1 < blk.weights.len()
                            && (u >= blk.weights[c] || blk.weights[c] == 0.0)
                        {
                            u -= blk.weights[c];
                            c += 1;
                        }
                        c
                    };
                    let (idx, frac) = index_and_fraction(blk.rng.next_u64(), blk.span);
                    let mark = if self.marks { blk.rng.next_u64() } else { 0 };
                    let cls = &self.classes[class];
                    let lower = blk.base + idx as i64;
                    if ring || (lower >= 0 && lower + (cls.k as i64) < n) {
                        self.slab.push(Slot {
                            time: blk.next,
                            lower: lower as u32,
                            class: class as u16,
                            rightward: frac < cls.right_share,
                            mark,
                        });
                    }
                    blk.next += exp_gap(&mut blk.rng, blk.rate);
                }
            }
            self.slab_end = if self.live.0 < self.live.1 {
                end
            } else {
                f64::INFINITY
            };
            self.slab_len = (2.0 * self.slab_len).min(self.slab_cap);
        }
        self.slab.sort_unstable_by(|a, b| a.time.total_cmp(&b.time));
    }

    /// Stops generating firings of blocks whose edges lie entirely in the
    /// contaminated zone. Such firings cannot affect clean sites, so runs
    /// that only read clean sites are unchanged.
    pub fn retire_contaminated(&mut self, fronts: &TruncationFronts) {
        if self.topology.is_ring() {
            return;
        }
        let (mut lo, mut hi) = self.live;
        while lo < hi {
            let b = &self.blocks[lo];
            if (b.base + b.span as i64 - 1 + self.max_k as i64) <= fronts.left as i64 {
                lo += 1;
            } else {
                break;
            }
        }
        while lo < hi {
            if self.blocks[hi - 1].base.max(0) >= fronts.right as i64 {
                hi -= 1;
            } else {
                break;
            }
        }
        self.live = (lo, hi);
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    /// Time of the next firing (infinite when every clock has rate zero).
    #[inline]
    pub fn peek_time(&mut self) -> f64 {
        if self.pos == self.slab.len() {
            self.refill();
        }
        self.slab.get(self.pos).map_or(f64::INFINITY, |s| s.time)
    }

    /// Total rate of the clocks on edges of the topology.
    pub fn total_rate(&self) -> f64 {
        let n = self.topology.len();
        self.classes
            .iter()
            .map(|c| {
                let edges = match self.topology {
                    Topology::Ring { .. } => {
                        if c.k < n {
                            n
                        } else {
                            0
                        }
                    }
                    Topology::Segment { .. } => n.saturating_sub(c.k),
                };
                edges as f64 * (c.right + c.left)
            })
            .sum()
    }

    /// Pops the next firing. Must follow a finite [`peek_time`](Self::peek_time).
    #[inline]
    pub fn next_attempt(&mut self) -> Attempt {
        if self.pos == self.slab.len() {
            self.refill();
        }
        let s = self.slab[self.pos];
        self.pos += 1;
        let k = self.classes[s.class as usize].k;
        let lower = s.lower as usize;
        let upper = match self.topology {
            Topology::Ring { n } => (lower + k) % n,
            Topology::Segment { .. } => lower + k,
        };
        let (from, to) = if s.rightward {
            (lower, upper)
        } else {
            (upper, lower)
        };
        Attempt {
            time: s.time,
            from,
            to,
            k,
            rightward: s.rightward,
            mark: s.mark,
        }
    }
}

/// Tracks which sites of a finite segment may differ from the infinite
/// system because of the missing outside clocks. Boundary sites are
/// contaminated from the start and contamination spreads along every
/// firing that touches a contaminated site, whether or not a particle moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncationFronts {
    left: usize,
    right: usize,
    ring: bool,
}

impl TruncationFronts {
    pub fn new(topology: Topology) -> Self {
        Self {
            left: 0,
            right: topology.len() - 1,
            ring: topology.is_ring(),
        }
    }

    /// Records a firing touching indices `lo..=hi`; returns whether the
    /// contaminated zone grew.
    #[inline]
    pub fn touch(&mut self, lo: usize, hi: usize) -> bool {
        let mut grew = false;
        if lo <= self.left && hi > self.left {
            self.left = hi;
            grew = true;
        }
        if hi >= self.right && lo < self.right {
            self.right = lo;
            grew = true;
        }
        grew
    }

    /// Clean index interval, `None` if contamination met in the middle.
    /// Rings have no boundary and are always entirely clean.
    pub fn clean_indices(&self, len: usize) -> Option<(usize, usize)> {
        if self.ring {
            return Some((0, len - 1));
        }
        (self.left + 1 < self.right).then(|| (self.left + 1, self.right - 1))
    }

    pub fn clean_sites(&self, topology: Topology) -> Option<(i64, i64)> {
        self.clean_indices(topology.len())
            .map(|(a, b)| (topology.site_at(a), topology.site_at(b)))
    }

    /// Whether every site in `lo..=hi` is still clean.
    pub fn covers(&self, topology: Topology, lo: i64, hi: i64) -> bool {
        match self.clean_sites(topology) {
            Some((a, b)) => a <= lo && hi <= b,
            None => false,
        }
    }
}

/// One entry of a trajectory's event log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub from: i64,
    pub to: i64,
    pub effected: bool,
}

/// Callback invoked after every clock firing.
pub trait Observer {
    fn observe(&mut self, event: &Event, config: &Configuration);
}

impl Observer for () {
    #[inline]
    fn observe(&mut self, _: &Event, _: &Configuration) {}
}

impl<F: FnMut(&Event, &Configuration)> Observer for F {
    fn observe(&mut self, event: &Event, config: &Configuration) {
        self(event, config)
    }
}

/// Result of one run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub initial: Configuration,
    pub final_config: Configuration,
    pub t_end: f64,
    /// Firings in time order; filled only when recording is enabled.
    pub events: Vec<Event>,
    pub attempts: u64,
    pub moves: u64,
    pub fronts: TruncationFronts,
}

impl Trajectory {
    pub fn clean_sites(&self) -> Option<(i64, i64)> {
        self.fronts.clean_sites(self.initial.topology())
    }
}

/// Builder for single-layer runs.
#[derive(Debug, Clone)]
pub struct Harris {
    model: RateModel,
    reduced: Option<(i64, i64)>,
    record: bool,
    prune: bool,
}

impl Harris {
    pub fn new(model: RateModel) -> Self {
        Self {
            model,
            reduced: None,
            record: false,
            prune: false,
        }
    }

    pub fn nearest(rates: Rates) -> Self {
        Self::new(RateModel::NearestNeighbor(rates))
    }

    pub fn record_events(mut self, record: bool) -> Self {
        self.record = record;
        self
    }

    /// Skips clocks whose edges lie entirely in the contaminated zone. The
    /// final configuration is then exact on the clean interval only.
    pub fn prune(mut self, prune: bool) -> Self {
        self.prune = prune;
        self
    }

    /// Deletes every jump with an endpoint outside the open interval `(a, b)`.
    pub fn reduced(mut self, a: i64, b: i64) -> Self {
        self.reduced = Some((a, b));
        self
    }

    pub fn run(&self, config: &Configuration, t_end: f64, rng: &RngStream) -> Result<Trajectory> {
        self.run_observed(config, t_end, rng, &mut ())
    }

    pub fn run_observed<O: Observer>(
        &self,
        config: &Configuration,
        t_end: f64,
        rng: &RngStream,
        observer: &mut O,
    ) -> Result<Trajectory> {
        if t_end.is_nan() || t_end < 0.0 {
            return Err(Error::NegativeTime(t_end));
        }
        let topology = config.topology();
        let range = self.model.range();
        let mut state = config.clone();
        let window = match self.reduced {
            None => None,
            Some((a, b)) => {
                if b <= a + 1 {
                    return Err(Error::DegenerateWindow { a, b });
                }
                if a < topology.first_site() - 1 || b > topology.last_site() + 1 {
                    return Err(Error::WindowTooSmall(format!(
                        "reduced window ({a}, {b}) exceeds the topology"
                    )));
                }
                let f = topology.first_site();
                for i in 0..topology.len() {
                    let s = f + i as i64;
                    if s <= a || s >= b {
                        state.set_index(i, false);
                    }
                }
                Some(((a + 1 - f) as usize, (b - 1 - f) as usize))
            }
        };
        let initial = state.clone();
        let (mut clocks, general) = match &self.model {
            RateModel::NearestNeighbor(r) => {
                (ClockSuite::nearest_neighbor(topology, *r, rng), None)
            }
            RateModel::General(g) => {
                if topology.len() < 2 * range + 1 {
                    return Err(Error::WindowTooSmall(format!(
                        "{} sites cannot hold a radius-{range} neighbourhood",
                        topology.len()
                    )));
                }
                (ClockSuite::general(topology, g, rng), Some(g))
            }
        };
        let reads = general.is_some_and(|g| g.reads_neighborhood());
        let mut fronts = TruncationFronts::new(topology);
        let mut events = Vec::new();
        let (mut attempts, mut moves) = (0u64, 0u64);
        while clocks.peek_time() <= t_end {
            let a = clocks.next_attempt();
            if let Some((lo, hi)) = window {
                if a.from < lo || a.from > hi || a.to < lo || a.to > hi {
                    continue;
                }
            }
            attempts += 1;
            let (mut lo, mut hi) = (a.from.min(a.to), a.from.max(a.to));
            if reads {
                lo = lo.saturating_sub(range);
                hi = (hi + range).min(topology.len() - 1);
            }
            if fronts.touch(lo, hi) && self.prune {
                clocks.retire_contaminated(&fronts);
            }
            let effected = match general {
                None => state.try_jump(a.from, a.to),
                Some(g) => {
                    state.get(a.from)
                        && !state.get(a.to)
                        && accept(g, &state, &a)
                        && state.try_jump(a.from, a.to)
                }
            };
            moves += effected as u64;
            let ev = Event {
                time: a.time,
                from: topology.site_at(a.from),
                to: topology.site_at(a.to),
                effected,
            };
            if self.record {
                events.push(ev);
            }
            observer.observe(&ev, &state);
        }
        Ok(Trajectory {
            initial,
            final_config: state,
            t_end,
            events,
            attempts,
            moves,
            fronts,
        })
    }
}

fn accept(model: &GeneralModel, state: &Configuration, a: &Attempt) -> bool {
    let rate = if a.rightward {
        model.right(a.k)
    } else {
        model.left(a.k)
    };
    match rate {
        RateFn::Constant(_) => true,
        RateFn::Local(f) => {
            let topo = state.topology();
            let n = Neighborhood::from_fn(model.range(), |j| {
                topo.shift(a.from, j).is_some_and(|i| state.get(i))
            });
            unit(a.mark) < f(&n)
        }
    }
}

/// Nearest-neighbour ASEP run with the event log recorded.
pub fn run(
    config: &Configuration,
    rates: Rates,
    t_end: f64,
    rng: &RngStream,
) -> Result<Trajectory> {
    Harris::nearest(rates)
        .record_events(true)
        .run(config, t_end, rng)
}

/// Bounded-range, configuration-dependent run with the event log recorded.
pub fn run_general(
    config: &Configuration,
    model: &GeneralModel,
    t_end: f64,
    rng: &RngStream,
) -> Result<Trajectory> {
    Harris::new(RateModel::General(model.clone()))
        .record_events(true)
        .run(config, t_end, rng)
}

/// Reduced run on the open window `(a, b)`: sites outside start empty and
/// every jump touching them is deleted. Clocks inside are those of the
/// unreduced run with the same stream.
pub fn run_reduced(
    config: &Configuration,
    window: (i64, i64),
    model: &RateModel,
    t_end: f64,
    rng: &RngStream,
) -> Result<Trajectory> {
    Harris::new(model.clone())
        .reduced(window.0, window.1)
        .record_events(true)
        .run(config, t_end, rng)
}

/// Half-width of an "effectively infinite" window for observation time `t`.
///
/// Each truncation front advances by a Poisson(t) number of sites, so with
/// this margin a front reaching an observation site is far out in the tail;
/// when it happens anyway the estimators report it instead of using the run.
pub fn auto_half_width(rho: f64, rates: Rates, t: f64) -> i64 {
    let v = rates.theta() * (1.0 - 2.0 * rho);
    (v.abs() * t + 1.25 * t + 10.0 * t.sqrt() + 20.0).ceil() as i64
}

/// Segment covering `obs_lo - half_width ..= obs_hi + half_width`, widened
/// outward to whole 64-site blocks.
pub fn padded_window(obs_lo: i64, obs_hi: i64, half_width: i64) -> Topology {
    let b = BLOCK as i64;
    let lo = (obs_lo - half_width).div_euclid(b) * b;
    let hi = (obs_hi + half_width + 1).div_euclid(b) * b + b - 1;
    Topology::Segment { lo, hi }
}

/// Outcome of [`check_product_invariance`].
#[derive(Debug, Clone)]
pub struct InvarianceReport {
    pub pass: bool,
    /// Largest |estimate - product value| in standard errors.
    pub max_deviation: f64,
    pub statistics: Vec<InvarianceStatistic>,
}

#[derive(Debug, Clone)]
pub struct InvarianceStatistic {
    pub name: &'static str,
    pub product_value: f64,
    pub estimate: f64,
    pub stderr: f64,
}

/// Monte Carlo test of whether Bernoulli(`rho`) is invariant for `model`:
/// starts a ring of `ring_sites` sites from the product measure, runs to
/// `t_probe`, and compares site, pair and triple occupation frequencies with
/// their product values. Passes if all lie within 4 standard errors.
pub fn check_product_invariance(
    model: &RateModel,
    rho: f64,
    t_probe: f64,
    replicas: u64,
    ring_sites: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    check_density(rho)?;
    if replicas < 2 {
        return Err(Error::TooFewReplicas(format!("{replicas} < 2")));
    }
    let topology = Topology::ring(ring_sites)?;
    let profile = crate::lattice::DensityProfile::constant(topology, rho)?;
    let harris = Harris::new(model.clone());
    let patterns: [(&'static str, &[usize]); 4] = [
        ("site", &[0]),
        ("pair(1)", &[0, 1]),
        ("pair(2)", &[0, 2]),
        ("triple", &[0, 1, 2]),
    ];
    let mut sums = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for r in 0..replicas {
        let rng = RngStream::replica(seed, 0x1a, r);
        let c0 = crate::lattice::sample_config(topology, &profile, &rng)?;
        let traj = harris.run(&c0, t_probe, &rng)?;
        let c = &traj.final_config;
        for (s, (_, offs)) in patterns.iter().enumerate() {
            let hits = (0..ring_sites)
                .filter(|&i| offs.iter().all(|&o| c.get((i + o) % ring_sites)))
                .count() as f64
                / ring_sites as f64;
            sums[s] += hits;
            sq[s] += hits * hits;
        }
    }
    let n = replicas as f64;
    let mut statistics = Vec::new();
    let mut max_dev = 0.0f64;
    let mut pass = true;
    for (s, (name, offs)) in patterns.iter().enumerate() {
        let mean = sums[s] / n;
        let var = ((sq[s] - n * mean * mean) / (n - 1.0)).max(0.0);
        let se = (var / n).sqrt();
        let product_value = rho.powi(offs.len() as i32);
        let dev = (mean - product_value).abs();
        let z = if se > 0.0 {
            dev / se
        } else if dev > 1e-12 {
            f64::INFINITY
        } else {
            0.0
        };
        max_dev = max_dev.max(z);
        pass &= z <= 4.0;
        statistics.push(InvarianceStatistic {
            name,
            product_value,
            estimate: mean,
            stderr: se,
        });
    }
    Ok(InvarianceReport {
        pass,
        max_deviation: max_dev,
        statistics,
    })
}
