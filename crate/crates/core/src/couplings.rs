//! Basic coupling of ordered layers, second class particles, the
//! label-walk coupling that keeps two second class particles ordered, and
//! label-tail measurements.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::engine::{ClockSuite, TruncationFronts};
use crate::lattice::{sample_coupled, Configuration, DensityProfile, Rates, Topology};
use crate::rng::{exp_gap, unit, Lane, RngStream};
use crate::stats::{fan_out, EstimateWithCI, Histogram};
use crate::{Error, Result};

/// Configurations evolving under one set of clocks, declared ordered
/// `layers[0] >= layers[1] >= ...`.
#[derive(Debug, Clone)]
pub struct LayeredState {
    layers: Vec<Configuration>,
    /// Discrepancy indices between `layers[i]` and `layers[i + 1]`.
    discrepancies: Vec<Vec<usize>>,
    single: Vec<usize>,
}

impl LayeredState {
    pub fn new(layers: Vec<Configuration>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInitialData("no layers".into()));
        }
        let topo = layers[0].topology();
        for (i, l) in layers.iter().enumerate() {
            if l.topology() != topo {
                return Err(Error::InvalidInitialData(format!(
                    "layer {i} lives on another topology"
                )));
            }
        }
        for i in 0..layers.len() - 1 {
            if !layers[i + 1].le(&layers[i]) {
                return Err(Error::OrderViolation(format!(
                    "layer {} is not below layer {i}",
                    i + 1
                )));
            }
        }
        let discrepancies = (0..layers.len() - 1)
            .map(|i| layers[i].excess_over(&layers[i + 1]))
            .collect();
        Ok(Self {
            layers,
            discrepancies,
            single: Vec::new(),
        })
    }

    /// Declares that layers `pair` and `pair + 1` differ at exactly one site.
    pub fn declare_single(mut self, pair: usize) -> Result<Self> {
        match self.discrepancies.get(pair) {
            Some(d) if d.len() == 1 => {
                self.single.push(pair);
                Ok(self)
            }
            Some(d) => Err(Error::InvalidInitialData(format!(
                "layers {pair} and {} differ at {} sites",
                pair + 1,
                d.len()
            ))),
            None => Err(Error::InvalidInitialData(format!("no layer pair {pair}"))),
        }
    }

    pub fn layers(&self) -> &[Configuration] {
        &self.layers
    }

    pub fn topology(&self) -> Topology {
        self.layers[0].topology()
    }

    /// Discrepancy sites between layers `pair` and `pair + 1`, unordered.
    pub fn discrepancies(&self, pair: usize) -> Vec<i64> {
        let t = self.topology();
        self.discrepancies[pair]
            .iter()
            .map(|&i| t.site_at(i))
            .collect()
    }

    fn apply(&mut self, from: usize, to: usize) {
        for l in &mut self.layers {
            l.try_jump(from, to);
        }
        for (pair, d) in self.discrepancies.iter_mut().enumerate() {
            let (up, low) = (&self.layers[pair], &self.layers[pair + 1]);
            for s in [from, to] {
                assert!(
                    !low.get(s) || up.get(s),
                    "layer order broken at index {s} between layers {pair} and {}",
                    pair + 1
                );
                let is = up.get(s) && !low.get(s);
                match d.iter().position(|&x| x == s) {
                    Some(k) if !is => {
                        d.swap_remove(k);
                    }
                    None if is => d.push(s),
                    _ => {}
                }
            }
        }
        for &pair in &self.single {
            assert_eq!(self.discrepancies[pair].len(), 1, "single discrepancy lost");
        }
    }
}

/// Outcome of [`run_basic_coupling`].
#[derive(Debug, Clone)]
pub struct JointTrajectory {
    pub initial: Vec<Configuration>,
    pub state: LayeredState,
    /// For each declared single-discrepancy pair, the discrepancy site after
    /// every change, starting with its position at time 0.
    pub paths: Vec<Vec<(f64, i64)>>,
    pub attempts: u64,
    pub fronts: TruncationFronts,
}

/// Evolves all layers with the same nearest-neighbour clocks.
pub fn run_basic_coupling(
    mut state: LayeredState,
    rates: Rates,
    t_end: f64,
    rng: &RngStream,
) -> Result<JointTrajectory> {
    if t_end.is_nan() || t_end < 0.0 {
        return Err(Error::NegativeTime(t_end));
    }
    let topo = state.topology();
    let initial = state.layers.clone();
    let mut paths: Vec<Vec<(f64, i64)>> = state
        .single
        .iter()
        .map(|&p| vec![(0.0, topo.site_at(state.discrepancies[p][0]))])
        .collect();
    let mut clocks = ClockSuite::nearest_neighbor(topo, rates, rng);
    let mut fronts = TruncationFronts::new(topo);
    let mut attempts = 0;
    while clocks.peek_time() <= t_end {
        let a = clocks.next_attempt();
        attempts += 1;
        fronts.touch(a.from.min(a.to), a.from.max(a.to));
        state.apply(a.from, a.to);
        for (k, &p) in state.single.iter().enumerate() {
            let s = topo.site_at(state.discrepancies[p][0]);
            if paths[k].last().unwrap().1 != s {
                paths[k].push((a.time, s));
            }
        }
    }
    Ok(JointTrajectory {
        initial,
        state,
        paths,
        attempts,
        fronts,
    })
}

/// Pair `(ω⁺, ω)` with `ω⁺ = ω + δ_Q`, stored as `ω⁺` and the index of Q.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecondClassProcess {
    upper: Configuration,
    q: usize,
}

impl SecondClassProcess {
    pub fn new(upper: Configuration, q_site: i64) -> Result<Self> {
        let q = upper
            .topology()
            .index_of(q_site)
            .ok_or(Error::SiteOutOfRange { site: q_site })?;
        if !upper.get(q) {
            return Err(Error::InvalidInitialData(format!(
                "upper layer empty at second class site {q_site}"
            )));
        }
        Ok(Self { upper, q })
    }

    /// Applies one clock firing under the basic coupling.
    #[inline]
    pub fn apply(&mut self, from: usize, to: usize) {
        if self.q == to {
            // the lower layer's particle takes Q's place
            if self.upper.get(from) {
                self.q = from;
            }
        } else if self.upper.try_jump(from, to) && self.q == from {
            self.q = to;
        }
    }

    pub fn q_index(&self) -> usize {
        self.q
    }

    pub fn q_site(&self) -> i64 {
        self.upper.topology().site_at(self.q)
    }

    pub fn upper(&self) -> &Configuration {
        &self.upper
    }

    pub fn lower(&self) -> Configuration {
        let mut c = self.upper.clone();
        c.set_index(self.q, false);
        c
    }
}

/// Final state of a second class particle run.
#[derive(Debug, Clone)]
pub struct SecondClassRun {
    pub process: SecondClassProcess,
    pub fronts: TruncationFronts,
}

impl SecondClassRun {
    pub fn q_site(&self) -> i64 {
        self.process.q_site()
    }

    /// Whether Q's final position is unaffected by the window truncation.
    pub fn q_clean(&self) -> bool {
        let t = self.process.upper.topology();
        let q = self.q_site();
        self.fronts.covers(t, q, q)
    }
}

/// Runs `(ω⁺, Q)` to `t_end` on the nearest-neighbour clocks of `rng`.
pub fn run_second_class(
    process: SecondClassProcess,
    rates: Rates,
    t_end: f64,
    rng: &RngStream,
) -> Result<SecondClassRun> {
    drive_second_class(process, rates, t_end, rng, false)
}

/// Like [`run_second_class`] but skips clocks whose edges are entirely
/// contaminated by the window boundary. Q and every clean site are exact;
/// the contaminated part of the final configuration is not meaningful.
pub fn track_second_class(
    process: SecondClassProcess,
    rates: Rates,
    t_end: f64,
    rng: &RngStream,
) -> Result<SecondClassRun> {
    drive_second_class(process, rates, t_end, rng, true)
}

fn drive_second_class(
    mut process: SecondClassProcess,
    rates: Rates,
    t_end: f64,
    rng: &RngStream,
    prune: bool,
) -> Result<SecondClassRun> {
    if t_end.is_nan() || t_end < 0.0 {
        return Err(Error::NegativeTime(t_end));
    }
    let topo = process.upper.topology();
    let mut clocks = ClockSuite::nearest_neighbor(topo, rates, rng);
    let mut fronts = TruncationFronts::new(topo);
    while clocks.peek_time() <= t_end {
        let a = clocks.next_attempt();
        if fronts.touch(a.from.min(a.to), a.from.max(a.to)) && prune {
            clocks.retire_contaminated(&fronts);
        }
        process.apply(a.from, a.to);
    }
    Ok(SecondClassRun { process, fronts })
}

/// Stationary second class particle set-up: `ω_i ~ Bernoulli(ρ)` for
/// `i != 0` from the site uniforms of `rng`, `ω⁺_0 = 1`, Q at 0.
pub fn stationary_second_class(
    topology: Topology,
    rho: f64,
    rng: &RngStream,
) -> Result<SecondClassProcess> {
    let profile = DensityProfile::constant(topology, rho)?.with_site(0, 1.0)?;
    let upper = crate::lattice::sample_config(topology, &profile, rng)?;
    SecondClassProcess::new(upper, 0)
}

/// Three layers `ω >= ω⁻ >= η` with `ω - ω⁻ = δ_Q`, tracking the label of
/// Q among the `ω - η` particles.
#[derive(Debug, Clone)]
pub struct LabelProcess {
    pair: SecondClassProcess,
    eta: Configuration,
    label: i64,
}

impl LabelProcess {
    pub fn new(upper: Configuration, q_site: i64, eta: Configuration) -> Result<Self> {
        let pair = SecondClassProcess::new(upper, q_site)?;
        if !eta.le(&pair.lower()) {
            return Err(Error::OrderViolation("η is not below ω⁻".into()));
        }
        Ok(Self {
            pair,
            eta,
            label: 0,
        })
    }

    /// Set-up with `ω_i ~ Bernoulli(ρ)`, `η_i ~ Bernoulli(λ)` off the origin,
    /// coupled through shared site uniforms, `ω_0 = 1`, `η_0 = 0`.
    pub fn stationary(topology: Topology, rho: f64, lambda: f64, rng: &RngStream) -> Result<Self> {
        if lambda > rho {
            return Err(Error::InvalidInitialData(format!(
                "λ = {lambda} exceeds ρ = {rho}"
            )));
        }
        let up = DensityProfile::constant(topology, rho)?.with_site(0, 1.0)?;
        let low = DensityProfile::constant(topology, lambda)?.with_site(0, 0.0)?;
        let mut c = sample_coupled(topology, &[&up, &low], rng)?;
        let eta = c.pop().unwrap();
        Self::new(c.pop().unwrap(), 0, eta)
    }

    #[inline]
    pub fn apply(&mut self, from: usize, to: usize) {
        let q = self.pair.q;
        if q == to && self.pair.upper.get(from) && !self.eta.get(from) {
            // Q exchanges places with an ω⁻ - η particle
            self.label += if from > to { 1 } else { -1 };
        }
        self.eta.try_jump(from, to);
        self.pair.apply(from, to);
        debug_assert!(!self.eta.get(self.pair.q));
    }

    pub fn label(&self) -> i64 {
        self.label
    }

    /// Label recomputed from counts: the rank of Q among the `ω - η`
    /// particles now minus the rank of the origin at time 0.
    pub fn label_by_count(
        &self,
        initial_upper: &Configuration,
        initial_eta: &Configuration,
        origin: usize,
    ) -> i64 {
        let now = self
            .pair
            .upper
            .excess_count_range(&self.eta, 0, self.pair.q) as i64
            - 1;
        let then = initial_upper.excess_count_range(initial_eta, 0, origin) as i64 - 1;
        now - then
    }

    pub fn pair(&self) -> &SecondClassProcess {
        &self.pair
    }

    pub fn eta(&self) -> &Configuration {
        &self.eta
    }
}

/// Runs a label process; returns the final process and truncation fronts.
/// Clocks in the contaminated zone are skipped, so only the label, Q and
/// clean sites are exact.
pub fn run_label_process(
    mut p: LabelProcess,
    rates: Rates,
    t_end: f64,
    rng: &RngStream,
) -> Result<(LabelProcess, TruncationFronts)> {
    if t_end.is_nan() || t_end < 0.0 {
        return Err(Error::NegativeTime(t_end));
    }
    let topo = p.eta.topology();
    let mut clocks = ClockSuite::nearest_neighbor(topo, rates, rng);
    let mut fronts = TruncationFronts::new(topo);
    while clocks.peek_time() <= t_end {
        let a = clocks.next_attempt();
        if fronts.touch(a.from.min(a.to), a.from.max(a.to)) {
            clocks.retire_contaminated(&fronts);
        }
        p.apply(a.from, a.to);
    }
    Ok((p, fronts))
}

/// Empirical tail of the label at one `k`, with the bound `e^{-2θk}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelTail {
    pub k: i64,
    pub tail: EstimateWithCI,
    pub bound: f64,
}

impl LabelTail {
    pub fn within_bound(&self) -> bool {
        self.tail.estimate <= self.bound + 3.0 * self.tail.stderr
    }
}

/// Measures `P(m_Q(t) >= k)` for each `k` over `replicas` replicas.
#[allow(clippy::too_many_arguments)]
pub fn measure_label_tail(
    rho: f64,
    lambda: f64,
    rates: Rates,
    t: f64,
    k_values: &[i64],
    replicas: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<LabelTail>> {
    if !(0.0 < rho && rho < 1.0) {
        return Err(Error::DensityOutOfRange(rho));
    }
    if !(0.0 < lambda && lambda < rho) {
        return Err(Error::InvalidInitialData(format!(
            "need 0 < λ < ρ, got λ = {lambda}"
        )));
    }
    let theta = rates.theta();
    for &k in k_values {
        if k < 0 {
            return Err(Error::InvalidSpec(format!("negative label threshold {k}")));
        }
        let expected = replicas as f64 * (-2.0 * theta * k as f64).exp();
        if expected < 5.0 {
            return Err(Error::TooFewReplicas(format!(
                "{replicas} replicas give {expected:.2} expected exceedances at k = {k}"
            )));
        }
    }
    let half = crate::engine::auto_half_width(rho, rates, t);
    let topo = crate::engine::padded_window(0, 0, half);
    let hist = fan_out(replicas, workers, Histogram::new, |r, h| {
        let rng = RngStream::replica(seed, 0x4c, r);
        let p = LabelProcess::stationary(topo, rho, lambda, &rng)?;
        let (p, fronts) = run_label_process(p, rates, t, &rng)?;
        let q = p.pair.q_site();
        if !fronts.covers(topo, q, q) {
            return Err(Error::BoundaryContamination(format!(
                "replica {r}: Q at {q} reached by the boundary"
            )));
        }
        h.push(p.label);
        Ok(())
    })?;
    Ok(k_values
        .iter()
        .map(|&k| LabelTail {
            k,
            tail: hist.tail_ge(k),
            bound: (-2.0 * theta * k as f64).exp(),
        })
        .collect())
}

/// Adjacency structure of the `ζ - ξ` particles.
#[derive(Debug, Clone, Copy)]
pub struct EnvironmentView<'a> {
    zeta: &'a Configuration,
    xi: &'a Configuration,
}

impl<'a> EnvironmentView<'a> {
    pub fn new(zeta: &'a Configuration, xi: &'a Configuration) -> Self {
        Self { zeta, xi }
    }

    #[inline]
    pub fn is_x(&self, index: usize) -> bool {
        self.zeta.get(index) && !self.xi.get(index)
    }

    fn x_at(&self, index: usize, offset: i64) -> Option<usize> {
        self.zeta
            .topology()
            .shift(index, offset)
            .filter(|&j| self.is_x(j))
    }

    /// Whether an X particle sits right after the X particle at `index`
    /// (the environment bit of the next label).
    pub fn right_adjacent(&self, index: usize) -> bool {
        self.x_at(index, 1).is_some()
    }

    pub fn left_adjacent(&self, index: usize) -> bool {
        self.x_at(index, -1).is_some()
    }
}

/// Label moves available from positions `(pa, pb)` of the two tracked X
/// particles, as `((new pa, new pb), rate)`.
pub fn label_transitions(
    env: &EnvironmentView<'_>,
    pa: usize,
    pb: usize,
    rates: Rates,
) -> Vec<((usize, usize), f64)> {
    let (p, q) = (rates.p(), rates.q());
    let mut out = Vec::with_capacity(4);
    let mut add = |target: (usize, usize), rate: f64| {
        if rate > 0.0 {
            out.push((target, rate));
        }
    };
    if pa == pb {
        if let Some(r) = env.x_at(pa, 1) {
            add((pa, r), p - q);
            add((r, r), q);
        }
        if let Some(l) = env.x_at(pa, -1) {
            add((l, pb), p - q);
            add((l, l), q);
        }
    } else {
        if let Some(r) = env.x_at(pa, 1) {
            add((r, pb), q);
        }
        if let Some(l) = env.x_at(pa, -1) {
            add((l, pb), p);
        }
        if let Some(r) = env.x_at(pb, 1) {
            add((pa, r), p);
        }
        if let Some(l) = env.x_at(pb, -1) {
            add((pa, l), q);
        }
    }
    out
}

/// Outcome of [`run_concavity_coupling`].
#[derive(Debug, Clone)]
pub struct ConcavityRun {
    pub zeta: Configuration,
    pub xi: Configuration,
    pub q_zeta: i64,
    pub q_xi: i64,
    pub primary_events: u64,
    pub label_events: u64,
    /// False if either tracked particle may have felt the window boundary.
    pub clean: bool,
}

impl ConcavityRun {
    /// `ζ⁻ = ζ - δ_{Qζ}`.
    pub fn zeta_minus(&self) -> Configuration {
        let mut c = self.zeta.clone();
        c.set(self.q_zeta, false).expect("Qζ inside the window");
        c
    }

    /// `ξ⁺ = ξ + δ_{Qξ}`.
    pub fn xi_plus(&self) -> Configuration {
        let mut c = self.xi.clone();
        c.set(self.q_xi, true).expect("Qξ inside the window");
        c
    }
}

/// Couples `(ζ⁻, Qζ)` and `(ξ, Qξ)` so that `Qζ(t) <= Qξ(t)` for all t.
///
/// `ζ >= ξ` evolve in basic coupling on the clocks of `rng`; Qζ and Qξ are
/// the X particles with labels a <= b, where labels move by the separate
/// rules of [`label_transitions`]. `observer` sees `(time, Qζ, Qξ)` after
/// every event.
#[allow(clippy::too_many_arguments)]
pub fn run_concavity_coupling(
    zeta0: &Configuration,
    xi0: &Configuration,
    q_zeta0: i64,
    q_xi0: i64,
    rates: Rates,
    t_end: f64,
    rng: &RngStream,
    mut observer: impl FnMut(f64, i64, i64),
) -> Result<ConcavityRun> {
    if t_end.is_nan() || t_end < 0.0 {
        return Err(Error::NegativeTime(t_end));
    }
    let topo = zeta0.topology();
    if xi0.topology() != topo {
        return Err(Error::InvalidInitialData(
            "ζ and ξ live on different topologies".into(),
        ));
    }
    if !xi0.le(zeta0) {
        return Err(Error::OrderViolation("ξ(0) is not below ζ(0)".into()));
    }
    if q_zeta0 > q_xi0 {
        return Err(Error::OrderViolation(format!(
            "Qζ(0) = {q_zeta0} exceeds Qξ(0) = {q_xi0}"
        )));
    }
    let idx = |s: i64| topo.index_of(s).ok_or(Error::SiteOutOfRange { site: s });
    let (mut pa, mut pb) = (idx(q_zeta0)?, idx(q_xi0)?);
    for s in [pa, pb] {
        if !(zeta0.get(s) && !xi0.get(s)) {
            return Err(Error::InvalidInitialData(format!(
                "site {} is not a ζ - ξ discrepancy",
                topo.site_at(s)
            )));
        }
    }
    let mut zeta = zeta0.clone();
    let mut xi = xi0.clone();
    let mut clocks = ClockSuite::nearest_neighbor(topo, rates, rng);
    let mut aux: ChaCha8Rng = rng.lane(Lane::Aux);
    let mut fronts = TruncationFronts::new(topo);
    let mut tainted = false;
    let (mut primary_events, mut label_events) = (0u64, 0u64);
    let mut now = 0.0;
    loop {
        let moves = label_transitions(&EnvironmentView::new(&zeta, &xi), pa, pb, rates);
        let total: f64 = moves.iter().map(|m| m.1).sum();
        let label_time = if total > 0.0 {
            now + exp_gap(&mut aux, total)
        } else {
            f64::INFINITY
        };
        let clock_time = clocks.peek_time();
        if label_time.min(clock_time) > t_end {
            break;
        }
        if label_time < clock_time {
            now = label_time;
            let mut u = unit(aux.next_u64()) * total;
            let mut chosen = moves[moves.len() - 1].0;
            for &(target, rate) in &moves {
                if u < rate {
                    chosen = target;
                    break;
                }
                u -= rate;
            }
            let (lo, hi) = (
                pa.min(pb).saturating_sub(1),
                (pa.max(pb) + 1).min(topo.len() - 1),
            );
            if !topo.is_ring() && !fronts.covers(topo, topo.site_at(lo), topo.site_at(hi)) {
                tainted = true;
            }
            (pa, pb) = chosen;
            label_events += 1;
        } else {
            let a = clocks.next_attempt();
            now = a.time;
            fronts.touch(a.from.min(a.to), a.from.max(a.to));
            zeta.try_jump(a.from, a.to);
            xi.try_jump(a.from, a.to);
            debug_assert!(!xi.get(a.from) || zeta.get(a.from));
            debug_assert!(!xi.get(a.to) || zeta.get(a.to));
            let env = EnvironmentView::new(&zeta, &xi);
            for p in [&mut pa, &mut pb] {
                if *p == a.from || *p == a.to {
                    if !env.is_x(*p) {
                        *p = if *p == a.from { a.to } else { a.from };
                    }
                    debug_assert!(env.is_x(*p));
                }
            }
            primary_events += 1;
        }
        let (qa, qb) = (topo.site_at(pa), topo.site_at(pb));
        assert!(
            topo.is_ring() || qa <= qb,
            "second class order broken at t = {now}: Qζ = {qa} > Qξ = {qb}"
        );
        observer(now, qa, qb);
    }
    let (qa, qb) = (topo.site_at(pa), topo.site_at(pb));
    let clean = !tainted && fronts.covers(topo, qa, qa) && fronts.covers(topo, qb, qb);
    Ok(ConcavityRun {
        zeta,
        xi,
        q_zeta: qa,
        q_xi: qb,
        primary_events,
        label_events,
        clean,
    })
}

/// Standard set-up: `ζ_i ~ Bernoulli(ρ)`, `ξ_i ~ Bernoulli(λ)` coupled
/// through the site uniforms, `ζ_0 = 1`, `ξ_0 = 0`, both second class
/// particles at the origin.
pub fn concavity_initial(
    topology: Topology,
    rho: f64,
    lambda: f64,
    rng: &RngStream,
) -> Result<(Configuration, Configuration)> {
    if lambda > rho {
        return Err(Error::InvalidInitialData(format!(
            "λ = {lambda} exceeds ρ = {rho}"
        )));
    }
    let up = DensityProfile::constant(topology, rho)?.with_site(0, 1.0)?;
    let low = DensityProfile::constant(topology, lambda)?.with_site(0, 0.0)?;
    let mut c = sample_coupled(topology, &[&up, &low], rng)?;
    let xi = c.pop().unwrap();
    Ok((c.pop().unwrap(), xi))
}
