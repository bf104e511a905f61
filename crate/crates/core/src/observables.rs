//! Currents and Monte Carlo estimators for the second class particle
//! identities, Ψ(t) and exponent fits.

use serde::{Deserialize, Serialize};

use crate::couplings::{stationary_second_class, track_second_class};
use crate::engine::{auto_half_width, padded_window, Harris};
use crate::lattice::{
    char_speed, check_density, sample_config, Configuration, DensityProfile, Rates, Topology,
};
use crate::rng::RngStream;
use crate::stats::{fan_out, EstimateWithCI, Histogram, Merge, Moments, MIN_REPLICAS};
use crate::{Error, Result};

pub use crate::stats::EstimateWithCI as Estimate;

/// Particle positions at time 0 and time t, matched by label. Labels are
/// the order of particles, which nearest-neighbour exclusion preserves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurrentLedger {
    before: Vec<i64>,
    after: Vec<i64>,
}

impl CurrentLedger {
    pub fn new(initial: &Configuration, last: &Configuration) -> Result<Self> {
        let before = initial.positions();
        let after = last.positions();
        if before.len() != after.len() {
            return Err(Error::InvalidInitialData(format!(
                "{} particles at time 0 but {} at time t",
                before.len(),
                after.len()
            )));
        }
        Ok(Self { before, after })
    }

    /// Net number of particles crossing the space-time path from
    /// `(1/2, 0)` to `(x + 1/2, t)` left to right.
    pub fn current(&self, x: i64) -> i64 {
        let mut net = 0;
        for (&a, &b) in self.before.iter().zip(&self.after) {
            if a <= 0 && b > x {
                net += 1;
            } else if a > 0 && b <= x {
                net -= 1;
            }
        }
        net
    }

    pub fn before(&self) -> &[i64] {
        &self.before
    }

    pub fn after(&self) -> &[i64] {
        &self.after
    }
}

/// The same current from counts: `N_{[x+1, ∞)}(t) - N_{[1, ∞)}(0)`.
pub fn current_by_count(initial: &Configuration, last: &Configuration, x: i64) -> i64 {
    let hi = initial.topology().last_site();
    last.count_sites(x + 1, hi) as i64 - initial.count_sites(1, hi) as i64
}

/// Replica budget and seeding shared by the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub replicas: u64,
    pub seed: u64,
    pub workers: usize,
    /// Window half-width override; `None` uses [`auto_half_width`].
    pub half_width: Option<i64>,
}

impl MonteCarlo {
    pub fn new(replicas: u64, seed: u64) -> Self {
        Self {
            replicas,
            seed,
            workers: 1,
            half_width: None,
        }
    }

    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn half_width(mut self, half_width: Option<i64>) -> Self {
        self.half_width = half_width;
        self
    }

    fn check(&self) -> Result<()> {
        if self.replicas < MIN_REPLICAS {
            return Err(Error::TooFewReplicas(format!(
                "{} replicas, at least {MIN_REPLICAS} needed",
                self.replicas
            )));
        }
        Ok(())
    }

    fn window(&self, obs_lo: i64, obs_hi: i64, rho: f64, rates: Rates, t: f64) -> Topology {
        let half = self
            .half_width
            .unwrap_or_else(|| auto_half_width(rho, rates, t));
        padded_window(obs_lo, obs_hi, half)
    }
}

fn check_time(t: f64) -> Result<()> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    Ok(())
}

fn open_density(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::DensityOutOfRange(rho));
    }
    Ok(())
}

fn contaminated(r: u64, what: &str) -> Error {
    Error::BoundaryContamination(format!(
        "replica {r}: {what} reached by the window boundary"
    ))
}

/// Stream purposes, one per independent replica pool.
mod purpose {
    pub const COVARIANCE: u16 = 0x21;
    pub const SECOND_CLASS: u16 = 0x22;
    pub const CURRENT: u16 = 0x31;
    pub const DERIVATIVE: u16 = 0x41;
}

/// Histogram of Q(t) for a second class particle started at the origin in
/// a Bernoulli(`rho`) environment. `rho = 0` is allowed.
pub fn second_class_histogram(
    rho: f64,
    rates: Rates,
    t: f64,
    mc: &MonteCarlo,
) -> Result<Histogram> {
    check_density(rho)?;
    if rho == 1.0 {
        return Err(Error::DensityOutOfRange(rho));
    }
    check_time(t)?;
    mc.check()?;
    let topo = mc.window(0, 0, rho, rates, t);
    fan_out(mc.replicas, mc.workers, Histogram::new, |r, h| {
        let rng = RngStream::replica(mc.seed, purpose::SECOND_CLASS, r);
        let run = track_second_class(stationary_second_class(topo, rho, &rng)?, rates, t, &rng)?;
        if !run.q_clean() {
            return Err(contaminated(r, "Q"));
        }
        h.push(run.q_site());
        Ok(())
    })
}

/// Counts for `Cov[ω_j(t), ω_0(0)]`: replicas with `ω_j(t) = 1` split by
/// `ω_0(0)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct PairCounts {
    n: u64,
    with_origin: Vec<u64>,
    without_origin: Vec<u64>,
}

impl Merge for PairCounts {
    fn merge(&mut self, o: Self) {
        self.n += o.n;
        self.with_origin.merge(o.with_origin);
        self.without_origin.merge(o.without_origin);
    }
}

/// One lag of [`estimate_two_point`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPoint {
    pub j: i64,
    /// `Cov[ω_j(t), ω_0(0)]` from stationary replicas.
    pub covariance: EstimateWithCI,
    /// `ρ(1-ρ) P(Q(t) = j)` from second class replicas.
    pub second_class: EstimateWithCI,
}

impl TwoPoint {
    pub fn difference(&self) -> EstimateWithCI {
        self.covariance.minus(self.second_class)
    }
}

/// Both sides of the two-point identity for every lag in `j_range`
/// (inclusive), each from its own replica pool of size `mc.replicas`.
pub fn estimate_two_point(
    rho: f64,
    rates: Rates,
    t: f64,
    j_range: (i64, i64),
    mc: &MonteCarlo,
) -> Result<Vec<TwoPoint>> {
    open_density(rho)?;
    check_time(t)?;
    mc.check()?;
    let (jlo, jhi) = j_range;
    if jlo > jhi {
        return Err(Error::InvalidSpec(format!("empty lag range {jlo}..={jhi}")));
    }
    let lags = (jhi - jlo + 1) as usize;
    let topo = mc.window(jlo.min(0), jhi.max(0), rho, rates, t);
    let profile = DensityProfile::constant(topo, rho)?;
    let harris = Harris::nearest(rates).prune(true);
    let origin = topo.index_of(0).expect("window contains the origin");
    let counts = fan_out(
        mc.replicas,
        mc.workers,
        || PairCounts {
            n: 0,
            with_origin: vec![0; lags],
            without_origin: vec![0; lags],
        },
        |r, acc| {
            let rng = RngStream::replica(mc.seed, purpose::COVARIANCE, r);
            let c0 = sample_config(topo, &profile, &rng)?;
            let traj = harris.run(&c0, t, &rng)?;
            if !traj.fronts.covers(topo, jlo, jhi) {
                return Err(contaminated(r, "a lag site"));
            }
            acc.n += 1;
            let bins = if c0.get(origin) {
                &mut acc.with_origin
            } else {
                &mut acc.without_origin
            };
            for (k, j) in (jlo..=jhi).enumerate() {
                bins[k] += traj.final_config.get(topo.index_of(j).unwrap()) as u64;
            }
            Ok(())
        },
    )?;
    let hist = second_class_histogram(rho, rates, t, mc)?;
    let n = counts.n as f64;
    let w = rho * (1.0 - rho);
    Ok((jlo..=jhi)
        .enumerate()
        .map(|(k, j)| {
            // per replica Y = ω_j(t) (ω_0(0) - ρ) takes values 1-ρ, -ρ or 0
            let a = counts.with_origin[k] as f64;
            let b = counts.without_origin[k] as f64;
            let mean = (a * (1.0 - rho) - b * rho) / n;
            let second = (a * (1.0 - rho).powi(2) + b * rho * rho) / n;
            let var = (second - mean * mean) * n / (n - 1.0);
            TwoPoint {
                j,
                covariance: EstimateWithCI::new(mean, (var.max(0.0) / n).sqrt(), counts.n),
                second_class: hist.proportion(j).scale(w),
            }
        })
        .collect())
}

/// Histogram of `J_z(t)` in the stationary process, exact to the integer.
pub fn current_moments(rho: f64, rates: Rates, t: f64, z: i64, mc: &MonteCarlo) -> Result<Moments> {
    check_density(rho)?;
    check_time(t)?;
    mc.check()?;
    let topo = mc.window(z.min(0), z.max(0) + 1, rho, rates, t);
    let profile = DensityProfile::constant(topo, rho)?;
    let harris = Harris::nearest(rates).prune(true);
    fan_out(mc.replicas, mc.workers, Moments::new, |r, m| {
        let rng = RngStream::replica(mc.seed, purpose::CURRENT, r);
        let c0 = sample_config(topo, &profile, &rng)?;
        let traj = harris.run(&c0, t, &rng)?;
        if !traj.fronts.covers(topo, z, z + 1) {
            return Err(contaminated(r, "the current bond"));
        }
        m.push(current_by_count(&c0, &traj.final_config, z));
        Ok(())
    })
}

/// Estimate of `E J_x(t)` and its exact value `tH(ρ) - xρ`.
pub fn mean_current(
    rho: f64,
    rates: Rates,
    t: f64,
    x: i64,
    mc: &MonteCarlo,
) -> Result<(EstimateWithCI, f64)> {
    let m = current_moments(rho, rates, t, x, mc)?;
    Ok((
        m.mean_estimate(),
        crate::lattice::mean_current(rho, rates, x, t)?,
    ))
}

/// Estimate of `E Q(t)` and its exact value `t H'(ρ)`.
pub fn mean_q(rho: f64, rates: Rates, t: f64, mc: &MonteCarlo) -> Result<(EstimateWithCI, f64)> {
    let h = second_class_histogram(rho, rates, t, mc)?;
    Ok((h.mean_of(|q| q as f64), t * char_speed(rho, rates)?))
}

/// Outcome of [`variance_identity_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceCheck {
    /// Sample variance of `J_z(t)`.
    pub variance: EstimateWithCI,
    /// `ρ(1-ρ) E|Q(t) - z|`.
    pub second_class: EstimateWithCI,
}

impl VarianceCheck {
    pub fn difference(&self) -> EstimateWithCI {
        self.variance.minus(self.second_class)
    }
}

/// Both members of the current-variance identity from independent pools.
pub fn variance_identity_check(
    rho: f64,
    rates: Rates,
    t: f64,
    z: i64,
    mc: &MonteCarlo,
) -> Result<VarianceCheck> {
    open_density(rho)?;
    let m = current_moments(rho, rates, t, z, mc)?;
    let h = second_class_histogram(rho, rates, t, mc)?;
    Ok(VarianceCheck {
        variance: m.variance_estimate(),
        second_class: h.mean_of(|q| (q - z).abs() as f64).scale(rho * (1.0 - rho)),
    })
}

/// Outcome of [`derivative_identity_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    /// `(Ê^{ρ+δ} J_z - Ê^{ρ-δ} J_z) / 2δ` from monotonically coupled pairs.
    pub finite_difference: EstimateWithCI,
    /// `Ê^ρ Q(t) - z`.
    pub second_class: EstimateWithCI,
    /// False when the finite difference is not resolved: its standard error
    /// exceeds its magnitude and the reference's.
    pub resolved: bool,
}

impl DerivativeCheck {
    pub fn difference(&self) -> EstimateWithCI {
        self.finite_difference.minus(self.second_class)
    }
}

/// Central difference of `E J_z(t)` in ρ against `E Q(t) - z`.
pub fn derivative_identity_check(
    rho: f64,
    delta: f64,
    rates: Rates,
    t: f64,
    z: i64,
    mc: &MonteCarlo,
) -> Result<DerivativeCheck> {
    if !(delta > 0.0 && rho - delta > 0.0 && rho + delta < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "need 0 < ρ - δ < ρ + δ < 1, got ρ = {rho}, δ = {delta}"
        )));
    }
    check_time(t)?;
    mc.check()?;
    let half = mc.half_width.unwrap_or_else(|| {
        auto_half_width(rho + delta, rates, t).max(auto_half_width(rho - delta, rates, t))
    });
    let topo = padded_window(z.min(0), z.max(0) + 1, half);
    let hi = DensityProfile::constant(topo, rho + delta)?;
    let lo = DensityProfile::constant(topo, rho - delta)?;
    let harris = Harris::nearest(rates).prune(true);
    let diff = fan_out(mc.replicas, mc.workers, Moments::new, |r, m| {
        let rng = RngStream::replica(mc.seed, purpose::DERIVATIVE, r);
        let mut js = [0i64; 2];
        for (k, prof) in [&hi, &lo].into_iter().enumerate() {
            let c0 = sample_config(topo, prof, &rng)?;
            let traj = harris.run(&c0, t, &rng)?;
            if !traj.fronts.covers(topo, z, z + 1) {
                return Err(contaminated(r, "the current bond"));
            }
            js[k] = current_by_count(&c0, &traj.final_config, z);
        }
        m.push(js[0] - js[1]);
        Ok(())
    })?;
    let finite_difference = diff.mean_estimate().scale(1.0 / (2.0 * delta));
    let h = second_class_histogram(rho, rates, t, mc)?;
    let second_class = h.mean_of(|q| q as f64).shift(-(z as f64));
    let scale = finite_difference
        .estimate
        .abs()
        .max(second_class.estimate.abs());
    Ok(DerivativeCheck {
        finite_difference,
        second_class,
        resolved: finite_difference.stderr <= scale.max(f64::MIN_POSITIVE),
    })
}

/// `Ê|Q(t) - V t|^m`.
pub fn estimate_moment(
    rho: f64,
    rates: Rates,
    t: f64,
    m: u32,
    mc: &MonteCarlo,
) -> Result<EstimateWithCI> {
    if m < 1 {
        return Err(Error::InvalidSpec("moment order must be at least 1".into()));
    }
    if t < 1.0 {
        return Err(Error::InvalidSpec(format!("t = {t} below 1")));
    }
    let v = char_speed(rho, rates)?;
    let h = second_class_histogram(rho, rates, t, mc)?;
    Ok(h.mean_of(|q| (q as f64 - v * t).abs().powi(m as i32)))
}

/// `Ψ̂(t) = Ê|Q(t) - V t|`.
pub fn estimate_psi(rho: f64, rates: Rates, t: f64, mc: &MonteCarlo) -> Result<EstimateWithCI> {
    estimate_moment(rho, rates, t, 1, mc)
}

/// Points `(t, Ψ̂(t))`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PsiSeries {
    points: Vec<(f64, EstimateWithCI)>,
}

impl PsiSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: f64, psi: EstimateWithCI) -> Result<()> {
        if t.is_nan() || t < 1.0 {
            return Err(Error::DegenerateSeries(format!("t = {t} below 1")));
        }
        if psi.estimate < 0.0 {
            return Err(Error::DegenerateSeries(format!("negative Ψ at t = {t}")));
        }
        self.points.push((t, psi));
        Ok(())
    }

    pub fn points(&self) -> &[(f64, EstimateWithCI)] {
        &self.points
    }

    /// Ψ̂(t) / t^{2/3} at each point.
    pub fn normalized(&self) -> Vec<f64> {
        self.points
            .iter()
            .map(|(t, p)| p.estimate / t.powf(2.0 / 3.0))
            .collect()
    }
}

/// Least-squares line through `(log t, log Ψ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

pub fn fit_exponent(series: &PsiSeries) -> Result<ExponentFit> {
    let pts = series.points();
    if pts.len() < 3 {
        return Err(Error::DegenerateSeries(format!(
            "{} points, need 3",
            pts.len()
        )));
    }
    if let Some((t, _)) = pts.iter().find(|(_, p)| p.estimate <= 0.0) {
        return Err(Error::DegenerateSeries(format!(
            "Ψ̂ is not positive at t = {t}"
        )));
    }
    let mut ts: Vec<f64> = pts.iter().map(|p| p.0).collect();
    ts.sort_by(f64::total_cmp);
    if ts.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::DegenerateSeries("repeated t".into()));
    }
    let n = pts.len() as f64;
    let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.estimate.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(ExponentFit {
        slope,
        stderr: (rss / (n - 2.0) / sxx).sqrt(),
        intercept,
    })
}
