//! Experiment specs, replica fan-out, the named experiments and result
//! emission.
//!
//! A spec is a flat `key=value` file with one experiment per file:
//!
//! ```text
//! experiment=mean-q
//! rho=0.5
//! p=1
//! t=2,10
//! replicas=20000
//! seed=7
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::couplings::{concavity_initial, measure_label_tail, run_concavity_coupling};
use crate::engine::{auto_half_width, padded_window, Harris};
use crate::lattice::{Configuration, Rates, Topology};
use crate::observables::{
    derivative_identity_check, estimate_moment, estimate_two_point, fit_exponent, mean_current,
    mean_q, second_class_histogram, variance_identity_check, MonteCarlo, PsiSeries,
};
use crate::oracle::{
    exact_distribution, exact_second_class, geometric_pi, simulate_reflected_walk,
    EnvironmentSchedule, InitialLaw, RightRegion,
};
use crate::rng::RngStream;
use crate::stats::{
    binned_two_sample, chi_square_gof, fan_out, EstimateWithCI, Histogram, Merge, MIN_REPLICAS,
};
use crate::{Error, Result};

/// The named experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    IdentityCovariance,
    IdentityVariance,
    IdentityDerivative,
    MeanCurrent,
    MeanQ,
    CouplingOrder,
    CouplingMarginal,
    LabelTail,
    RwEnvironment,
    ScalingPsi,
    OracleCompare,
    WindowDoubling,
}

impl Experiment {
    pub const ALL: [Experiment; 12] = [
        Experiment::IdentityCovariance,
        Experiment::IdentityVariance,
        Experiment::IdentityDerivative,
        Experiment::MeanCurrent,
        Experiment::MeanQ,
        Experiment::CouplingOrder,
        Experiment::CouplingMarginal,
        Experiment::LabelTail,
        Experiment::RwEnvironment,
        Experiment::ScalingPsi,
        Experiment::OracleCompare,
        Experiment::WindowDoubling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::IdentityCovariance => "identity-covariance",
            Experiment::IdentityVariance => "identity-variance",
            Experiment::IdentityDerivative => "identity-derivative",
            Experiment::MeanCurrent => "mean-current",
            Experiment::MeanQ => "mean-q",
            Experiment::CouplingOrder => "coupling-order",
            Experiment::CouplingMarginal => "coupling-marginal",
            Experiment::LabelTail => "label-tail",
            Experiment::RwEnvironment => "rw-environment",
            Experiment::ScalingPsi => "scaling-psi",
            Experiment::OracleCompare => "oracle-compare",
            Experiment::WindowDoubling => "window-doubling",
        }
    }

    fn needs_rho(self) -> bool {
        !matches!(self, Experiment::RwEnvironment | Experiment::OracleCompare)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown experiment `{s}`")))
    }
}

/// Output format of [`emit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::InvalidSpec(format!(
                "unknown format `{s}`, expected csv or json"
            ))),
        }
    }
}

/// Which estimates the window-doubling experiment recomputes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoublingTarget {
    Covariance,
    Variance,
    Mean,
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub p: f64,
    pub t: Vec<f64>,
    pub z: i64,
    pub m: u32,
    pub replicas: Option<u64>,
    pub seed: Option<u64>,
    pub window: Option<i64>,
    pub workers: usize,
    /// Density step of the derivative check.
    pub delta: f64,
    /// Inclusive lag range of the covariance check.
    pub lags: (i64, i64),
    /// Thresholds of the tail experiments.
    pub k: Vec<i64>,
    /// Number of random environments besides the open one.
    pub schedules: u32,
    /// Flips per edge in each random environment.
    pub flips: usize,
    /// Ring size and particle count of the oracle comparison.
    pub sites: usize,
    pub particles: usize,
    pub targets: Vec<DoublingTarget>,
    pub out: Option<PathBuf>,
    pub format: Format,
}

impl ExperimentSpec {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            rho: None,
            lambda: None,
            p: 1.0,
            t: Vec::new(),
            z: 0,
            m: 1,
            replicas: None,
            seed: None,
            window: None,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            delta: 0.05,
            lags: (-5, 5),
            k: (1..=6).collect(),
            schedules: 3,
            flips: 10,
            sites: 6,
            particles: 3,
            targets: vec![
                DoublingTarget::Covariance,
                DoublingTarget::Variance,
                DoublingTarget::Mean,
            ],
            out: None,
            format: Format::Csv,
        }
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(Error::Parse(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            pairs.push((k, v));
        }
        let name = pairs
            .iter()
            .find(|(k, _)| k == "experiment")
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Parse("missing `experiment` key".into()))?;
        let mut spec = Self::new(name.parse()?);
        for (k, v) in &pairs {
            spec.set(k, v)?;
        }
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Parse(format!("`{key}`: cannot parse `{v}`")))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        match key {
            "experiment" => self.experiment = value.parse()?,
            "rho" => self.rho = Some(num(key, value)?),
            "lambda" => self.lambda = Some(num(key, value)?),
            "p" => self.p = num(key, value)?,
            "t" => self.t = list(key, value)?,
            "z" => self.z = num(key, value)?,
            "m" => self.m = num(key, value)?,
            "replicas" => self.replicas = Some(num(key, value)?),
            "seed" => self.seed = Some(num(key, value)?),
            "window" => self.window = Some(num(key, value)?),
            "workers" => self.workers = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "lags" => {
                let (a, b) = value.split_once("..").ok_or_else(|| {
                    Error::Parse(format!("`lags`: expected lo..hi, got `{value}`"))
                })?;
                self.lags = (num(key, a.trim())?, num(key, b.trim())?);
            }
            "k" => self.k = list(key, value)?,
            "schedules" => self.schedules = num(key, value)?,
            "flips" => self.flips = num(key, value)?,
            "sites" => self.sites = num(key, value)?,
            "particles" => self.particles = num(key, value)?,
            "targets" => {
                self.targets = value
                    .split(',')
                    .map(|s| match s.trim() {
                        "covariance" => Ok(DoublingTarget::Covariance),
                        "variance" => Ok(DoublingTarget::Variance),
                        "mean" => Ok(DoublingTarget::Mean),
                        o => Err(Error::Parse(format!("`targets`: unknown target `{o}`"))),
                    })
                    .collect::<Result<_>>()?
            }
            "out" => self.out = Some(PathBuf::from(value)),
            "format" => self.format = value.parse()?,
            _ => return Err(Error::Parse(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn rates(&self) -> Result<Rates> {
        Rates::with_p(self.p)
    }

    /// Checks every precondition of the experiment; runs nothing.
    pub fn validate(&self) -> Result<()> {
        use Experiment::*;
        let e = self.experiment;
        let rates = self.rates()?;
        if self.seed.is_none() {
            return Err(Error::InvalidSpec("a seed is required".into()));
        }
        let replicas = self
            .replicas
            .ok_or_else(|| Error::InvalidSpec("a replica count is required".into()))?;
        let floor = if e == CouplingOrder { 1 } else { MIN_REPLICAS };
        if replicas < floor {
            return Err(Error::InvalidSpec(format!(
                "{replicas} replicas, at least {floor} needed"
            )));
        }
        if self.workers == 0 {
            return Err(Error::InvalidSpec("workers must be positive".into()));
        }
        if self.t.is_empty() {
            return Err(Error::InvalidSpec("at least one time is required".into()));
        }
        if let Some(t) = self.t.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(Error::InvalidSpec(format!("invalid time {t}")));
        }
        if let Some(w) = self.window {
            if w < 1 {
                return Err(Error::InvalidSpec(format!(
                    "window half-width {w} must be positive"
                )));
            }
        }
        let rho = match (e.needs_rho(), self.rho) {
            (true, None) => return Err(Error::InvalidSpec(format!("{e} needs rho"))),
            (_, Some(r)) if !(r > 0.0 && r < 1.0) => {
                return Err(Error::InvalidSpec(format!("rho = {r} outside (0, 1)")))
            }
            (_, r) => r.unwrap_or(0.5),
        };
        match e {
            IdentityDerivative => {
                let d = self.delta;
                if !(d > 0.0 && rho - d > 0.0 && rho + d < 1.0) {
                    return Err(Error::InvalidSpec(format!(
                        "need 0 < rho - delta < rho + delta < 1, delta = {d}"
                    )));
                }
            }
            IdentityCovariance | WindowDoubling => {
                if self.lags.0 > self.lags.1 {
                    return Err(Error::InvalidSpec(format!(
                        "empty lag range {}..{}",
                        self.lags.0, self.lags.1
                    )));
                }
                if e == WindowDoubling && self.targets.is_empty() {
                    return Err(Error::InvalidSpec("no window-doubling targets".into()));
                }
            }
            CouplingOrder | CouplingMarginal | LabelTail => {
                let l = self.lambda();
                let ok = if e == LabelTail {
                    l > 0.0 && l < rho
                } else {
                    (0.0..=rho).contains(&l)
                };
                if !ok {
                    return Err(Error::InvalidSpec(format!(
                        "lambda = {l} incompatible with rho = {rho}"
                    )));
                }
            }
            _ => {}
        }
        if matches!(e, LabelTail | RwEnvironment)
            && (self.k.is_empty() || self.k.iter().any(|&k| k < 0))
        {
            return Err(Error::InvalidSpec(
                "thresholds k must be a nonempty list of nonnegative integers".into(),
            ));
        }
        if e == LabelTail {
            for &k in &self.k {
                let expected = replicas as f64 * (-2.0 * rates.theta() * k as f64).exp();
                if expected < 5.0 {
                    return Err(Error::InvalidSpec(format!(
                        "{replicas} replicas expect {expected:.2} exceedances of k = {k}; raise replicas"
                    )));
                }
            }
        }
        if e == ScalingPsi {
            if self.t.iter().any(|&t| t < 1.0) {
                return Err(Error::InvalidSpec(
                    "scaling times must be at least 1".into(),
                ));
            }
            if self.m < 1 {
                return Err(Error::InvalidSpec("moment order must be at least 1".into()));
            }
        }
        if e == OracleCompare
            && !(self.sites >= 2 && self.sites <= 20 && self.particles <= self.sites)
        {
            return Err(Error::InvalidSpec(format!(
                "{} particles on a ring of {} sites is outside the oracle range",
                self.particles, self.sites
            )));
        }
        Ok(())
    }

    fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(self.rho.unwrap_or(0.5) / 2.0)
    }

    fn monte_carlo(&self) -> MonteCarlo {
        MonteCarlo::new(self.replicas.unwrap_or(0), self.seed.unwrap_or(0))
            .workers(self.workers)
            .half_width(self.window)
    }
}

/// PASS, FAIL or N-A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
    #[serde(rename = "N-A")]
    NotApplicable,
}

impl Verdict {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    /// `|estimate - reference| <= 3 stderr`.
    pub fn agreement(e: &EstimateWithCI, reference: f64) -> Self {
        Self::from_bool(e.agrees(reference, 3.0))
    }

    /// `estimate <= bound + 3 stderr`.
    pub fn bound(e: &EstimateWithCI, bound: f64) -> Self {
        Self::from_bool(e.estimate <= bound + 3.0 * e.stderr)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::NotApplicable => "N-A",
        })
    }
}

/// One emitted line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub p: f64,
    pub q: f64,
    pub t: Option<f64>,
    pub z: Option<i64>,
    pub m: Option<u32>,
    pub replicas: u64,
    pub seed: u64,
    pub estimate: f64,
    pub stderr: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub reference: Option<f64>,
    pub verdict: Verdict,
}

pub const CSV_HEADER: &str =
    "experiment,rho,lambda,p,q,t,z,m,replicas,seed,estimate,stderr,ci_lo,ci_hi,reference,verdict";

struct Rows<'a> {
    spec: &'a ExperimentSpec,
    rates: Rates,
    lambda: Option<f64>,
    m: Option<u32>,
    out: Vec<ResultRow>,
}

impl<'a> Rows<'a> {
    fn new(spec: &'a ExperimentSpec) -> Result<Self> {
        Ok(Self {
            spec,
            rates: spec.rates()?,
            lambda: None,
            m: None,
            out: Vec::new(),
        })
    }

    fn push(
        &mut self,
        t: Option<f64>,
        z: Option<i64>,
        e: EstimateWithCI,
        reference: Option<f64>,
        verdict: Verdict,
    ) {
        let spec = self.spec;
        self.out.push(ResultRow {
            experiment: spec.experiment.name().to_string(),
            rho: spec.rho,
            lambda: self.lambda,
            p: self.rates.p(),
            q: self.rates.q(),
            t,
            z,
            m: self.m,
            replicas: spec.replicas.unwrap_or(0),
            seed: spec.seed.unwrap_or(0),
            estimate: e.estimate,
            stderr: e.stderr,
            ci_lo: e.ci_lo(),
            ci_hi: e.ci_hi(),
            reference,
            verdict,
        });
    }

    fn exact(
        &mut self,
        t: Option<f64>,
        z: Option<i64>,
        value: f64,
        reference: Option<f64>,
        verdict: Verdict,
    ) {
        self.push(
            t,
            z,
            EstimateWithCI::new(value, 0.0, self.spec.replicas.unwrap_or(0)),
            reference,
            verdict,
        );
    }
}

/// Runs `kernel(replica, stream, acc)` for every replica with streams drawn
/// from `(seed, purpose)`; the merged result does not depend on `workers`.
pub fn run_replicas<A, I, K>(
    replicas: u64,
    seed: u64,
    purpose: u16,
    workers: usize,
    init: I,
    kernel: K,
) -> Result<A>
where
    A: Merge + Send,
    I: Fn() -> A + Sync,
    K: Fn(u64, &RngStream, &mut A) -> Result<()> + Sync,
{
    fan_out(replicas, workers, init, |r, acc| {
        kernel(r, &RngStream::replica(seed, purpose, r), acc)
    })
}

mod purpose {
    pub const ORACLE: u16 = 0x51;
    pub const CONCAVITY: u16 = 0x61;
    pub const WALK: u16 = 0x71;
}

/// Runs a validated spec; rows come out in a fixed order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let mut rows = Rows::new(spec)?;
    let rates = rows.rates;
    let mc = spec.monte_carlo();
    let rho = spec.rho.unwrap_or(0.5);
    match spec.experiment {
        Experiment::IdentityCovariance => {
            for &t in &spec.t {
                for tp in estimate_two_point(rho, rates, t, spec.lags, &mc)? {
                    let d = tp.difference();
                    rows.push(
                        Some(t),
                        Some(tp.j),
                        d,
                        Some(0.0),
                        Verdict::agreement(&d, 0.0),
                    );
                }
                let window = Topology::segment(-6, 6)?;
                let gap = exact_second_class(window, rho, rates, t, 1e-13)?.identity_gap();
                rows.exact(
                    Some(t),
                    None,
                    gap,
                    Some(1e-10),
                    Verdict::from_bool(gap <= 1e-10),
                );
            }
        }
        Experiment::IdentityVariance => {
            for &t in &spec.t {
                let d = variance_identity_check(rho, rates, t, spec.z, &mc)?.difference();
                rows.push(
                    Some(t),
                    Some(spec.z),
                    d,
                    Some(0.0),
                    Verdict::agreement(&d, 0.0),
                );
            }
        }
        Experiment::IdentityDerivative => {
            for &t in &spec.t {
                let c = derivative_identity_check(rho, spec.delta, rates, t, spec.z, &mc)?;
                let d = c.difference();
                let v = if c.resolved {
                    Verdict::agreement(&d, 0.0)
                } else {
                    Verdict::NotApplicable
                };
                rows.push(Some(t), Some(spec.z), d, Some(0.0), v);
            }
        }
        Experiment::MeanCurrent => {
            for &t in &spec.t {
                let (e, exact) = mean_current(rho, rates, t, spec.z, &mc)?;
                rows.push(
                    Some(t),
                    Some(spec.z),
                    e,
                    Some(exact),
                    Verdict::agreement(&e, exact),
                );
            }
        }
        Experiment::MeanQ => {
            for &t in &spec.t {
                let (e, exact) = mean_q(rho, rates, t, &mc)?;
                rows.push(Some(t), None, e, Some(exact), Verdict::agreement(&e, exact));
            }
        }
        Experiment::CouplingOrder | Experiment::CouplingMarginal => {
            rows.lambda = Some(spec.lambda());
            coupling(spec, &mut rows, &mc)?;
        }
        Experiment::LabelTail => {
            let lambda = spec.lambda();
            rows.lambda = Some(lambda);
            for &t in &spec.t {
                let tails = measure_label_tail(
                    rho,
                    lambda,
                    rates,
                    t,
                    &spec.k,
                    mc.replicas,
                    mc.seed,
                    mc.workers,
                )?;
                for lt in tails {
                    rows.push(
                        Some(t),
                        Some(lt.k),
                        lt.tail,
                        Some(lt.bound),
                        Verdict::bound(&lt.tail, lt.bound),
                    );
                }
            }
        }
        Experiment::RwEnvironment => walk(spec, &mut rows)?,
        Experiment::ScalingPsi => {
            rows.m = Some(spec.m);
            let mut series = PsiSeries::new();
            for &t in &spec.t {
                let e = estimate_moment(rho, rates, t, spec.m, &mc)?;
                rows.push(Some(t), None, e, None, Verdict::NotApplicable);
                series.push(t, e)?;
            }
            if spec.m == 1 && spec.t.len() >= 3 {
                let fit = fit_exponent(&series)?;
                let slope = EstimateWithCI::new(fit.slope, fit.stderr, mc.replicas);
                let ok = (0.55..=0.78).contains(&fit.slope);
                rows.push(None, None, slope, Some(2.0 / 3.0), Verdict::from_bool(ok));
                let norm = series.normalized();
                let hi = norm.iter().cloned().fold(f64::MIN, f64::max);
                let lo = norm.iter().cloned().fold(f64::MAX, f64::min);
                let ratio = hi / lo;
                rows.exact(
                    None,
                    None,
                    ratio,
                    Some(2.0),
                    Verdict::from_bool(ratio <= 2.0),
                );
            }
        }
        Experiment::OracleCompare => {
            let topo = Topology::ring(spec.sites)?;
            let sites: Vec<i64> = (0..spec.particles as i64).collect();
            let c0 = Configuration::from_sites(topo, &sites)?;
            let harris = Harris::nearest(rates);
            let model = crate::engine::RateModel::NearestNeighbor(rates);
            for &t in &spec.t {
                let exact =
                    exact_distribution(&InitialLaw::Point(c0.clone()), &model, topo, t, 1e-12)?;
                let counts = run_replicas(
                    mc.replicas,
                    mc.seed,
                    purpose::ORACLE,
                    mc.workers,
                    || vec![0u64; 1 << spec.sites],
                    |_, rng, acc| {
                        let traj = harris.run(&c0, t, rng)?;
                        acc[traj.final_config.mask() as usize] += 1;
                        Ok(())
                    },
                )?;
                let map = counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(m, &c)| (m as u64, c))
                    .collect();
                let tv = exact.total_variation(&map);
                rows.exact(
                    Some(t),
                    None,
                    tv,
                    Some(0.01),
                    Verdict::from_bool(tv <= 0.01),
                );
            }
        }
        Experiment::WindowDoubling => doubling(spec, &mut rows, &mc)?,
    }
    Ok(rows.out)
}

#[derive(Default)]
struct PairHistograms {
    zeta: Histogram,
    xi: Histogram,
    checks: u64,
    violations: u64,
}

impl Merge for PairHistograms {
    fn merge(&mut self, o: Self) {
        self.zeta.merge(o.zeta);
        self.xi.merge(o.xi);
        self.checks += o.checks;
        self.violations += o.violations;
    }
}

fn coupling(spec: &ExperimentSpec, rows: &mut Rows<'_>, mc: &MonteCarlo) -> Result<()> {
    let rates = rows.rates;
    let rho = spec.rho.unwrap_or(0.5);
    let lambda = spec.lambda();
    for &t in &spec.t {
        let half = spec.window.unwrap_or_else(|| {
            auto_half_width(rho, rates, t).max(auto_half_width(lambda, rates, t))
        });
        let topo = padded_window(0, 0, half);
        let h = run_replicas(
            mc.replicas,
            mc.seed,
            purpose::CONCAVITY,
            mc.workers,
            PairHistograms::default,
            |r, rng, acc| {
                let (zeta, xi) = concavity_initial(topo, rho, lambda, rng)?;
                let (mut checks, mut bad) = (0u64, 0u64);
                let run = run_concavity_coupling(&zeta, &xi, 0, 0, rates, t, rng, |_, a, b| {
                    checks += 1;
                    bad += (a > b) as u64;
                })?;
                if !run.clean {
                    return Err(Error::BoundaryContamination(format!(
                        "replica {r}: second class particles near the boundary"
                    )));
                }
                acc.checks += checks + 1;
                acc.violations += bad + (run.q_zeta > run.q_xi) as u64;
                acc.zeta.push(run.q_zeta);
                acc.xi.push(run.q_xi);
                Ok(())
            },
        )?;
        if spec.experiment == Experiment::CouplingOrder {
            rows.exact(
                Some(t),
                None,
                h.violations as f64,
                Some(0.0),
                Verdict::from_bool(h.violations == 0),
            );
        } else {
            for (own, density) in [(&h.zeta, rho), (&h.xi, lambda)] {
                let reference = second_class_histogram(density, rates, t, mc)?;
                let (p, _) = binned_two_sample(own, &reference, 100);
                rows.exact(Some(t), None, p, Some(0.01), Verdict::from_bool(p >= 0.01));
            }
        }
    }
    Ok(())
}

#[derive(Default)]
struct WalkCounts {
    depth: Histogram,
    z: Histogram,
}

impl Merge for WalkCounts {
    fn merge(&mut self, o: Self) {
        self.depth.merge(o.depth);
        self.z.merge(o.z);
    }
}

/// Cells `0..K` of the geometric law with `n π(j) >= 5`, plus the tail.
fn geometric_cells(h: &Histogram, rates: Rates) -> Result<(Vec<u64>, Vec<f64>)> {
    let n = h.total() as f64;
    let mut probs = Vec::new();
    let mut j = 0;
    loop {
        let pj = geometric_pi(j, rates)?;
        let tail = (rates.q() / rates.p()).powi(j as i32 + 1);
        if n * pj < 5.0 || n * tail < 5.0 {
            break;
        }
        probs.push(pj);
        j += 1;
    }
    let k = probs.len() as i64;
    probs.push((rates.q() / rates.p()).powi(k as i32));
    let mut observed: Vec<u64> = (0..k).map(|j| h.count(j)).collect();
    observed.push(h.iter().filter(|&(x, _)| x >= k).map(|(_, c)| c).sum());
    Ok((observed, probs))
}

fn walk(spec: &ExperimentSpec, rows: &mut Rows<'_>) -> Result<()> {
    let rates = rows.rates;
    let (replicas, seed) = (spec.replicas.unwrap_or(0), spec.seed.unwrap_or(0));
    let right = RightRegion {
        up: rates.p(),
        down: rates.q(),
    };
    for &t in &spec.t {
        let reach = (4.0 * t + 20.0).ceil() as i64;
        let mut schedules = vec![EnvironmentSchedule::open()];
        for s in 0..spec.schedules as u64 {
            schedules.push(EnvironmentSchedule::adversarial(
                seed ^ (0x5eed_0000 + s),
                -reach,
                reach,
                t,
                spec.flips,
            )?);
        }
        for (s, schedule) in schedules.iter().enumerate() {
            let counts = run_replicas(
                replicas,
                seed,
                purpose::WALK + s as u16,
                spec.workers,
                WalkCounts::default,
                |_, rng, acc| {
                    let w = simulate_reflected_walk(schedule, rates, right, t, 0, rng)?;
                    acc.depth.push(-w.y);
                    acc.z.push(w.z);
                    Ok(())
                },
            )?;
            let (observed, probs) = geometric_cells(&counts.depth, rates)?;
            let pvalue = if observed.len() < 2 {
                1.0
            } else {
                chi_square_gof(&observed, &probs)?.2
            };
            rows.exact(
                Some(t),
                None,
                pvalue,
                Some(0.01),
                Verdict::from_bool(pvalue >= 0.01),
            );
            for &k in &spec.k {
                let tail = counts.z.tail_le(-k);
                let bound = (-2.0 * rates.theta() * k as f64).exp();
                rows.push(
                    Some(t),
                    Some(k),
                    tail,
                    Some(bound),
                    Verdict::bound(&tail, bound),
                );
            }
        }
    }
    Ok(())
}

fn doubling(spec: &ExperimentSpec, rows: &mut Rows<'_>, mc: &MonteCarlo) -> Result<()> {
    let rates = rows.rates;
    let rho = spec.rho.unwrap_or(0.5);
    for &t in &spec.t {
        let base_half = spec
            .window
            .unwrap_or_else(|| auto_half_width(rho, rates, t));
        let wide = mc.half_width(Some(2 * base_half));
        let base = mc.half_width(Some(base_half));
        let compare =
            |rows: &mut Rows<'_>, z: Option<i64>, a: EstimateWithCI, b: EstimateWithCI| {
                let change = b.estimate - a.estimate;
                let ok = change == 0.0 || change.abs() < a.stderr;
                rows.push(
                    Some(t),
                    z,
                    EstimateWithCI::new(change, a.stderr, a.replicas),
                    Some(0.0),
                    Verdict::from_bool(ok),
                );
            };
        for target in &spec.targets {
            match target {
                DoublingTarget::Covariance => {
                    let a = estimate_two_point(rho, rates, t, spec.lags, &base)?;
                    let b = estimate_two_point(rho, rates, t, spec.lags, &wide)?;
                    for (x, y) in a.iter().zip(&b) {
                        compare(rows, Some(x.j), x.covariance, y.covariance);
                        compare(rows, Some(x.j), x.second_class, y.second_class);
                    }
                }
                DoublingTarget::Variance => {
                    let a = variance_identity_check(rho, rates, t, spec.z, &base)?;
                    let b = variance_identity_check(rho, rates, t, spec.z, &wide)?;
                    compare(rows, Some(spec.z), a.variance, b.variance);
                    compare(rows, Some(spec.z), a.second_class, b.second_class);
                }
                DoublingTarget::Mean => {
                    let (a, _) = mean_current(rho, rates, t, spec.z, &base)?;
                    let (b, _) = mean_current(rho, rates, t, spec.z, &wide)?;
                    compare(rows, Some(spec.z), a, b);
                    let (a, _) = mean_q(rho, rates, t, &base)?;
                    let (b, _) = mean_q(rho, rates, t, &wide)?;
                    compare(rows, None, a, b);
                }
            }
        }
    }
    Ok(())
}

/// Whether any row failed.
pub fn any_failed(rows: &[ResultRow]) -> bool {
    rows.iter().any(|r| r.verdict == Verdict::Fail)
}

pub fn to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?)
        .expect("csv is utf-8");
    Ok(format!("{CSV_HEADER}\n{body}"))
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Parse(format!(
            "unexpected header `{}`",
            header.join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

pub fn to_json(rows: &[ResultRow]) -> Result<String> {
    serde_json::to_string_pretty(rows).map_err(|e| Error::Io(e.to_string()))
}

pub fn parse_json(text: &str) -> Result<Vec<ResultRow>> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

pub fn render(rows: &[ResultRow], format: Format) -> Result<String> {
    match format {
        Format::Csv => to_csv(rows),
        Format::Json => to_json(rows).map(|s| s + "\n"),
    }
}

/// Writes `rows` to `path`.
pub fn emit(rows: &[ResultRow], format: Format, path: &Path) -> Result<()> {
    std::fs::write(path, render(rows, format)?)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(text: &str) -> ExperimentSpec {
        ExperimentSpec::parse(text).unwrap()
    }

    #[test]
    fn parses_lists_comments_and_defaults() {
        let s = spec(
            "# demo\nexperiment = mean-q\nrho=0.5\nt=2, 10\nseed=3\nreplicas=100\nlags=-2..4\n",
        );
        assert_eq!(s.experiment, Experiment::MeanQ);
        assert_eq!(s.t, vec![2.0, 10.0]);
        assert_eq!(s.lags, (-2, 4));
        assert_eq!(s.p, 1.0);
        s.validate().unwrap();
    }

    #[test]
    fn rejects_malformed_specs() {
        assert!(ExperimentSpec::parse("rho=0.5").is_err());
        assert!(ExperimentSpec::parse("experiment=nope").is_err());
        assert!(ExperimentSpec::parse("experiment=mean-q\nbogus=1").is_err());
        assert!(ExperimentSpec::parse("experiment=mean-q\nrho=x").is_err());
        assert!(ExperimentSpec::parse("experiment=mean-q\nrho=0.1\nrho=0.2").is_err());
        assert!(ExperimentSpec::parse("experiment=mean-q\nrho").is_err());
    }

    #[test]
    fn validation_runs_before_simulation() {
        let base = "experiment=identity-covariance\nrho=0.5\nt=1\nseed=1\n";
        assert!(spec(&format!("{base}replicas=0")).validate().is_err());
        assert!(spec(base).validate().is_err());
        assert!(spec("experiment=mean-q\nrho=0.5\nt=1\nreplicas=100")
            .validate()
            .is_err());
        assert!(
            spec("experiment=mean-q\nrho=1.5\nt=1\nreplicas=100\nseed=1")
                .validate()
                .is_err()
        );
        assert!(
            spec("experiment=mean-q\nrho=0.5\nt=-1\nreplicas=100\nseed=1")
                .validate()
                .is_err()
        );
        assert!(
            spec("experiment=mean-q\nrho=0.5\nt=1\nreplicas=100\nseed=1\np=0.4")
                .validate()
                .is_err()
        );
        let d = "experiment=identity-derivative\nrho=0.04\nt=1\nreplicas=100\nseed=1";
        assert!(spec(d).validate().is_err());
        let lt = "experiment=label-tail\nrho=0.5\nt=1\nreplicas=100\nseed=1\nk=1,2,3";
        assert!(spec(lt).validate().is_err());
        let s = spec("experiment=coupling-order\nrho=0.5\nlambda=0.7\nt=1\nreplicas=10\nseed=1");
        assert!(s.validate().is_err());
        assert!(matches!(
            run_experiment(&spec(&format!("{base}replicas=0"))),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn empty_csv_is_header_only() {
        assert_eq!(to_csv(&[]).unwrap(), format!("{CSV_HEADER}\n"));
        assert!(parse_csv(&to_csv(&[]).unwrap()).unwrap().is_empty());
    }

    fn sample_rows() -> Vec<ResultRow> {
        vec![
            ResultRow {
                experiment: "mean-q".into(),
                rho: Some(0.3),
                lambda: None,
                p: 0.7,
                q: 0.30000000000000004,
                t: Some(2.0),
                z: Some(-3),
                m: Some(1),
                replicas: 1000,
                seed: u64::MAX,
                estimate: 0.1 + 0.2,
                stderr: 1e-17,
                ci_lo: -1.5e300,
                ci_hi: 2.0,
                reference: Some(1.0 / 3.0),
                verdict: Verdict::Pass,
            },
            ResultRow {
                experiment: "scaling-psi".into(),
                rho: None,
                lambda: Some(0.25),
                p: 1.0,
                q: 0.0,
                t: None,
                z: None,
                m: None,
                replicas: 0,
                seed: 0,
                estimate: -0.0,
                stderr: 0.0,
                ci_lo: 0.0,
                ci_hi: 0.0,
                reference: None,
                verdict: Verdict::NotApplicable,
            },
        ]
    }

    #[test]
    fn csv_and_json_round_trip() {
        let rows = sample_rows();
        let csv = to_csv(&rows).unwrap();
        assert!(csv.lines().nth(1).unwrap().ends_with(",PASS"));
        assert!(csv.lines().nth(2).unwrap().ends_with(",N-A"));
        assert_eq!(parse_csv(&csv).unwrap(), rows);
        let json = to_json(&rows).unwrap();
        assert_eq!(parse_json(&json).unwrap(), rows);
        let keys: Vec<String> =
            serde_json::from_str::<Vec<serde_json::Map<String, serde_json::Value>>>(&json).unwrap()
                [0]
            .keys()
            .cloned()
            .collect();
        let mut expected: Vec<String> = CSV_HEADER.split(',').map(String::from).collect();
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
    }

    #[test]
    fn mean_q_at_half_density_passes() {
        let s = spec("experiment=mean-q\nrho=0.5\np=1\nt=2\nreplicas=2000\nseed=11\nworkers=2");
        let rows = run_experiment(&s).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].reference, Some(0.0));
        assert_eq!(rows[0].verdict, Verdict::Pass);
    }

    #[test]
    fn worker_count_does_not_change_rows() {
        let mut s = spec("experiment=mean-current\nrho=0.5\np=1\nt=2\nreplicas=600\nseed=4");
        s.workers = 1;
        let a = run_experiment(&s).unwrap();
        s.workers = 3;
        assert_eq!(
            to_csv(&a).unwrap(),
            to_csv(&run_experiment(&s).unwrap()).unwrap()
        );
    }

    #[test]
    fn coupling_order_is_a_hard_check() {
        let s = spec(
            "experiment=coupling-order\nrho=0.6\nlambda=0.3\nt=1\nreplicas=50\nseed=2\nworkers=1",
        );
        let rows = run_experiment(&s).unwrap();
        assert_eq!(rows[0].estimate, 0.0);
        assert_eq!(rows[0].stderr, 0.0);
        assert_eq!(rows[0].verdict, Verdict::Pass);
    }

    #[test]
    fn geometric_cells_cover_the_law() {
        let r = Rates::new(0.6, 0.4).unwrap();
        let mut h = Histogram::new();
        for j in 0..1000 {
            h.push(j % 4);
        }
        let (obs, probs) = geometric_cells(&h, r).unwrap();
        assert_eq!(obs.iter().sum::<u64>(), 1000);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
