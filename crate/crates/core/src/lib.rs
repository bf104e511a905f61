//! Exact continuous-time simulation of the asymmetric simple exclusion
//! process (ASEP), its couplings with second class particles, and exact
//! small-system oracles used to verify Monte Carlo estimates.
//!
//! The crate is organised bottom-up:
//!
//! * [`lattice`]: topologies, bit-packed configurations, rates, density
//!   profiles and the closed-form flux / speed / mean-current formulas.
//! * [`rng`]: counter-based random streams keyed by seed, replica and lane.
//! * [`engine`]: the Poisson-clock (Harris) construction for nearest-neighbour
//!   and bounded-range configuration-dependent exclusion, plus reduced runs.
//! * [`couplings`]: basic coupling of ordered layers, second class particles,
//!   the concavity coupling with label dynamics and label-tail measurements.
//! * [`observables`]: currents, Monte Carlo estimators for the covariance,
//!   variance and derivative identities, Ψ(t) and exponent fits.
//! * [`oracle`]: uniformization of small generators, the exact pair chain and
//!   the reflected walk in an inhomogeneous environment.
//! * [`expctl`]: experiment specs, replica fan-out and CSV/JSON emission.

pub mod couplings;
pub mod engine;
mod error;
pub mod expctl;
pub mod lattice;
pub mod observables;
pub mod oracle;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use lattice::{Configuration, DensityProfile, Rates, Topology};
pub use rng::RngStream;
