//! Counter-based random streams.
//!
//! Every random quantity in a run is drawn from a ChaCha8 keystream keyed by
//! `(master_seed, stream_index)` with a 64-bit *lane* selecting the ChaCha
//! stream and the internal block counter acting as the draw counter. Lanes
//! are derived from absolute lattice positions, so two runs on different
//! windows with the same key see identical clocks and initial uniforms on
//! the sites they share.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

const TAG_SHIFT: u32 = 56;
const KEY_MASK: u64 = (1 << TAG_SHIFT) - 1;
const BLOCK_OFFSET: i64 = 1 << 40;

/// Purpose of a lane. Distinct purposes never share ChaCha streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    /// General-purpose sequential draws.
    Main,
    /// Initial occupation uniforms of one 64-site block.
    Init(i64),
    /// Poisson clocks of one 64-edge block.
    Clock(i64),
    /// Auxiliary label clocks of the concavity coupling.
    Aux,
    /// Anything else, identified by a caller-chosen key.
    Custom(u64),
}

impl Lane {
    fn id(self) -> u64 {
        let block = |b: i64| ((b + BLOCK_OFFSET) as u64) & KEY_MASK;
        match self {
            Lane::Main => 0,
            Lane::Init(b) => (1 << TAG_SHIFT) | block(b),
            Lane::Clock(b) => (2 << TAG_SHIFT) | block(b),
            Lane::Aux => 3 << TAG_SHIFT,
            Lane::Custom(k) => (4 << TAG_SHIFT) | (k & KEY_MASK),
        }
    }
}

/// A reproducible random stream identified by `(master_seed, stream_index)`.
///
/// The stream itself implements [`RngCore`] through its main lane; other
/// lanes are opened with [`RngStream::lane`].
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_index: u64,
    main: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        let main = Self::open(master_seed, stream_index, Lane::Main);
        Self {
            master_seed,
            stream_index,
            main,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    /// A fresh generator for `lane`, positioned at draw zero.
    pub fn lane(&self, lane: Lane) -> ChaCha8Rng {
        Self::open(self.master_seed, self.stream_index, lane)
    }

    /// Stream for replica `replica` of an estimator identified by `purpose`.
    pub fn replica(master_seed: u64, purpose: u16, replica: u64) -> Self {
        Self::new(
            master_seed,
            ((purpose as u64) << 48) | (replica & ((1 << 48) - 1)),
        )
    }

    fn open(master_seed: u64, stream_index: u64, lane: Lane) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&stream_index.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(lane.id());
        rng
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.main.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.main.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.main.fill_bytes(dst)
    }
}

/// Uniform on (0, 1] with 53 bits of resolution.
#[inline]
pub fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform on [0, 1) with 53 bits of resolution.
#[inline]
pub fn unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Exponential waiting time at `rate` (> 0).
#[inline]
pub fn exp_gap<R: RngCore>(rng: &mut R, rate: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    e / rate
}

/// Maps 64 random bits to a uniform index below `n` plus the leftover
/// fraction, itself uniform on [0, 2^64) and independent of the index
/// up to 2^-64 bias.
#[inline]
pub fn index_and_fraction(bits: u64, n: usize) -> (usize, u64) {
    let wide = bits as u128 * n as u128;
    ((wide >> 64) as usize, wide as u64)
}

/// Threshold `x * 2^64` for comparing against the fraction returned by
/// [`index_and_fraction`].
#[inline]
pub fn fraction_threshold(x: f64) -> u64 {
    if x >= 1.0 {
        u64::MAX
    } else if x <= 0.0 {
        0
    } else {
        (x * 18_446_744_073_709_551_616.0) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_is_reproducible() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut la = a.lane(Lane::Clock(-5));
        let mut lb = b.lane(Lane::Clock(-5));
        assert_eq!(la.next_u64(), lb.next_u64());
    }

    #[test]
    fn distinct_keys_and_lanes_differ() {
        let s = RngStream::new(7, 3);
        let draws: Vec<u64> = [
            s.lane(Lane::Main),
            s.lane(Lane::Init(0)),
            s.lane(Lane::Clock(0)),
            s.lane(Lane::Clock(1)),
            s.lane(Lane::Clock(-1)),
            s.lane(Lane::Aux),
            RngStream::new(7, 4).lane(Lane::Main),
            RngStream::new(8, 3).lane(Lane::Main),
        ]
        .into_iter()
        .map(|mut r| r.next_u64())
        .collect();
        for i in 0..draws.len() {
            for j in i + 1..draws.len() {
                assert_ne!(draws[i], draws[j], "lanes {i} and {j} collide");
            }
        }
    }

    #[test]
    fn unit_conversions_stay_in_range() {
        assert_eq!(unit(0), 0.0);
        assert!(unit(u64::MAX) < 1.0);
        assert!(open_unit(0) > 0.0);
        assert_eq!(open_unit(u64::MAX), 1.0);
    }

    #[test]
    fn index_and_fraction_is_uniform_enough() {
        let mut rng = RngStream::new(1, 1);
        let mut counts = [0u32; 5];
        let mut right = 0u32;
        let thr = fraction_threshold(0.7);
        let n = 100_000;
        for _ in 0..n {
            let (i, f) = index_and_fraction(rng.next_u64(), 5);
            counts[i] += 1;
            right += (f < thr) as u32;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.2).abs() < 0.006);
        }
        assert!((right as f64 / n as f64 - 0.7).abs() < 0.006);
    }
}
