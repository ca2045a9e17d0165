//! Deterministic random number streams.
//!
//! Every stochastic component of the crate draws from an [`RngStream`], a
//! ChaCha8 generator whose seed is derived from a master seed plus a path of
//! integer tags. Deriving rather than sharing means per-row generators can be
//! created independently inside a parallel loop: row `i` always sees the same
//! stream no matter how work is scheduled.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A seeded random stream with cheap, collision-resistant substream derivation.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

/// splitmix64 finalizer: mixes a 64-bit value into a well-distributed one.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    /// Root stream for a master seed.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(mix(seed)),
        }
    }

    /// Derive an independent substream identified by `tag`.
    ///
    /// Derivation is a pure function of `(self.seed, tag)`: it does not
    /// consume state from `self`, so substreams can be created in any order
    /// (or concurrently) with identical results.
    pub fn derive(&self, tag: u64) -> RngStream {
        let child = mix(self.seed ^ mix(tag.wrapping_add(0xa076_1d64_78bd_642f)));
        RngStream::new(child)
    }

    /// Derive a substream identified by a two-level path, e.g. (iteration, row).
    pub fn derive2(&self, tag: u64, idx: u64) -> RngStream {
        self.derive(tag).derive(idx)
    }

    /// The seed this stream was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// A uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// A uniform draw on [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// A uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// A vector of standard normal draws.
    pub fn normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.normal())
    }

    /// A matrix of standard normal draws, filled column-major.
    pub fn normal_matrix(&mut self, nrows: usize, ncols: usize) -> DMatrix<f64> {
        let data: Vec<f64> = (0..nrows * ncols).map(|_| self.normal()).collect();
        DMatrix::from_vec(nrows, ncols, data)
    }

    /// Fisher–Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.gen_range(0..=i);
            p.swap(i, j);
        }
        p
    }
}

impl rand::RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}
