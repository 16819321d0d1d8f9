//! Seeded pseudo-random streams.
//!
//! A thin wrapper over xoshiro256++ (seeded through splitmix64) with the
//! ziggurat standard-normal sampler from `rand_distr`. The same seed yields
//! the same stream on every run.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(master, index)`, e.g. one per run or worker.
    pub fn derive(master: u64, index: u64) -> Self {
        let mut sm = SplitMix64::seed_from_u64(
            master ^ index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03),
        );
        let child = sm.next_u64() ^ sm.next_u64().rotate_left(17);
        Self::new(child)
    }

    /// Child stream split off this one's seed.
    pub fn fork(&self, index: u64) -> Self {
        Self::derive(self.seed, index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_standard_normal<T: Scalar>(&mut self, out: &mut [T]) {
        for x in out {
            *x = T::of(self.standard_normal());
        }
    }
}

/// Matrix of i.i.d. N(0, 1) entries; advances `rng`.
pub fn sample_standard_normal<T: Scalar>(
    rng: &mut SeededRng,
    rows: usize,
    cols: usize,
) -> Matrix<T> {
    let mut m = Matrix::zeros(rows, cols);
    rng.fill_standard_normal(m.data_mut());
    m
}
