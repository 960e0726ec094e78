//! Portable pseudo-random source.
//!
//! All randomness in the engine flows through [`PortableRng`]: a ChaCha8
//! keystream (counter-based, 64-bit seed, 64-bit stream id) with fixed
//! integer, uniform and Gaussian transforms, so a seed reproduces the same
//! values on every platform.
//!
//! * uniform `[0,1)`: top 53 bits of one `u64`, scaled by 2^-53.
//! * bounded integers: Lemire's widening multiply with rejection.
//! * Gaussian: Box–Muller on two uniforms (`u1` taken from `(0,1]`), both
//!   outputs used in order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Clone, Debug)]
pub struct PortableRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl PortableRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent stream derived from `(seed, stream)`, e.g. one per record
    /// or per training step.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    /// Child stream for `tag`, advancing this generator by one word.
    pub fn fork(&mut self, tag: u64) -> Self {
        let seed = self.next_u64();
        Self::with_stream(seed, tag)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi]` (returns `lo` when the range is degenerate).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn below_usize(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    /// Standard normal sample.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below_usize(i + 1);
            items.swap(i, j);
        }
    }

    /// `m` distinct indices from `0..n`, uniformly, via a partial
    /// Fisher–Yates pass. Returned in selection order.
    pub fn sample_indices(&mut self, n: usize, m: usize) -> Vec<usize> {
        assert!(m <= n, "cannot sample {m} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = i + self.below_usize(n - i);
            pool.swap(i, j);
        }
        pool.truncate(m);
        pool
    }

    /// Uniform permutation of `0..n` with no fixed point (rejection sampling).
    /// Requires `n >= 2`.
    pub fn derangement(&mut self, n: usize) -> Vec<usize> {
        assert!(n >= 2, "no derangement of {n} elements");
        let mut perm: Vec<usize> = (0..n).collect();
        loop {
            self.shuffle(&mut perm);
            if perm.iter().enumerate().all(|(i, &p)| i != p) {
                return perm;
            }
        }
    }
}
