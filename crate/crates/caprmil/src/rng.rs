//! Deterministic counter-based random number generation.
//!
//! Every stochastic component in the crate (weight init, dropout masks,
//! shuffling, synthetic data) draws from [`Rng`]. The generator is
//! counter-based: the `k`-th output is a pure function of `(key, k)`, computed
//! with wrapping 64-bit integer arithmetic, so a given seed produces the same
//! sequence on every platform and independent streams can be split off without
//! sharing state. Parallel or reordered consumers therefore cannot perturb
//! each other's draws — the dropout stream for bag 17 of epoch 3 is the same
//! whether or not a data loader ran in between.
//!
//! The mixing function is the SplitMix64 finalizer, which passes BigCrush as
//! the core of SplitMix64; we use it in counter mode (`mix(key + k * GOLDEN)`).

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer: a bijective avalanche mix on 64 bits.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based pseudo-random generator.
///
/// Cloning an `Rng` forks the exact position in the stream; use
/// [`Rng::stream`] to derive statistically independent streams instead.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
    /// Second half of a Box–Muller pair, returned by the next `normal` call.
    cached_normal: Option<f64>,
}

impl Rng {
    /// Root generator for a seed.
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent stream `tag` of the given seed.
    ///
    /// Streams with different tags behave like unrelated generators even for
    /// adjacent tags, so callers can key them structurally, e.g.
    /// `Rng::stream(seed, hash of (epoch, bag))`.
    pub fn stream(seed: u64, tag: u64) -> Self {
        Rng {
            key: mix(seed ^ mix(tag ^ GOLDEN)),
            counter: 0,
            cached_normal: None,
        }
    }

    /// Derive a sub-stream from this generator's key and a tag, without
    /// consuming any draws from `self`.
    pub fn substream(&self, tag: u64) -> Self {
        Rng {
            key: mix(self.key ^ mix(tag ^ GOLDEN)),
            counter: 0,
            cached_normal: None,
        }
    }

    /// Next raw 64-bit draw.
    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    ///
    /// Uses the widening-multiply method; the bias for any `n` that fits in
    /// practical use (`n << 2^64`) is far below statistical visibility.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0, "Rng::below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box–Muller.
    ///
    /// Transcendentals go through `libm` so the sequence is bit-identical
    /// across platforms, not just across runs.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite; u2 in [0, 1).
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
