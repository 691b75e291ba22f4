//! Deterministic pseudo-random source with a single `u64` of state.
//!
//! The checkpoint format persists the generator as one little-endian `u64`,
//! so the implementation is a SplitMix64 step function rather than a larger
//! external generator. All stochastic behavior in the crate (data synthesis,
//! noise chains, batch assembly, dropout) flows through this type.

/// SplitMix64 generator. Cheap to fork: every independent stream is derived
/// by seeding a child from a parent draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Raw state, as stored in checkpoints.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn restore(state: u64) -> Self {
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Fork an independent child stream.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 mantissa bits of a draw.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Modulo bias is negligible for the n used here (datasets, classes).
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller. One value per call; the paired value
    /// is discarded to keep the state trajectory independent of call parity.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u1 = self.uniform();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            return r * (std::f64::consts::TAU * u2).cos();
        }
    }

    /// Fill a buffer with i.i.d. standard-normal f32 values.
    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for v in out.iter_mut() {
            *v = self.normal() as f32;
        }
    }
}
