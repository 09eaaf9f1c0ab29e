//! Reproducible per-draw random streams.
//!
//! Draw `k` of a run with master seed `s` uses ChaCha8 seeded through
//! `seed_from_u64(s ^ k)`. Uniforms take the top 53 bits of each `u64`,
//! so every stream is fully determined by `(s, k)` regardless of how draws
//! are scheduled across threads.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Clone, Debug)]
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Stream for draw `k` under `master_seed`.
    pub fn for_draw(master_seed: u64, k: u64) -> Self {
        Self::new(master_seed ^ k)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift, with rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - u64::MAX.wrapping_rem(n);
        loop {
            let x = self.0.next_u64();
            if x < zone {
                return ((x as u128 * n as u128) >> 64) as u64;
            }
        }
    }
}
