//! Deterministic, counter-based random number generation.
//!
//! Every replicate (and, inside the coupled simulator, every Poisson mark)
//! derives its randomness from a master seed through stateless key mixing.
//! This makes runs reproducible bit-for-bit regardless of thread count or
//! scheduling: a replicate's stream depends only on `(seed, key...)`, never
//! on which worker picked it up.

use rand::RngCore;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a bijective avalanche mix of a 64-bit word.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapses an arbitrary key (seed, replicate index, site, stream, ...) into
/// a single well-mixed 64-bit value.
#[inline]
pub fn mix_key(parts: &[u64]) -> u64 {
    let mut h = 0x853C_49E6_748F_EA9Bu64;
    for &p in parts {
        h = mix64(h.wrapping_add(GOLDEN_GAMMA).wrapping_mul(0x5851_F42D_4C95_7F2D) ^ mix64(p));
    }
    mix64(h)
}

/// SplitMix64 stream generator. Fast, passes standard statistical batteries,
/// and cheap to construct from a key, which is exactly what a keyed Monte
/// Carlo harness needs.
#[derive(Clone, Debug)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    /// Generator for the stream identified by `parts` (e.g. `[seed, rep]`).
    pub fn from_key(parts: &[u64]) -> Self {
        CounterRng { state: mix_key(parts) }
    }

    #[inline]
    pub fn next_u64_fast(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw on [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        // 53 random bits into the mantissa.
        (self.next_u64_fast() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on (0, 1], safe as an argument to `ln`.
    #[inline]
    pub fn uniform_pos(&mut self) -> f64 {
        ((self.next_u64_fast() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Exponential draw with the given rate.
    #[inline]
    pub fn exp(&mut self, rate: f64) -> f64 {
        -self.uniform_pos().ln() / rate
    }

    /// Uniform index in `0..n`.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        // Lemire's multiply-shift; the modulo bias at n << 2^64 is far below
        // anything observable in these experiments.
        ((self.next_u64_fast() as u128 * n as u128) >> 64) as usize
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64_fast() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.next_u64_fast()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let word = self.next_u64_fast().to_le_bytes();
            chunk.copy_from_slice(&word[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}
