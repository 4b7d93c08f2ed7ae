//! The protocol PRNG.
//!
//! Server and clients must derive bit-identical sketches from a broadcast
//! seed, so the generator is splitmix64, fully specified by its constants.
//! [`SplitMix64`] also implements `rand_core::RngCore` so the `rand`
//! ecosystem (distributions, shuffles) can drive it for non-protocol work.

use rand_core::{impls, RngCore, SeedableRng};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One splitmix64 step: returns the advanced state and the output word.
#[inline]
pub fn rng_next(state: u64) -> (u64, u64) {
    let state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (state, z ^ (z >> 31))
}

/// Seed for the sketch of parameter layer `layer` in round `round`.
pub fn derive_seed(root: u64, round: u64, layer: u64) -> u64 {
    let (_, s1) = rng_next(root ^ round.wrapping_add(1));
    let (_, s2) = rng_next(s1 ^ layer.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
    s2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_word(&mut self) -> u64 {
        let (state, out) = rng_next(self.state);
        self.state = state;
        out
    }

    /// `next % n`. The modulo bias is at most `n / 2⁶⁴` (below 2⁻⁵⁰ for
    /// `n ≤ 2¹⁴`) and is not corrected.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_word() % n as u64) as usize
    }

    /// Uniform double in `[0, 1)` from the top 53 bits.
    #[inline]
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_word() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for SplitMix64 {
    fn next_u32(&mut self) -> u32 {
        (self.next_word() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_word()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        impls::fill_bytes_via_next(self, dst)
    }
}

impl SeedableRng for SplitMix64 {
    type Seed = [u8; 8];

    fn from_seed(seed: Self::Seed) -> Self {
        Self::new(u64::from_le_bytes(seed))
    }

    fn seed_from_u64(state: u64) -> Self {
        Self::new(state)
    }
}
