//! SplitMix64 — the crate's only source of randomness.
//!
//! Weight synthesis and random pruning masks both need streams that are
//! identical across platforms and across runs, which rules out anything with
//! unspecified internals. SplitMix64 is fully specified by three constants,
//! passes through u64 arithmetic only, and is trivial to re-derive by hand
//! when a test needs a frozen expected value.

/// Deterministic 64-bit generator (Steele, Lea & Flood's SplitMix64).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform f64 in [0, 1): the top 53 bits of the next output.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform index in `0..bound` (bound >= 1). Plain modulo: the tiny bias
    /// is irrelevant here — determinism is the requirement, not statistical
    /// perfection.
    pub fn next_index(&mut self, bound: usize) -> usize {
        debug_assert!(bound >= 1);
        (self.next_u64() % bound as u64) as usize
    }
}
