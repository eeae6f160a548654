//! Counter-based deterministic random number generation.
//!
//! Every random draw in a simulation is addressed by the tuple
//! `(seed, slot, domain, lane)` plus a per-stream counter. A stream is an
//! independent SplitMix64 sequence whose initial state is derived by mixing
//! the address words, so parallel sweeps and serial runs produce bit-identical
//! results regardless of evaluation order.
//!
//! The generator is pinned: SplitMix64 with the standard increment
//! `0x9E3779B97F4A7C15` and the Stafford variant-13 finalizer. Changing either
//! constant silently invalidates every recorded trace and golden metric, so
//! don't.

/// SplitMix64 sequence increment (golden-ratio constant).
const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stafford variant 13 finalizer, the mixing function used by SplitMix64.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draw-stream domains, kept disjoint so arrival and service randomness
/// never alias even when queue and activity indices collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Exogenous arrivals; lane = queue index.
    Arrivals = 0,
    /// Stochastic service realization; lane = activity index.
    Service = 1,
    /// Sampling machinery of the analysis checkers; lane = caller-defined.
    Analysis = 2,
}

/// One independent SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct StreamRng {
    state: u64,
}

impl StreamRng {
    /// Opens the stream addressed by `(seed, slot, domain, lane)`.
    pub fn substream(seed: u64, slot: u64, domain: Domain, lane: u64) -> Self {
        let mut h = mix64(seed);
        h = mix64(h.wrapping_add(GAMMA).wrapping_add(slot));
        h = mix64(h.wrapping_add(GAMMA).wrapping_add(domain as u64));
        h = mix64(h.wrapping_add(GAMMA).wrapping_add(lane));
        StreamRng { state: h }
    }

    /// Next raw 64-bit word.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform double in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Bernoulli draw with success probability `p` (clamped to `[0, 1]`).
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Poisson draw by Knuth's multiplication method. Intended for the
    /// per-slot arrival rates of this crate (order 1); cost grows linearly
    /// in `lambda`.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        if lambda <= 0.0 {
            return 0;
        }
        let limit = (-lambda).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            p *= self.next_f64();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }
}
