//! Counter-based deterministic randomness.
//!
//! Every random draw in this crate is a pure function of a key built from
//! context words (seed, timestep, layer, head, stream tag, indices) and a
//! counter. Draws are therefore identical under any execution order or
//! worker count. Not cryptographically secure.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a strong 64-bit mixing function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash an ordered tuple of context words into one key.
pub fn hash_words(words: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &w in words {
        h = mix64(h.wrapping_add(GOLDEN_GAMMA).wrapping_add(w));
    }
    h
}

/// Deterministic generator over a keyed counter sequence.
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        CounterRng { key, counter: 0 }
    }

    /// Key the stream on an ordered tuple of context words.
    pub fn from_words(words: &[u64]) -> Self {
        CounterRng::new(hash_words(words))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(
            self.key
                .wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    /// Uniform draw on the open interval (0, 1).
    #[inline]
    pub fn uniform_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open01();
        let u2 = self.uniform_open01();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Standard Gumbel draw: -ln(-ln(U)).
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open01().ln()).ln()
    }
}
