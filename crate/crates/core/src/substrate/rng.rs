use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer. Bijective on u64, good avalanche.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine identifiers into a stream id. Used to derive independent
/// per-example / per-purpose streams from a base seed.
pub fn stream_hash(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64; // pi fractional bits
    for &p in parts {
        h = mix(h ^ p.wrapping_mul(GOLDEN));
    }
    h
}

/// Counter-based generator: output i of stream (seed, stream) is
/// `mix(key + i * GOLDEN)` with `key = mix(seed) ^ mix(stream)`. The same
/// (seed, stream, counter) triple yields the same value on every platform,
/// and streams can be split without sharing state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Rng {
            key: mix(seed ^ GOLDEN) ^ mix(stream.wrapping_add(GOLDEN)),
            counter: 0,
        }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Lemire multiply-shift; slight modulo bias
    /// below 2^-32 is irrelevant for the n used here and keeps draws at one
    /// counter increment each.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform in [lo, hi] inclusive.
    pub fn range_i64(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as u64) as i64
    }

    /// Standard normal via Box-Muller (two draws per pair, cached half
    /// discarded to keep the counter advance data-independent).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal truncated to [-2, 2] standard deviations, then scaled.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }
}

/// Inverse-CDF draw from a categorical distribution with a single uniform.
///
/// `probs` must be non-negative and sum to 1 within 1e-5.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> Result<usize> {
    let mut sum = 0.0;
    for &p in probs {
        if p < 0.0 || !p.is_finite() {
            return Err(Error::contract(format!(
                "categorical probability out of range: {p}"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::contract(format!(
            "categorical probabilities sum to {sum}, expected 1"
        )));
    }
    let u = rng.next_f64();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        cum += p;
        if u < cum {
            return Ok(i);
        }
    }
    // u landed in the rounding gap above the last mass; return the last
    // index that carries probability.
    Ok(last_nonzero)
}
