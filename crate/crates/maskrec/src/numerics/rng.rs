//! Seeded deterministic random source.
//!
//! xoshiro256** seeded through SplitMix64. State transitions are pure
//! integer arithmetic, so the draw sequence is identical on every
//! platform for a given seed. Child streams are derived by mixing the
//! parent seed with an FNV-1a hash of a stream label, never by sharing
//! state.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF29CE484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for `label`. Deterministic in
    /// (parent seed, label) and unaffected by draws from the parent.
    pub fn derive(&self, label: &str) -> Rng {
        Rng::new(self.seed ^ fnv1a64(label.as_bytes()))
    }

    /// Child stream indexed by a number (per-sample, per-worker streams).
    pub fn derive_index(&self, label: &str, index: u64) -> Rng {
        Rng::new(self.seed ^ fnv1a64(label.as_bytes()) ^ index.wrapping_mul(0x9E3779B97F4A7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) without modulo bias (rejection sampling).
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % n;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        loop {
            let u1 = self.next_f64();
            let u2 = self.next_f64();
            if u1 > 0.0 {
                let r = (-2.0 * u1.ln()).sqrt();
                return r * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Draw an index from an unnormalized nonnegative weight vector.
    /// Weights are renormalized internally; the returned index always has
    /// strictly positive weight.
    pub fn categorical(&mut self, probs: &[f64]) -> Result<usize> {
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidArgument(
                "categorical weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(
                "categorical weights sum to zero".into(),
            ));
        }
        let u = self.next_f64() * total;
        let mut acc = 0.0;
        let mut last_positive = None;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_positive = Some(i);
                if u < acc {
                    return Ok(i);
                }
            }
        }
        // u landed on the final boundary through rounding.
        Ok(last_positive.expect("positive total implies a positive weight"))
    }

    /// Draw `k` distinct indices sequentially: each draw removes the chosen
    /// index and renormalizes the remaining weights.
    pub fn sample_without_replacement(&mut self, probs: &[f64], k: usize) -> Result<Vec<usize>> {
        let support = probs.iter().filter(|&&p| p > 0.0).count();
        if k > support {
            return Err(Error::InvalidArgument(format!(
                "cannot draw {k} distinct indices from a support of {support}"
            )));
        }
        let mut remaining = probs.to_vec();
        let mut chosen = Vec::with_capacity(k);
        for _ in 0..k {
            let idx = self.categorical(&remaining)?;
            chosen.push(idx);
            remaining[idx] = 0.0;
        }
        Ok(chosen)
    }
}
