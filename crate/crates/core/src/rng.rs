//! Counter-based deterministic random number generator.
//!
//! The generator is SplitMix64 run in counter mode: output `i` of a stream
//! with key `k` is
//!
//! ```text
//! out(i) = mix64(k .wrapping_add((i + 1) * 0x9E3779B97F4A7C15))
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer (Steele, Lea & Flood 2014).
//! Streams are derived from a master seed and a list of context words
//! (round index, client id, purpose tag) by repeated absorption:
//!
//! ```text
//! k0 = mix64(master ^ GAMMA)
//! k  = mix64(k .wrapping_add(GAMMA) ^ mix64(word))   for each word
//! ```
//!
//! Both recurrences use only 64-bit integer arithmetic, so any language can
//! reproduce the streams bit-exactly. Floating-point conversions are the
//! usual 53-bit mantissa scaling; Gaussians use Box-Muller.

use serde::{Deserialize, Serialize};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream purpose tags mixed into derived keys so unrelated consumers of the
/// same (seed, round, client) never share a stream.
pub mod purpose {
    pub const DATAGEN: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const SELECTION: u64 = 4;
    pub const CLIENT_TRAIN: u64 = 5;
    pub const ATTACK: u64 = 6;
    pub const INDICATOR: u64 = 7;
    pub const AGG_NOISE: u64 = 8;
    pub const POISON_BUILD: u64 = 9;
    pub const EVAL_BUILD: u64 = 10;
}

/// Deterministic counter-based RNG (SplitMix64 in counter mode).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    /// Derive a stream key from a master seed and context words.
    pub fn derive(master: u64, words: &[u64]) -> Self {
        let mut k = mix64(master ^ GAMMA);
        for &w in words {
            k = mix64(k.wrapping_add(GAMMA) ^ mix64(w));
        }
        Self::new(k)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, bound)`. Modulo reduction; the bias is below 2^-53
    /// for every bound used in the simulator.
    #[inline]
    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "bound must be positive");
        (self.next_u64() % bound as u64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch; one draw per call).
    pub fn next_gaussian(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Gamma(shape, 1) via Marsaglia-Tsang, with the alpha < 1 boost.
    pub fn next_gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0, "gamma shape must be positive");
        if shape < 1.0 {
            let g = self.next_gamma(shape + 1.0);
            let u = 1.0 - self.next_f64();
            return g * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.next_gaussian();
            let v = (1.0 + c * x).powi(3);
            if v <= 0.0 {
                continue;
            }
            let u = 1.0 - self.next_f64();
            if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return d * v;
            }
        }
    }

    /// Dirichlet(alpha * 1_k) proportion vector.
    pub fn next_dirichlet(&mut self, alpha: f64, k: usize) -> Vec<f64> {
        let gammas: Vec<f64> = (0..k).map(|_| self.next_gamma(alpha)).collect();
        let total: f64 = gammas.iter().sum();
        if total == 0.0 {
            // Vanishingly unlikely; fall back to uniform.
            return vec![1.0 / k as f64; k];
        }
        gammas.iter().map(|g| g / total).collect()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_below(i + 1);
            slice.swap(i, j);
        }
    }

    /// Sample `count` distinct values from `0..n` (partial Fisher-Yates),
    /// returned in ascending order.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n, "cannot sample {count} from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.next_below(n - i);
            pool.swap(i, j);
        }
        let mut picked = pool[..count].to_vec();
        picked.sort_unstable();
        picked
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = CounterRng::derive(42, &[1, 7, purpose::CLIENT_TRAIN]);
        let mut b = CounterRng::derive(42, &[1, 7, purpose::CLIENT_TRAIN]);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn context_words_separate_streams() {
        let mut a = CounterRng::derive(42, &[1, 7, purpose::CLIENT_TRAIN]);
        let mut b = CounterRng::derive(42, &[1, 8, purpose::CLIENT_TRAIN]);
        let mut c = CounterRng::derive(42, &[1, 7, purpose::ATTACK]);
        assert_ne!(a.next_u64(), b.next_u64());
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn counter_mode_matches_direct_evaluation() {
        // out(i) must depend only on (key, i), not on interleaved history.
        let mut seq = CounterRng::new(9001);
        let direct: Vec<u64> = (1..=5u64)
            .map(|i| mix64(9001u64.wrapping_add(i.wrapping_mul(GAMMA))))
            .collect();
        let got: Vec<u64> = (0..5).map(|_| seq.next_u64()).collect();
        assert_eq!(got, direct);
    }

    #[test]
    fn uniform_unit_interval() {
        let mut rng = CounterRng::new(3);
        for _ in 0..1000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = CounterRng::new(11);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn gamma_mean_matches_shape() {
        let mut rng = CounterRng::new(17);
        for &shape in &[0.2, 0.7, 1.0, 3.5] {
            let n = 20_000;
            let mean = (0..n).map(|_| rng.next_gamma(shape)).sum::<f64>() / n as f64;
            assert!(
                (mean - shape).abs() < 0.08 * shape.max(1.0),
                "shape {shape}: mean {mean}"
            );
        }
    }

    #[test]
    fn dirichlet_sums_to_one() {
        let mut rng = CounterRng::new(23);
        let p = rng.next_dirichlet(0.2, 10);
        assert_eq!(p.len(), 10);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn sample_indices_distinct_and_sorted() {
        let mut rng = CounterRng::new(5);
        let s = rng.sample_indices(100, 10);
        assert_eq!(s.len(), 10);
        let mut dedup = s.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}
