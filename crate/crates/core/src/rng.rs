//! Portable seeded generator.
//!
//! A 64-bit linear congruential generator with Knuth's MMIX constants:
//!
//! ```text
//! state' = state * 6364136223846793005 + 1442695040888963407   (mod 2^64)
//! ```
//!
//! Outputs are the high 32 bits of two successive states (`next_u64`) or the
//! top 53 bits of one state (`next_f64`). Independent streams are derived by
//! hashing `(seed, stream ids...)` through the SplitMix64 finalizer, so any
//! language with 64-bit wrapping arithmetic reproduces the exact sequence.

pub const LCG_MULTIPLIER: u64 = 6_364_136_223_846_793_005;
pub const LCG_INCREMENT: u64 = 1_442_695_040_888_963_407;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream seed from a base seed and a path of stream ids.
pub fn derive_seed(seed: u64, ids: &[u64]) -> u64 {
    ids.iter().fold(mix64(seed), |acc, &id| mix64(acc ^ mix64(id)))
}

#[derive(Clone, Debug)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub fn new(seed: u64) -> Self {
        Lcg64 { state: seed }
    }

    pub fn stream(seed: u64, ids: &[u64]) -> Self {
        Lcg64::new(derive_seed(seed, ids))
    }

    fn step(&mut self) -> u64 {
        self.state = self
            .state
            .wrapping_mul(LCG_MULTIPLIER)
            .wrapping_add(LCG_INCREMENT);
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        let hi = self.step() >> 32;
        let lo = self.step() >> 32;
        (hi << 32) | lo
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.step() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as usize
    }

    /// Standard normal sample via Box-Muller (cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_states_match_recurrence() {
        let mut g = Lcg64::new(0);
        assert_eq!(g.step(), LCG_INCREMENT);
        assert_eq!(
            g.step(),
            LCG_INCREMENT
                .wrapping_mul(LCG_MULTIPLIER)
                .wrapping_add(LCG_INCREMENT)
        );
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut g = Lcg64::stream(7, &[1, 2]);
            (0..4).map(|_| g.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut g = Lcg64::stream(7, &[1, 2]);
            (0..4).map(|_| g.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut g = Lcg64::stream(7, &[2, 1]);
            (0..4).map(|_| g.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut g = Lcg64::new(99);
        for _ in 0..10_000 {
            let v = g.uniform(-1.0, 1.0);
            assert!((-1.0..1.0).contains(&v));
            let k = g.range_inclusive(2, 5);
            assert!((2..=5).contains(&k));
        }
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut g = Lcg64::new(1234);
        let n = 50_000;
        let samples: Vec<f64> = (0..n).map(|_| g.normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
