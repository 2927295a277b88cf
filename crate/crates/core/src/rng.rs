//! Deterministic pseudo-random generators.
//!
//! Everything that needs randomness (reference-backbone weights, guidance
//! initialization, augmentation, shuffling) draws from [`XorShift64Star`],
//! a 64-bit xorshift* generator with a fixed update rule, so that "seeded"
//! means bit-identical across platforms and processes. Independent streams
//! (per sample, per epoch, per worker) are derived from a global seed with
//! [`derive_seed`], a splitmix64 finalizer over `(seed, stream)`.
//!
//! Update rule (Marsaglia xorshift64 with the * output multiplier):
//!
//! ```text
//! s ^= s >> 12;  s ^= s << 25;  s ^= s >> 27;  output = s * 0x2545F4914F6CDD1D
//! ```
//!
//! A zero seed is remapped to `0x9E3779B97F4A7C15` since the xorshift state
//! must be nonzero.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// 64-bit xorshift* generator.
#[derive(Clone, Debug)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let state = if seed == 0 { GOLDEN } else { seed };
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut s = self.state;
        s ^= s >> 12;
        s ^= s << 25;
        s ^= s >> 27;
        self.state = s;
        s.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in [0, 1), using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [lo, hi] inclusive. Modulo bias is negligible for
    /// the small ranges used here and keeps the draw sequence documentable.
    pub fn uniform_usize(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

/// splitmix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed for an independent stream (sample index, epoch, worker)
/// from a global seed: `splitmix64(seed XOR splitmix64(stream))`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Pins the generator output so any platform or refactor that changes the
    // sequence fails loudly; reproducibility of seeded weights depends on it.
    #[test]
    fn xorshift_sequence_is_frozen() {
        let mut rng = XorShift64Star::new(42);
        let got: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
        let mut check = XorShift64Star::new(42);
        for &v in &got {
            assert_eq!(check.next_u64(), v);
        }
        // First output computed from the documented update rule by hand.
        let mut s: u64 = 42;
        s ^= s >> 12;
        s ^= s << 25;
        s ^= s >> 27;
        assert_eq!(got[0], s.wrapping_mul(0x2545_F491_4F6C_DD1D));
    }

    #[test]
    fn zero_seed_is_remapped() {
        let mut a = XorShift64Star::new(0);
        let mut b = XorShift64Star::new(GOLDEN);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn next_f64_in_unit_interval() {
        let mut rng = XorShift64Star::new(7);
        for _ in 0..1000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn derived_streams_differ() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(42, 0));
    }

    #[test]
    fn shuffle_is_deterministic() {
        let mut v1: Vec<u32> = (0..20).collect();
        let mut v2: Vec<u32> = (0..20).collect();
        XorShift64Star::new(3).shuffle(&mut v1);
        XorShift64Star::new(3).shuffle(&mut v2);
        assert_eq!(v1, v2);
        let mut v3: Vec<u32> = (0..20).collect();
        XorShift64Star::new(4).shuffle(&mut v3);
        assert_ne!(v1, v3);
    }
}
