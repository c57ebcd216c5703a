use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded random source. The same seed and the same sequence of draws always
/// yield the same outputs; `draws` counts how far the stream has advanced.
#[derive(Clone, Debug)]
pub struct SimRng {
    seed: u64,
    draws: u64,
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            draws: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform draw in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        self.draws += 1;
        self.inner.gen_range(lo..=hi)
    }

    /// Returns true with probability `num/den`. Certain outcomes consume no draw.
    pub fn chance(&mut self, num: u64, den: u64) -> bool {
        if num == 0 {
            return false;
        }
        if num >= den {
            return true;
        }
        self.draws += 1;
        self.inner.gen_range(0..den) < num
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SimRng::new(7);
        let mut b = SimRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.range_inclusive(0, 1000), b.range_inclusive(0, 1000));
        }
        assert_eq!(a.draws(), 100);
    }

    #[test]
    fn certain_outcomes_do_not_draw() {
        let mut r = SimRng::new(1);
        assert!(!r.chance(0, 10));
        assert!(r.chance(10, 10));
        assert_eq!(r.draws(), 0);
    }
}
