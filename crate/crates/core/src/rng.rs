//! Deterministic counter-based random number generator.
//!
//! A single 64-bit seed drives every random choice in the pipeline; the
//! generator is a pure function of (seed, counter) so runs are reproducible
//! bit-for-bit and independent streams can be forked by label.

/// SplitMix64-style counter generator.
#[derive(Debug, Clone)]
pub struct DetRng {
    seed: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng { seed, counter: 0 }
    }

    /// Independent stream derived from this generator's seed and a label.
    pub fn fork(&self, label: u64) -> DetRng {
        DetRng {
            seed: mix(self.seed ^ label.wrapping_mul(GOLDEN).wrapping_add(0x5851F42D4C957F2D)),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = c.wrapping_add(1);
        mix(self.seed.wrapping_add(c.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
