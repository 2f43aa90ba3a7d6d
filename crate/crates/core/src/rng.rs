//! Deterministic counter-style random number generator.
//!
//! Every stochastic choice in the crate (weight init, data synthesis, batch
//! shuffling, trial generation) flows through this generator so that a seed
//! fully determines a run. The core is the SplitMix64 sequence: a 64-bit
//! counter advanced by a fixed odd constant and scrambled by a finalising
//! mix, which is bit-exact on every platform.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded deterministic generator. Identical seeds produce identical streams
/// regardless of platform or build settings.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            state: seed,
            spare_normal: None,
        }
    }

    /// The seed this generator was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child generator for a named stream (repeat
    /// index, epoch number). Children with distinct stream ids are
    /// decorrelated from each other and from the parent.
    pub fn derive(&self, stream: u64) -> Rng {
        let child = mix64(
            self.seed
                .wrapping_add(GOLDEN_GAMMA.wrapping_mul(stream.wrapping_add(1))),
        );
        Rng::new(child)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via the Marsaglia polar method (no trigonometry, so
    /// the only transcendental is `ln`). Pairs are generated at once and the
    /// spare is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * m);
                return u * m;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
