//! Seeded, platform-independent random streams.
//!
//! Child seeds come from a splitmix64 mix of (master seed, generation, child
//! index); each seed drives a xoshiro256** stream whose uniforms feed a
//! Box-Muller transform. Transcendentals go through `libm` so the same seed
//! yields the same bits on every target.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 output function applied to `state + GOLDEN_GAMMA`.
pub fn splitmix64_mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64_mix(self.state);
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        out
    }
}

/// Seed for child `child_index` of generation `generation`.
pub fn derive_child_seed(master_seed: u64, generation: u64, child_index: u64) -> u64 {
    let inner = generation
        .wrapping_mul(GOLDEN_GAMMA)
        .wrapping_add(child_index);
    splitmix64_mix(master_seed ^ splitmix64_mix(inner))
}

#[derive(Debug, Clone)]
pub struct Xoshiro256StarStar {
    s: [u64; 4],
}

impl Xoshiro256StarStar {
    /// Expands `seed` into the 256-bit state with splitmix64.
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed);
        let s = [sm.next_u64(), sm.next_u64(), sm.next_u64(), sm.next_u64()];
        Self { s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe to take the logarithm of.
    #[inline]
    pub fn next_f64_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo + 1;
        if span == 0 {
            return self.next_u64();
        }
        // Lemire's multiply-shift with rejection keeps the draw unbiased.
        let zone = span.wrapping_neg() % span;
        loop {
            let m = (self.next_u64() as u128) * (span as u128);
            if (m as u64) >= zone {
                return lo + (m >> 64) as u64;
            }
        }
    }
}

/// Box-Muller pair for `u1 in (0, 1]`, `u2 in [0, 1)`.
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = libm::sqrt(-2.0 * libm::log(u1));
    let (s, c) = libm::sincos(std::f64::consts::TAU * u2);
    (r * c, r * s)
}

/// Standard-normal stream; both Box-Muller outputs are used, cosine branch first.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: Xoshiro256StarStar,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256StarStar::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_f64(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.rng.next_f64_open0();
        let u2 = self.rng.next_f64();
        let (z1, z2) = box_muller(u1, u2);
        self.spare = Some(z2);
        z1
    }

    /// Fills `out` with the next `out.len()` values, rounded to `f32`.
    pub fn fill(&mut self, out: &mut [f32]) {
        let mut slots = out.iter_mut();
        if self.spare.is_some() {
            if let Some(first) = slots.next() {
                *first = self.next_f64() as f32;
            }
        }
        let rest = slots.into_slice();
        let mut pairs = rest.chunks_exact_mut(2);
        for pair in &mut pairs {
            let u1 = self.rng.next_f64_open0();
            let u2 = self.rng.next_f64();
            let (z1, z2) = box_muller(u1, u2);
            pair[0] = z1 as f32;
            pair[1] = z2 as f32;
        }
        if let [last] = pairs.into_remainder() {
            *last = self.next_f64() as f32;
        }
    }

    pub fn rng_mut(&mut self) -> &mut Xoshiro256StarStar {
        &mut self.rng
    }
}

/// `len` standard-normal values from the stream seeded with `seed`.
pub fn sample_noise(seed: u64, len: usize) -> Vec<f32> {
    let mut out = vec![0.0; len];
    GaussianStream::new(seed).fill(&mut out);
    out
}
