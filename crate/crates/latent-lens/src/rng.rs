//! Seeded pseudo-random generation for every place reproducibility matters.
//!
//! A splitmix-style 64-bit generator drives factor sampling, weight
//! initialization, reparameterization noise, Box-Muller normal draws, and
//! shuffles. Reproducibility is promised per build of this crate, not across
//! implementations.

/// Splitmix64 generator with a cached Box-Muller spare.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    spare_normal: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare_normal: None,
        }
    }

    /// Seeds from a signed integer (the CLI-facing seed type).
    pub fn from_seed_i64(seed: i64) -> Self {
        Self::new(seed as u64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn next_open01(&mut self) -> f64 {
        (((self.next_u64() >> 11) as f64) + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform integer in `0..n`. The modulo bias is below 2^-58 for every
    /// range used in this crate.
    pub fn next_range(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        self.next_u64() % n
    }

    /// Standard normal draw via Box-Muller, consuming two uniforms per pair.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.next_normal()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_range(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// Derives an independent child generator from this stream.
    pub fn split(&mut self) -> SplitMix64 {
        SplitMix64::new(self.next_u64())
    }
}
