/// Counter-based deterministic RNG on the splitmix64 finalizer.
///
/// The generator is a pure function of (seed, position), so any consumer can
/// be handed an independent stream via `derive` without coordinating draw
/// counts with anyone else. Training derives one stream per purpose (init,
/// shuffling, attacks, bank fill) and per sample, which is what makes runs
/// reproducible regardless of batch composition or thread count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    pos: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const DERIVE_SALT: u64 = 0xA076_1D64_78BD_642F;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, pos: 0 }
    }

    /// Independent stream keyed by `tag`. Derivations compose, so
    /// `rng.derive(a).derive(b)` names a stream distinct from `rng.derive(b)`
    /// and from `rng.derive(a)` for any draws already taken.
    pub fn derive(&self, tag: u64) -> Self {
        let tagged = mix64(tag ^ DERIVE_SALT);
        RngState {
            seed: mix64(self.seed.wrapping_add(tagged).wrapping_mul(GOLDEN | 1)),
            pos: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.pos = self.pos.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.pos.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform() * (hi - lo)
    }

    /// Uniform integer in [0, n) by rejection, so every value is exactly
    /// equally likely.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller, cosine branch only. No draw is cached,
    /// so consuming one normal always advances the stream by exactly two
    /// uniforms; that fixed cost keeps derived streams reproducible.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]: ln stays finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform point on the unit sphere in `dim` dimensions: normalized
    /// isotropic Gaussian. Retries on the (measure-zero) degenerate draw.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        assert!(dim > 0);
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.iter().map(|x| x / norm).collect();
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    pub fn pos(&self) -> u64 {
        self.pos
    }
}

/// Stream tags. Every purpose that draws randomness gets its own constant so
/// adding a consumer never perturbs existing streams.
pub mod tags {
    pub const INIT_CLEAN: u64 = 0x01;
    pub const INIT_ROBUST: u64 = 0x02;
    pub const BANK_INIT: u64 = 0x03;
    pub const SHUFFLE: u64 = 0x04;
    pub const ATTACK_TRAIN: u64 = 0x05;
    pub const ATTACK_EVAL: u64 = 0x06;
    pub const DATA_MEANS: u64 = 0x07;
    pub const DATA_NOISE: u64 = 0x08;
    pub const SURFACE_DIR: u64 = 0x09;
}
