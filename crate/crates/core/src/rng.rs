//! Deterministic random number generation.
//!
//! The generator is a SplitMix64 counter: the same seed yields the same
//! stream on every platform. Gaussian draws go through Box-Muller built on
//! the software `ln`/`sin`/`cos` in [`detmath`] rather than libm, because
//! libm results are not bit-identical across platforms while IEEE `sqrt`,
//! `+`, `-`, `*`, `/` are.

/// Counter-based PRNG with a 64-bit seed. Not shareable across threads;
/// derive independent substreams with [`Rng::derive`] instead.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent deterministic substream keyed by `tags`.
    /// Does not advance `self`.
    pub fn derive(&self, tags: &[u64]) -> Rng {
        let mut s = mix(self.state ^ 0xA076_1D64_78BD_642F);
        for &t in tags {
            s = mix(s.wrapping_add(GOLDEN_GAMMA).wrapping_add(t));
        }
        Rng { state: s }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn uniform_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Widening multiply keeps the draw unbiased enough for dataset work.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller on deterministic software transcendentals.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        // 1 - u1 is in (0, 1], so the log argument never reaches zero.
        let r = (-2.0 * detmath::ln(1.0 - u1)).sqrt();
        let (_s, c) = detmath::sin_cos(2.0 * std::f64::consts::PI * u2);
        r * c
    }

    pub fn normal_with(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.normal()
    }
}

/// Software transcendentals built from IEEE-exact primitives only.
/// Accuracy is ~1e-15 relative, which is all the Rng needs; the point is
/// that every platform computes the same bits.
pub mod detmath {
    const LN2_HI: f64 = 6.931471803691238e-1;
    const LN2_LO: f64 = 1.9082149292705877e-10;

    /// Natural log for x > 0 via exponent extraction and the atanh series.
    pub fn ln(x: f64) -> f64 {
        assert!(x > 0.0 && x.is_finite(), "detmath::ln domain");
        let bits = x.to_bits();
        let mut exp = ((bits >> 52) & 0x7FF) as i64 - 1023;
        let mut mant = f64::from_bits((bits & 0x000F_FFFF_FFFF_FFFF) | 0x3FF0_0000_0000_0000);
        if mant > std::f64::consts::SQRT_2 {
            mant *= 0.5;
            exp += 1;
        }
        let s = (mant - 1.0) / (mant + 1.0);
        let s2 = s * s;
        // 2*atanh(s); |s| <= 0.172 so ten odd terms reach ~1e-17.
        let mut term = s;
        let mut sum = s;
        for k in 1..=10u32 {
            term *= s2;
            sum += term / (2 * k + 1) as f64;
        }
        let e = exp as f64;
        e * LN2_HI + (e * LN2_LO + 2.0 * sum)
    }

    const PI_2_HI: f64 = 1.5707963267948966;
    const PI_2_LO: f64 = 6.123233995736766e-17;

    /// Simultaneous sine and cosine with Cody-Waite reduction; intended for
    /// |x| up to a few tens (the Box-Muller angle is in [0, 2*pi)).
    pub fn sin_cos(x: f64) -> (f64, f64) {
        let k = (x / PI_2_HI).round();
        let r = (x - k * PI_2_HI) - k * PI_2_LO;
        let (s, c) = kernel_sin_cos(r);
        match (k as i64).rem_euclid(4) {
            0 => (s, c),
            1 => (c, -s),
            2 => (-s, -c),
            _ => (-c, s),
        }
    }

    fn kernel_sin_cos(r: f64) -> (f64, f64) {
        let r2 = r * r;
        let mut s = r;
        let mut term = r;
        let mut sign = -1.0;
        let mut fact = 2.0;
        for _ in 0..8 {
            term *= r2 / (fact * (fact + 1.0));
            s += sign * term;
            sign = -sign;
            fact += 2.0;
        }
        let mut c = 1.0;
        let mut termc = 1.0;
        sign = -1.0;
        fact = 1.0;
        for _ in 0..8 {
            termc *= r2 / (fact * (fact + 1.0));
            c += sign * termc;
            sign = -sign;
            fact += 2.0;
        }
        (s, c)
    }
}
