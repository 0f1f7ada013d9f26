//! Deterministic pseudo-randomness for every component in this workspace.
//!
//! All randomness flows from a single 64-bit seed through two fixed
//! algorithms so that runs reproduce bit-for-bit across platforms:
//!
//! * `splitmix64` (Steele, Lea, Flood 2014) expands seeds and derives
//!   sub-stream seeds.
//! * `xoshiro256**` (Blackman, Vigna 2018) generates the actual streams,
//!   with its 256-bit state filled by four splitmix64 outputs.
//!
//! Derived quantities are pinned to exact constructions: uniform f64 takes
//! the top 53 bits, bounded integers use modulo reduction, shuffles are
//! Fisher-Yates from the top, and normals use Box-Muller without caching
//! the spare value.

/// Seed-expansion generator. Also used on its own for sub-seed derivation.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix64(self.state)
    }
}

/// The splitmix64 output function on its own, used as a cheap bijective mixer.
fn mix64(v: u64) -> u64 {
    let mut z = v;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Main stream generator: xoshiro256** seeded via splitmix64.
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed);
        Self {
            s: [sm.next_u64(), sm.next_u64(), sm.next_u64(), sm.next_u64()],
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Modulo reduction; the bias is far below
    /// anything observable at the stream lengths used here.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle walking from the last element down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call and
    /// discards the paired variate so the stream position is predictable.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u1 = self.next_f64();
            if u1 > 0.0 {
                let u2 = self.next_f64();
                let r = (-2.0 * u1.ln()).sqrt();
                return r * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }
}

/// Derives the seed for a named sub-stream: mix64(seed XOR fnv1a(tag)).
/// Distinct tags give statistically independent streams from one run seed.
pub fn subseed(seed: u64, tag: &str) -> u64 {
    mix64(seed ^ fnv1a(tag.as_bytes()))
}

/// Sub-stream seed carrying an index, for per-step or per-item streams.
pub fn subseed_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    mix64(subseed(seed, tag) ^ mix64(index.wrapping_add(1)))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
