//! Seeded pseudo-randomness.
//!
//! The generator is xoshiro256++ (Blackman & Vigna), seeded through
//! splitmix64. Both are fixed algorithms over `u64` words, so the same seed
//! yields the same stream on every platform — every random quantity in this
//! crate is reproducible from a single root seed.
//!
//! Streams are split hierarchically with [`Rng::derive`]: the child seed is a
//! hash of the parent's seed and a label, independent of how much of the
//! parent stream has been consumed. This keeps sub-experiments (data
//! generation, adapter init, shuffling) independently reproducible.

/// Deterministic PRNG: xoshiro256++ state plus the seed it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
    /// Second output of the last Box-Muller draw, if unused.
    spare_normal: Option<f64>,
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; used to fold stream labels into child seeds.
fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed.wrapping_mul(0x100000001b3);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            seed,
            state,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for `label`, independent of this stream's position.
    pub fn derive(&self, label: &str) -> Rng {
        Rng::new(fnv1a(self.seed, label.as_bytes()))
    }

    /// Child stream for an indexed label, e.g. per-task or per-stage streams.
    pub fn derive_indexed(&self, label: &str, index: u64) -> Rng {
        let h = fnv1a(self.seed, label.as_bytes());
        Rng::new(fnv1a(h, &index.to_le_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; the paired draw is cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform index in `0..n` (n > 0). Multiply-shift mapping; the bias of
    /// at most n / 2^64 is irrelevant at the sizes used here.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_index(i + 1);
            slice.swap(i, j);
        }
    }

    /// Full state snapshot, for checkpointing.
    pub fn snapshot(&self) -> RngState {
        RngState {
            seed: self.seed,
            state: self.state,
            spare_normal: self.spare_normal,
        }
    }

    pub fn restore(snapshot: &RngState) -> Rng {
        Rng {
            seed: snapshot.seed,
            state: snapshot.state,
            spare_normal: snapshot.spare_normal,
        }
    }
}

/// Serializable RNG state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RngState {
    pub seed: u64,
    pub state: [u64; 4],
    pub spare_normal: Option<f64>,
}
