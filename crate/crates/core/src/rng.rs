//! SplitMix64 generator with deterministic stream splitting.
//!
//! Every random draw in the workspace (weight initialization, shuffling,
//! augmentation, synthetic data) comes from one root seed. Independent
//! streams are derived by hashing a purpose tag into the root seed with the
//! SplitMix64 finalizer, so adding or reordering consumers never perturbs
//! the draws of an existing stream.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; also used to derive child stream seeds.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Child stream for a tagged purpose. `rng.split(a) == rng.split(a)` and
    /// streams with distinct tags are independent for practical purposes.
    pub fn split(&self, tag: u64) -> Rng {
        Rng {
            state: mix64(self.state ^ mix64(tag.wrapping_mul(GOLDEN).wrapping_add(GOLDEN))),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Stream tags used across the workspace. Parameter initialization derives a
/// further per-name stream from `PARAM_INIT` so that identically named
/// parameters get identical values regardless of registration order.
pub mod streams {
    use super::{mix64, Rng};

    pub const PARAM_INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SYNTH: u64 = 4;

    /// FNV-1a over the parameter name; stable across runs and platforms.
    pub fn name_tag(name: &str) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }

    pub fn param_rng(root_seed: u64, name: &str) -> Rng {
        Rng::new(root_seed).split(PARAM_INIT).split(name_tag(name))
    }

    pub fn epoch_rng(root_seed: u64, purpose: u64, epoch: u64) -> Rng {
        Rng::new(root_seed)
            .split(purpose)
            .split(mix64(epoch.wrapping_add(1)))
    }
}
