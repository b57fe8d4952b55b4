//! Hierarchical seed derivation.
//!
//! A stream is a root seed plus a `/`-separated path of labels such as
//! `client=3/partition/epoch=2`. Each label is hashed with 64-bit FNV-1a
//! (offset basis `0xcbf29ce484222325`, prime `0x100000001b3`) and folded into
//! the state with one SplitMix64 step (increment `0x9e3779b97f4a7c15`,
//! multipliers `0xbf58476d1ce4e5b9` and `0x94d049bb133111eb`). The derived
//! 64-bit seed keys a ChaCha8 generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

pub type SeedRng = ChaCha8Rng;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
    path: String,
    state: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        SeedStream {
            root,
            path: String::new(),
            state: splitmix64(root),
        }
    }

    /// Child stream one label below this one.
    pub fn derive(&self, label: &str) -> Self {
        let path = if self.path.is_empty() {
            label.to_string()
        } else {
            format!("{}/{label}", self.path)
        };
        SeedStream {
            root: self.root,
            path,
            state: splitmix64(self.state ^ fnv1a(label.as_bytes())),
        }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn seed(&self) -> u64 {
        self.state
    }

    pub fn rng(&self) -> SeedRng {
        ChaCha8Rng::seed_from_u64(self.state)
    }
}

/// Standard normal variate (ziggurat).
pub fn standard_normal(rng: &mut SeedRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Laplace(0, `scale`) as the scaled difference of two unit exponentials
/// (each drawn by ziggurat).
pub fn laplace(rng: &mut SeedRng, scale: f64) -> f64 {
    let a: f64 = Exp1.sample(rng);
    let b: f64 = Exp1.sample(rng);
    scale * (a - b)
}
