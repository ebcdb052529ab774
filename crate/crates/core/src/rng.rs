//! Counter-based splittable random number streams.
//!
//! Every (replication, queue, process) triple owns an independent stream so
//! that balance reports are reproducible regardless of how replications are
//! scheduled onto threads. A stream is identified by its root seed and the
//! path of split indices that derived it; identical `(seed, lineage)` pairs
//! reproduce identical sample sequences bit-exactly on every platform.

/// A deterministic stream: a 64-bit key plus a rolling counter.
///
/// Output is SplitMix64-style: the counter walks a Weyl sequence and each
/// draw finalizes `key ^ counter` through an avalanche mix. Not
/// cryptographic; statistically fine for simulation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    lineage: Vec<u64>,
    key: u64,
    counter: u64,
}

const WEYL: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two-word hash used to derive child keys from (parent key, split index).
#[inline]
fn derive_key(parent: u64, index: u64) -> u64 {
    let a = mix64(parent ^ 0xD134_2543_DE82_EF95);
    mix64(a.wrapping_add(mix64(index.wrapping_mul(WEYL) ^ 0x8E9D_5A8F_6A09_E667)))
}

impl RngStream {
    /// Root stream for a 64-bit seed (empty lineage).
    pub fn root(seed: u64) -> Self {
        Self {
            seed,
            lineage: Vec::new(),
            key: mix64(seed ^ 0xA076_1D64_78BD_642F),
            counter: 0,
        }
    }

    /// Derive the child stream at `index` without advancing this stream.
    pub fn split(&self, index: u64) -> Self {
        let mut lineage = self.lineage.clone();
        lineage.push(index);
        Self {
            seed: self.seed,
            lineage,
            key: derive_key(self.key, index),
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Path of split indices from the root seed to this stream.
    pub fn lineage(&self) -> &[u64] {
        &self.lineage
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key ^ self.counter.wrapping_mul(WEYL))
    }

    /// Uniform draw in `[0, 1)` with 53 significant bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Bernoulli draw with success probability `p`.
    #[inline]
    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Index into `weights` drawn proportionally to the weights.
    ///
    /// Weights must be nonnegative with positive sum; the last positive
    /// entry absorbs floating-point slack.
    pub fn next_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.next_f64() * total;
        let mut last = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
        last
    }
}
