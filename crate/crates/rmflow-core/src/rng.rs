//! Counter-based pseudo-random source.
//!
//! The generator is a SplitMix64 stream indexed by `(key, counter)`: the
//! i-th output is a pure function of the key and i, so identical seeds give
//! bit-identical streams and independent substreams can be derived without
//! sharing mutable state. Splitting derives a new key from the parent key
//! and a child tag, which keeps batch-sharded sampling reproducible no
//! matter how the shards are scheduled.

use crate::mathx;
use crate::tensor::Tensor;
use alloc::vec::Vec;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const SPLIT_SALT: u64 = 0x517c_c1b7_2722_0a95;

#[inline(always)]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based RNG state: a key plus the number of values consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { key: mix64(seed ^ GOLDEN), counter: 0 }
    }

    /// Derives an independent child stream; the parent is unaffected.
    pub fn split(&self, child: u64) -> Rng {
        Rng { key: mix64(self.key ^ mix64(child.wrapping_mul(GOLDEN) ^ SPLIT_SALT)), counter: 0 }
    }

    /// Raw state, serialized into checkpoints.
    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    pub fn from_state(key: u64, counter: u64) -> Self {
        Rng { key, counter }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box-Muller; pairs are consumed one at a time).
    #[inline]
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        mathx::sqrt(-2.0 * mathx::ln(u1)) * mathx::cos(2.0 * core::f64::consts::PI * u2)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Tensor of i.i.d. standard normal entries.
    pub fn randn(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), self.normal_vec(n))
    }

    /// Categorical draw from unnormalized nonnegative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
