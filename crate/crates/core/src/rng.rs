//! Counter-based random streams.
//!
//! Draw `i` of a stream is a pure function of `(seed, i)`: the SplitMix64
//! finalizer applied to `seed + (i + 1) * γ`. Replaying a stream from a saved
//! `(seed, counter)` pair reproduces it exactly on every platform, and the
//! Gaussian transform uses the software `libm` routines for the same reason.

use alloc::vec::Vec;

use crate::tensor::Tensor;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Value at an absolute position, without touching the counter.
    #[inline]
    pub fn at(&self, index: u64) -> u64 {
        mix(self.seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Independent child stream keyed by `tag`, starting at counter 0.
    pub fn fork(&self, tag: u64) -> RngStream {
        RngStream::new(mix(self.seed ^ mix(tag.wrapping_add(GAMMA))), 0)
    }

    /// Uniform in `[0, 1)` with 53 bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (`n > 0`), by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Bernoulli draw with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fills `n` standard normal values with the Box–Muller transform.
    ///
    /// Each pair of outputs consumes two counter positions, so the counter
    /// advances by `2 * ceil(n / 2)`.
    pub fn normals(&mut self, n: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            // (0, 1] keeps the logarithm finite.
            let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
            let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let r = libm::sqrt(-2.0 * libm::log(u1));
            let theta = core::f64::consts::TAU * u2;
            out.push((r * libm::cos(theta)) as f32);
            out.push((r * libm::sin(theta)) as f32);
        }
        out.truncate(n);
        out
    }

    /// Tensor of i.i.d. standard normal draws.
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), self.normals(n))
    }
}
