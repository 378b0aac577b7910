//! Counter-based random numbers (Philox4x32-10).
//!
//! A draw is a pure function of `(seed, stream_id, counter)`, so substreams
//! for individual samples or frames can be derived without any shared state
//! and results do not depend on evaluation order.

use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result, Tensor};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// The Philox4x32 bijection with 10 rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// A deterministic random stream addressed by `(seed, stream_id, counter)`.
///
/// Each counter value names one 128-bit Philox block. The counter advances by
/// one per block consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter: 0,
        }
    }

    /// A fresh stream with the same seed and a different id.
    pub fn substream(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    /// Derives a stream id from a list of indices (e.g. step, batch element).
    pub fn derive_id(parts: &[u64]) -> u64 {
        // splitmix64 finaliser chained over the parts
        let mut h: u64 = 0x243F_6A88_85A3_08D3;
        for &p in parts {
            h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15);
            h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            h ^= h >> 31;
        }
        h
    }

    fn next_block(&mut self) -> [u32; 4] {
        let ctr = [
            self.counter as u32,
            (self.counter >> 32) as u32,
            self.stream_id as u32,
            (self.stream_id >> 32) as u32,
        ];
        let key = [self.seed as u32, (self.seed >> 32) as u32];
        self.counter = self.counter.wrapping_add(1);
        philox4x32_10(ctr, key)
    }

    fn next_u64_pair(&mut self) -> (u64, u64) {
        let b = self.next_block();
        (
            u64::from(b[0]) | (u64::from(b[1]) << 32),
            u64::from(b[2]) | (u64::from(b[3]) << 32),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.next_u64_pair().0
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        to_unit(self.next_u64())
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&mut self, n: u64) -> u64 {
        // 128-bit multiply-shift; bias is below 2^-64 · n
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Fills `out` with standard normal draws (Box-Muller, two per block).
    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_mut(2);
        for chunk in &mut chunks {
            let (a, b) = self.next_u64_pair();
            // (0, 1] keeps the log finite
            let u1 = 1.0 - to_unit(a);
            let u2 = to_unit(b);
            let r = math::sqrt(-2.0 * math::ln(u1));
            let theta = 2.0 * core::f64::consts::PI * u2;
            chunk[0] = r * math::cos(theta);
            if let Some(second) = chunk.get_mut(1) {
                *second = r * math::sin(theta);
            }
        }
    }

    /// Tensor of i.i.d. standard normal entries.
    pub fn gaussian(&mut self, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::EmptyShape(shape.to_vec()));
        }
        let n = shape.iter().product();
        let mut data = alloc::vec![0.0; n];
        self.fill_gaussian(&mut data);
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        let mut data = alloc::vec![0.0; n];
        self.fill_gaussian(&mut data);
        data
    }
}

#[inline]
fn to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
