use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{tokenize, RetrievalError};

/// Maps text to a unit-norm vector of fixed dimension.
pub trait Embedder: Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError>;
}

/// Tolerance on the L2 norm of vectors treated as unit-norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Scales `v` to unit L2 norm in place. Vectors already within
/// [`UNIT_NORM_TOLERANCE`] of unit norm are left untouched, so callers can
/// compare stored vectors bit for bit with their inputs.
pub fn normalize(v: &mut [f32]) -> Result<(), RetrievalError> {
    let norm = libm::sqrt(v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>());
    if norm == 0.0 || !norm.is_finite() {
        return Err(RetrievalError::ZeroVector);
    }
    if (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE {
        return Ok(());
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(())
}

/// Deterministic offline embedder: signed feature hashing of character
/// trigrams and whole tokens, projected to `dim` buckets and normalized.
///
/// Lexically similar strings land close together, which is enough for
/// reproducible desk-scale retrieval without a model server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 0x5eed,
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn add_feature(&self, v: &mut [f32], feature: &[u8], weight: f32) {
        let h = fnv1a(self.seed, feature);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign * weight;
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        let mut v = vec![0.0f32; self.dim];
        let mut buf = Vec::new();
        for token in tokenize(text) {
            buf.clear();
            buf.extend_from_slice(b"w:");
            buf.extend_from_slice(token.as_bytes());
            self.add_feature(&mut v, &buf, 1.0);

            let padded: Vec<char> = core::iter::once(' ')
                .chain(token.chars())
                .chain(core::iter::once(' '))
                .collect();
            for gram in padded.windows(3) {
                buf.clear();
                buf.extend_from_slice(b"g:");
                for ch in gram {
                    let mut tmp = [0u8; 4];
                    buf.extend_from_slice(ch.encode_utf8(&mut tmp).as_bytes());
                }
                self.add_feature(&mut v, &buf, 0.5);
            }
        }
        if normalize(&mut v).is_err() {
            // Empty or cancelling input: fall back to the first basis vector.
            v.iter_mut().for_each(|x| *x = 0.0);
            v[0] = 1.0;
        }
        Ok(v)
    }
}
