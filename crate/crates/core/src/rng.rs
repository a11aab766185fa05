//! Deterministic randomness. One root seed flows into every component via
//! labeled stream splitting, and generator state round-trips through
//! checkpoints exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 64-bit FNV-1a. Used for stream labels, config digests and file digests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn label_hash(label: &str, indices: &[u64]) -> u64 {
    let mut bytes = label.as_bytes().to_vec();
    for i in indices {
        bytes.extend_from_slice(&i.to_le_bytes());
    }
    fnv1a(&bytes)
}

/// ChaCha stream keyed by (root seed, label, indices). Distinct labels give
/// independent streams; the same key always gives the same stream.
pub fn stream(root_seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(label_hash(label, indices).into());
    rng
}

pub fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn standard_normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), standard_normal_vec(rng, n)).unwrap()
}

/// Serialized ChaCha state: 32-byte seed, stream id, word position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: u64::from_le_bytes(rng.get_stream().to_le_bytes()[..8].try_into().unwrap()),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream.into());
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(56);
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&self.stream.to_le_bytes());
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 56 {
            return Err(Error::format(format!(
                "rng state must be 56 bytes, got {}",
                bytes.len()
            )));
        }
        Ok(RngState {
            seed: bytes[..32].try_into().unwrap(),
            stream: u64::from_le_bytes(bytes[32..40].try_into().unwrap()),
            word_pos: u128::from_le_bytes(bytes[40..56].try_into().unwrap()),
        })
    }
}
