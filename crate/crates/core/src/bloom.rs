//! Secret-keyed bloom filter over code chunks, used to localize tampered
//! chunks, plus closed-form storage and download-cost calculators.

use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::code_image::{ApplicationImage, KeyedHasher, SecretKey};

pub const DEFAULT_NUM_KEYS: usize = 4;
pub const DEFAULT_MU: usize = 8;
pub const DEFAULT_KAPPA: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BloomError {
    #[error("bloom filter needs at least one key")]
    NoKeys,
    #[error("bloom filter size mu * chunk_count is zero")]
    ZeroSize,
    #[error("image has {image} chunks but the filter was built for {filter}")]
    SizeMismatch { image: usize, filter: usize },
    #[error("invalid bloom parameters: {0}")]
    InvalidParams(&'static str),
    #[error("malformed serialized filter")]
    Malformed,
}

/// Parameters of the localization cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BloomParams {
    /// Filter bits per chunk.
    pub mu: usize,
    pub num_keys: usize,
    pub chunk_count: usize,
    /// Chunks modified by the adversary.
    pub kappa: usize,
}

impl Default for BloomParams {
    fn default() -> Self {
        BloomParams { mu: DEFAULT_MU, num_keys: DEFAULT_NUM_KEYS, chunk_count: 64, kappa: DEFAULT_KAPPA }
    }
}

impl BloomParams {
    pub fn validate(&self) -> Result<(), BloomError> {
        if self.mu == 0 || self.num_keys == 0 || self.chunk_count == 0 {
            return Err(BloomError::InvalidParams("mu, num_keys and chunk_count must be positive"));
        }
        if self.kappa > self.chunk_count {
            return Err(BloomError::InvalidParams("kappa exceeds chunk_count"));
        }
        Ok(())
    }

    pub fn false_positive_rate(&self) -> f64 {
        false_positive_rate(self.num_keys, self.mu)
    }
}

/// Bloom filter whose hash functions are keyed with secrets the adversary
/// never learns, so it cannot craft a replacement chunk that tests present.
#[derive(Clone)]
pub struct KeyedBloomFilter {
    bits: Vec<u64>,
    len_bits: usize,
    chunk_count: usize,
    hashers: Arc<[KeyedHasher]>,
}

impl std::fmt::Debug for KeyedBloomFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyedBloomFilter")
            .field("len_bits", &self.len_bits)
            .field("chunk_count", &self.chunk_count)
            .field("num_keys", &self.hashers.len())
            .finish()
    }
}

impl KeyedBloomFilter {
    fn empty(keys: &[SecretKey], mu: usize, chunk_count: usize) -> Result<Self, BloomError> {
        if keys.is_empty() {
            return Err(BloomError::NoKeys);
        }
        let len_bits = mu * chunk_count;
        if len_bits == 0 {
            return Err(BloomError::ZeroSize);
        }
        Ok(KeyedBloomFilter {
            bits: vec![0; len_bits.div_ceil(64)],
            len_bits,
            chunk_count,
            hashers: keys.iter().map(KeyedHasher::new).collect(),
        })
    }

    pub fn len_bits(&self) -> usize {
        self.len_bits
    }

    pub fn chunk_count(&self) -> usize {
        self.chunk_count
    }

    pub fn num_keys(&self) -> usize {
        self.hashers.len()
    }

    fn positions<'a>(&'a self, index: usize, bytes: &'a [u8]) -> impl Iterator<Item = usize> + 'a {
        let idx = (index as u32).to_le_bytes();
        self.hashers.iter().map(move |h| {
            let d = h.digest_parts([&idx[..], bytes]);
            (d.low_u64() % self.len_bits as u64) as usize
        })
    }

    fn get(&self, pos: usize) -> bool {
        self.bits[pos / 64] >> (pos % 64) & 1 == 1
    }

    pub fn insert(&mut self, index: usize, bytes: &[u8]) {
        let pos: Vec<usize> = self.positions(index, bytes).collect();
        for p in pos {
            self.bits[p / 64] |= 1 << (p % 64);
        }
    }

    pub fn contains(&self, index: usize, bytes: &[u8]) -> bool {
        self.positions(index, bytes).all(|p| self.get(p))
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Serializes as `u32 LE bit length ‖ u32 LE key count ‖ bit bytes`.
    /// The keys themselves are never written out.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len_bits.div_ceil(8));
        out.extend_from_slice(&(self.len_bits as u32).to_le_bytes());
        out.extend_from_slice(&(self.hashers.len() as u32).to_le_bytes());
        let bytes: Vec<u8> = self.bits.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.extend_from_slice(&bytes[..self.len_bits.div_ceil(8)]);
        out
    }

    /// Restores a serialized filter, re-attaching the secret keys.
    pub fn from_bytes(data: &[u8], keys: &[SecretKey], chunk_count: usize) -> Result<Self, BloomError> {
        if data.len() < 8 {
            return Err(BloomError::Malformed);
        }
        let len_bits = u32::from_le_bytes(data[0..4].try_into().unwrap()) as usize;
        let key_count = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
        if key_count != keys.len() || chunk_count == 0 || len_bits % chunk_count != 0 {
            return Err(BloomError::Malformed);
        }
        let body = &data[8..];
        if body.len() != len_bits.div_ceil(8) {
            return Err(BloomError::Malformed);
        }
        let mut f = Self::empty(keys, len_bits / chunk_count, chunk_count)?;
        for (i, b) in body.iter().enumerate() {
            f.bits[i / 8] |= (*b as u64) << (8 * (i % 8));
        }
        Ok(f)
    }
}

impl PartialEq for KeyedBloomFilter {
    fn eq(&self, other: &Self) -> bool {
        self.len_bits == other.len_bits && self.chunk_count == other.chunk_count && self.bits == other.bits
    }
}

/// Inserts every `(index, chunk)` pair of `image` under each key.
pub fn build_filter(image: &ApplicationImage, keys: &[SecretKey], mu: usize) -> Result<KeyedBloomFilter, BloomError> {
    let mut f = KeyedBloomFilter::empty(keys, mu, image.chunk_count())?;
    for (i, c) in image.chunks().iter().enumerate() {
        f.insert(i, c);
    }
    Ok(f)
}

/// Indices of chunks that test absent: the suspect set.
pub fn localize(filter: &KeyedBloomFilter, image: &ApplicationImage) -> Result<BTreeSet<usize>, BloomError> {
    if image.chunk_count() != filter.chunk_count {
        return Err(BloomError::SizeMismatch { image: image.chunk_count(), filter: filter.chunk_count });
    }
    Ok(image
        .chunks()
        .iter()
        .enumerate()
        .filter(|(i, c)| !filter.contains(*i, c))
        .map(|(i, _)| i)
        .collect())
}

/// Probability that a modified chunk still tests present:
/// `(1 - e^{-|L|/mu})^{|L|}`.
pub fn false_positive_rate(num_keys: usize, mu: usize) -> f64 {
    let l = num_keys as f64;
    (1.0 - (-l / mu as f64).exp()).powf(l)
}

/// Probability that at least one of `kappa` modified chunks escapes
/// localization, forcing a full download.
pub fn prob_full_download(p: f64, kappa: usize) -> f64 {
    1.0 - (1.0 - p).powi(kappa as i32)
}

/// Expected number of chunks a blank device downloads.
pub fn expected_download_chunks(chunk_count: usize, p: f64, kappa: usize) -> f64 {
    let clean = (1.0 - p).powi(kappa as i32);
    chunk_count as f64 * (1.0 - clean) + kappa as f64 * clean
}

/// Bit widths of everything held in secure memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SecramLayout {
    pub pk_bits: u64,
    pub ell: u64,
    pub cert_bits: u64,
    pub num_keys: u64,
    pub mu: u64,
    pub chunk_count: u64,
    pub lambda_bits: u64,
    pub key_bits: u64,
    pub num_neighbors: u64,
}

impl Default for SecramLayout {
    fn default() -> Self {
        SecramLayout {
            pk_bits: 1024,
            ell: 128,
            cert_bits: 256,
            num_keys: DEFAULT_NUM_KEYS as u64,
            mu: DEFAULT_MU as u64,
            chunk_count: 64,
            lambda_bits: 32,
            key_bits: 128,
            num_neighbors: 0,
        }
    }
}

impl SecramLayout {
    /// Total secure-memory bits:
    /// `3|pk| + (4+|L|)ℓ + 3|cert| + μZ/t + 3|λ| + 2|k||N|`.
    pub fn total_bits(&self) -> u64 {
        3 * self.pk_bits
            + (4 + self.num_keys) * self.ell
            + 3 * self.cert_bits
            + self.mu * self.chunk_count
            + 3 * self.lambda_bits
            + 2 * self.key_bits * self.num_neighbors
    }

    /// Storage attributable to localization: keys plus filter bits.
    pub fn bloom_extra_bits(&self) -> u64 {
        self.ell * self.num_keys + self.mu * self.chunk_count
    }

    /// Storage of the naive alternative that keeps one digest per chunk.
    pub fn naive_extra_bits(&self) -> u64 {
        self.ell * self.chunk_count
    }
}

#[allow(clippy::too_many_arguments)]
pub fn secram_bits(
    pk_bits: u64,
    ell: u64,
    cert_bits: u64,
    num_keys: u64,
    mu: u64,
    chunk_count: u64,
    lambda_bits: u64,
    key_bits: u64,
    num_neighbors: u64,
) -> u64 {
    SecramLayout { pk_bits, ell, cert_bits, num_keys, mu, chunk_count, lambda_bits, key_bits, num_neighbors }
        .total_bits()
}
