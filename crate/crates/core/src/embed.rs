//! Frozen text-embedding providers.
//!
//! Two sources back an [`EmbeddingStore`]: precomputed vectors loaded from a
//! JSONL file (`{"text": ..., "vector": [...]}`) and a deterministic
//! character-trigram hashing encoder used when a text is not in the file.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default dimension for file-backed stores.
pub const DEFAULT_STORE_DIM: usize = 384;
/// Default dimension for the hashing encoder.
pub const DEFAULT_HASH_DIM: usize = 256;
/// Smallest dimension the hashing encoder accepts.
pub const MIN_HASH_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text is empty")]
    EmptyText,
    #[error("no embedding for `{0}` and fallback is disabled")]
    MissingEmbedding(String),
    #[error("hashing dimension {0} is below the minimum of {MIN_HASH_DIM}")]
    DimensionTooSmall(usize),
    #[error("line {line}: vector has dimension {found}, expected {expected}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: vector has zero or non-finite norm")]
    DegenerateVector { line: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("embedding file is empty")]
    EmptyStore,
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// A vector with unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Normalizes `values`; `None` when the norm is zero or not finite.
    pub fn normalize(mut values: Vec<f64>) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Some(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Signed feature hashing of character trigrams.
///
/// The text is lower-cased, whitespace runs collapse to one space and the
/// result is padded with a space on each side. Each trigram hashes to a
/// bucket (low bits) and a sign (top bit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEncoder {
    fn default() -> Self {
        Self { dim: DEFAULT_HASH_DIM, seed: 0 }
    }
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self, EmbedError> {
        if dim < MIN_HASH_DIM {
            return Err(EmbedError::DimensionTooSmall(dim));
        }
        Ok(Self { dim, seed })
    }

    pub fn encode(&self, text: &str) -> Result<UnitVector, EmbedError> {
        hash_encode(text, self.dim, self.seed)
    }
}

pub fn hash_encode(text: &str, dim: usize, seed: u64) -> Result<UnitVector, EmbedError> {
    if dim < MIN_HASH_DIM {
        return Err(EmbedError::DimensionTooSmall(dim));
    }
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let canonical = trimmed
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    let chars: Vec<char> = format!(" {canonical} ").chars().collect();

    let mut buckets = vec![0.0f64; dim];
    let mut gram = String::with_capacity(12);
    for window in chars.windows(3) {
        gram.clear();
        gram.extend(window);
        let h = splitmix64(fnv1a(gram.as_bytes()) ^ seed);
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        buckets[bucket] += sign;
    }
    if buckets.iter().all(|&b| b == 0.0) {
        // All trigrams cancelled; text-length parity picks the sign of the nudge.
        buckets[0] = if chars.len() % 2 == 1 { 1.0 } else { -1.0 };
    }
    Ok(UnitVector::normalize(buckets).expect("non-zero bucket vector"))
}

#[derive(Deserialize)]
struct EmbeddingLine {
    text: String,
    vector: Vec<f64>,
}

/// Immutable text → unit-vector lookup with an optional hashing fallback.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    entries: HashMap<String, UnitVector>,
    fallback: Option<HashEncoder>,
}

impl EmbeddingStore {
    /// A store with no precomputed entries, answering every query with the
    /// hashing encoder.
    pub fn hashing(encoder: HashEncoder) -> Self {
        Self { dim: encoder.dim, entries: HashMap::new(), fallback: Some(encoder) }
    }

    pub fn from_entries(
        dim: usize,
        entries: impl IntoIterator<Item = (String, UnitVector)>,
        fallback_seed: Option<u64>,
    ) -> Result<Self, EmbedError> {
        let mut map = HashMap::new();
        for (idx, (text, v)) in entries.into_iter().enumerate() {
            if v.dim() != dim {
                return Err(EmbedError::DimensionMismatch { line: idx + 1, expected: dim, found: v.dim() });
            }
            map.insert(text.trim().to_string(), v);
        }
        let fallback = match fallback_seed {
            Some(seed) => Some(HashEncoder::new(dim, seed)?),
            None => None,
        };
        Ok(Self { dim, entries: map, fallback })
    }

    /// Loads a JSONL embedding file, verifying a uniform dimension and
    /// renormalizing every vector.
    pub fn load(path: &Path, fallback_seed: Option<u64>) -> Result<Self, EmbedError> {
        let mut entries = Vec::new();
        let mut dim = None;
        for (idx, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: EmbeddingLine = serde_json::from_str(&line)
                .map_err(|e| EmbedError::Parse { line: idx + 1, message: e.to_string() })?;
            let expected = *dim.get_or_insert(parsed.vector.len());
            if parsed.vector.len() != expected {
                return Err(EmbedError::DimensionMismatch {
                    line: idx + 1,
                    expected,
                    found: parsed.vector.len(),
                });
            }
            let v = UnitVector::normalize(parsed.vector)
                .ok_or(EmbedError::DegenerateVector { line: idx + 1 })?;
            entries.push((parsed.text, v));
        }
        let dim = dim.ok_or(EmbedError::EmptyStore)?;
        Self::from_entries(dim, entries, fallback_seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fallback_enabled(&self) -> bool {
        self.fallback.is_some()
    }

    pub fn embed(&self, text: &str) -> Result<UnitVector, EmbedError> {
        let key = text.trim();
        if key.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        if let Some(v) = self.entries.get(key) {
            return Ok(v.clone());
        }
        match &self.fallback {
            Some(enc) => enc.encode(key),
            None => Err(EmbedError::MissingEmbedding(key.to_string())),
        }
    }

    /// Content hash: dimension, fallback settings and every entry in text order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.dim as u64).to_le_bytes());
        match self.fallback {
            Some(enc) => {
                hasher.update(b"fallback");
                hasher.update(enc.seed.to_le_bytes());
            }
            None => hasher.update(b"nofallback"),
        }
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        for key in keys {
            hasher.update((key.len() as u64).to_le_bytes());
            hasher.update(key.as_bytes());
            for v in self.entries[key].as_slice() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Embeds `text` with `store`; free-function form of [`EmbeddingStore::embed`].
pub fn embed_text(store: &EmbeddingStore, text: &str) -> Result<UnitVector, EmbedError> {
    store.embed(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn norm(v: &UnitVector) -> f64 {
        v.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn hash_encode_is_unit_norm_and_deterministic() {
        let a = hash_encode("fast pacing", 256, 0).unwrap();
        let b = hash_encode("fast pacing", 256, 0).unwrap();
        assert!((norm(&a) - 1.0).abs() < 1e-9);
        assert_eq!(a, b);
    }

    #[test]
    fn identical_text_has_cosine_one() {
        let a = hash_encode("abc", 256, 0).unwrap();
        assert!((a.dot(a.as_slice()) - 1.0).abs() < 1e-15);
    }

    // Golden value from an independent Python implementation of the
    // FNV-1a + splitmix64 trigram hash (d = 256, seed = 0).
    #[test]
    fn golden_cosine_fast_pacing_slow_plot() {
        let a = hash_encode("fast pacing", 256, 0).unwrap();
        let b = hash_encode("slow plot", 256, 0).unwrap();
        let cos = a.dot(b.as_slice());
        assert!((-1.0..=1.0).contains(&cos));
        // No shared trigrams and no bucket collisions at this seed.
        assert_eq!(cos, 0.0);

        let s = hash_encode("The live drums give the songs amazing energy.", 256, 0).unwrap();
        let p = hash_encode("live energy", 256, 0).unwrap();
        assert!((s.dot(p.as_slice()) - 0.47060485181697).abs() < 1e-12);
    }

    #[test]
    fn hash_encode_errors() {
        assert!(matches!(hash_encode("", 256, 0), Err(EmbedError::EmptyText)));
        assert!(matches!(hash_encode("   ", 256, 0), Err(EmbedError::EmptyText)));
        assert!(matches!(hash_encode("abc", 7, 0), Err(EmbedError::DimensionTooSmall(7))));
    }

    #[test]
    fn seed_changes_the_vector() {
        let a = hash_encode("vocal clarity", 256, 0).unwrap();
        let b = hash_encode("vocal clarity", 256, 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn store_lookup_and_fallback() {
        let stored = UnitVector::normalize(vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let store = EmbeddingStore::from_entries(8, [("live energy".to_string(), stored.clone())], Some(0)).unwrap();
        assert_eq!(store.embed("live energy").unwrap(), stored);
        assert_eq!(store.embed("  live energy ").unwrap(), stored);
        let unseen = store.embed("vocal clarity").unwrap();
        assert_eq!(unseen, store.embed("vocal clarity").unwrap());
        assert_eq!(unseen.dim(), 8);
        assert!(matches!(store.embed(""), Err(EmbedError::EmptyText)));

        let strict = EmbeddingStore::from_entries(8, [("live energy".to_string(), stored)], None).unwrap();
        assert!(matches!(strict.embed("vocal clarity"), Err(EmbedError::MissingEmbedding(_))));
    }

    #[test]
    fn load_renormalizes_and_checks_dimension() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, r#"{{"text":"live energy","vector":[3,4,0,0,0,0,0,0]}}"#).unwrap();
        writeln!(file, r#"{{"text":"vocal clarity","vector":[0,0,2,0,0,0,0,0]}}"#).unwrap();
        let store = EmbeddingStore::load(file.path(), None).unwrap();
        assert_eq!(store.dim(), 8);
        let v = store.embed("live energy").unwrap();
        assert!((v.as_slice()[0] - 0.6).abs() < 1e-15 && (v.as_slice()[1] - 0.8).abs() < 1e-15);

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, r#"{{"text":"a","vector":[1,0,0,0,0,0,0,0]}}"#).unwrap();
        writeln!(bad, r#"{{"text":"b","vector":[1,0]}}"#).unwrap();
        assert!(matches!(
            EmbeddingStore::load(bad.path(), None),
            Err(EmbedError::DimensionMismatch { line: 2, .. })
        ));

        let mut zero = tempfile::NamedTempFile::new().unwrap();
        writeln!(zero, r#"{{"text":"a","vector":[0,0,0,0,0,0,0,0]}}"#).unwrap();
        assert!(matches!(EmbeddingStore::load(zero.path(), None), Err(EmbedError::DegenerateVector { line: 1 })));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = EmbeddingStore::hashing(HashEncoder::new(256, 0).unwrap());
        let b = EmbeddingStore::hashing(HashEncoder::new(256, 1).unwrap());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    proptest! {
        #[test]
        fn outputs_are_unit_norm(text in "\\PC{1,60}", dim in 8usize..512, seed in any::<u64>()) {
            prop_assume!(!text.trim().is_empty());
            let v = hash_encode(&text, dim, seed).unwrap();
            prop_assert!((norm(&v) - 1.0).abs() < 1e-9);
            prop_assert_eq!(v, hash_encode(&text, dim, seed).unwrap());
        }
    }
}
