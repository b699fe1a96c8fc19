//! Sentence-to-concept alignment and evidence pooling.
//!
//! Each evidence sentence `j` aligns with concept `k` through
//! `max(0, cos(h_j, d_k))`. Alignments are pooled per concept with a
//! weighted log-sum-exp at a fixed temperature, weights being
//! `ln(1 + support_count)` of the facet that owns the sentence. Users pool
//! liked and disliked evidence separately and take the difference.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cards::{CardMode, FacetCard};
use crate::concepts::ConceptBank;
use crate::embed::{EmbedError, EmbeddingStore, UnitVector};

pub const DEFAULT_TEMPERATURE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ActivationError {
    #[error("embedding dimension {found} does not match bank dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("pooling temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("evidence weight must be positive and finite, got {0}")]
    BadWeight(f64),
    #[error("card `{entity_id}` is a {found} card, expected {expected}")]
    WrongMode { entity_id: String, expected: CardMode, found: CardMode },
    #[error("card `{entity_id}`: {source}")]
    Embed {
        entity_id: String,
        #[source]
        source: EmbedError,
    },
    #[error("activation cache: {0}")]
    Cache(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub temperature: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self { temperature: DEFAULT_TEMPERATURE }
    }
}

impl PoolingConfig {
    pub fn new(temperature: f64) -> Result<Self, ActivationError> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(ActivationError::BadTemperature(temperature));
        }
        Ok(Self { temperature })
    }
}

/// One embedded evidence sentence ready for pooling.
#[derive(Debug, Clone)]
pub struct EvidenceUnit {
    pub sentence: String,
    pub embedding: UnitVector,
    pub weight: f64,
    pub facet: String,
    pub polarity: i8,
    pub review_id: String,
}

/// `ln(1 + support_count)`.
pub fn evidence_weight(support_count: u32) -> f64 {
    (support_count as f64).ln_1p()
}

/// The sentence that attains a concept's maximum alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    /// Position within the pooled evidence list.
    pub index: usize,
    pub facet: String,
    pub review_id: String,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub values: Vec<f64>,
    pub provenance: Vec<Option<Citation>>,
}

impl ConceptVector {
    pub fn zeros(k: usize) -> Self {
        Self { values: vec![0.0; k], provenance: vec![None; k] }
    }
}

/// `a_S = U⁺ − U⁻` with both pools kept for citation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedUserVector {
    pub a_s: Vec<f64>,
    pub positive: ConceptVector,
    pub negative: ConceptVector,
}

impl SignedUserVector {
    pub fn from_pools(positive: ConceptVector, negative: ConceptVector) -> Self {
        let a_s = positive.values.iter().zip(&negative.values).map(|(p, n)| p - n).collect();
        Self { a_s, positive, negative }
    }
}

/// ReLU-clipped cosine of one sentence against every prototype.
pub fn align(sentence: &[f64], bank: &ConceptBank) -> Result<Vec<f64>, ActivationError> {
    if sentence.len() != bank.dim {
        return Err(ActivationError::DimensionMismatch { expected: bank.dim, found: sentence.len() });
    }
    Ok(bank
        .prototypes
        .iter()
        .map(|d| crate::embed::dot(sentence, d).max(0.0))
        .collect())
}

/// Weighted log-sum-exp pooling of alignments. An empty evidence list pools
/// to the zero vector.
pub fn pool(
    evidence: &[EvidenceUnit],
    bank: &ConceptBank,
    cfg: PoolingConfig,
) -> Result<ConceptVector, ActivationError> {
    let cfg = PoolingConfig::new(cfg.temperature)?;
    if evidence.is_empty() {
        return Ok(ConceptVector::zeros(bank.k));
    }
    let rows = evidence
        .iter()
        .map(|e| align(e.embedding.as_slice(), bank))
        .collect::<Result<Vec<_>, _>>()?;
    let weights: Vec<f64> = evidence.iter().map(|e| e.weight).collect();
    let pooled = pool_alignments(&rows, &weights, cfg.temperature)?;

    let provenance = pooled
        .argmax
        .iter()
        .map(|slot| {
            slot.map(|j| Citation {
                index: j,
                facet: evidence[j].facet.clone(),
                review_id: evidence[j].review_id.clone(),
                sentence: evidence[j].sentence.clone(),
            })
        })
        .collect();
    Ok(ConceptVector { values: pooled.values, provenance })
}

/// Pooled values plus, per concept, the first sentence index attaining the
/// maximum alignment (`None` when every alignment is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct PooledScores {
    pub values: Vec<f64>,
    pub argmax: Vec<Option<usize>>,
}

/// Pools an `n × K` alignment matrix with per-row weights.
///
/// Evaluated as `max + ln Σ_j w̃_j exp(T (α_jk − max)) / T`, so no exponent
/// is positive.
pub fn pool_alignments(rows: &[Vec<f64>], weights: &[f64], temperature: f64) -> Result<PooledScores, ActivationError> {
    PoolingConfig::new(temperature)?;
    let Some(first) = rows.first() else {
        return Ok(PooledScores { values: Vec::new(), argmax: Vec::new() });
    };
    let k = first.len();
    if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(ActivationError::BadWeight(w));
    }
    let total: f64 = weights.iter().sum();
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let mut values = Vec::with_capacity(k);
    let mut argmax = Vec::with_capacity(k);
    for c in 0..k {
        let mut best = 0;
        for (j, row) in rows.iter().enumerate() {
            if row[c] > rows[best][c] {
                best = j;
            }
        }
        let max = rows[best][c];
        let acc: f64 = rows
            .iter()
            .zip(&norm)
            .map(|(r, w)| w * (temperature * (r[c] - max)).exp())
            .sum();
        let s = max + acc.ln() / temperature;
        // Σ w̃ can round to 1 + ulp; the true value never exceeds the max.
        values.push(s.min(max));
        argmax.push(if max > 0.0 { Some(best) } else { None });
    }
    Ok(PooledScores { values, argmax })
}

fn units_for(
    card: &FacetCard,
    store: &EmbeddingStore,
    keep: impl Fn(i8) -> bool,
) -> Result<Vec<EvidenceUnit>, ActivationError> {
    let mut out = Vec::new();
    for (facet, ev) in card.evidence() {
        if !keep(facet.polarity) {
            continue;
        }
        let embedding = store.embed(&ev.sentence).map_err(|source| ActivationError::Embed {
            entity_id: card.meta.entity_id.clone(),
            source,
        })?;
        out.push(EvidenceUnit {
            sentence: ev.sentence.clone(),
            embedding,
            weight: evidence_weight(facet.support_count.max(1)),
            facet: facet.facet.clone(),
            polarity: facet.polarity,
            review_id: ev.review_id.clone(),
        });
    }
    Ok(out)
}

fn expect_mode(card: &FacetCard, expected: CardMode) -> Result<(), ActivationError> {
    if card.mode() != expected {
        return Err(ActivationError::WrongMode {
            entity_id: card.meta.entity_id.clone(),
            expected,
            found: card.mode(),
        });
    }
    Ok(())
}

/// Evidence units of a user card with the given polarity, in card order.
pub fn user_evidence(card: &FacetCard, store: &EmbeddingStore, polarity: i8) -> Result<Vec<EvidenceUnit>, ActivationError> {
    units_for(card, store, |p| p == polarity)
}

pub fn user_vector(
    card: &FacetCard,
    store: &EmbeddingStore,
    bank: &ConceptBank,
    cfg: PoolingConfig,
) -> Result<SignedUserVector, ActivationError> {
    expect_mode(card, CardMode::User)?;
    let positive = pool(&user_evidence(card, store, 1)?, bank, cfg)?;
    let negative = pool(&user_evidence(card, store, -1)?, bank, cfg)?;
    Ok(SignedUserVector::from_pools(positive, negative))
}

pub fn item_vector(
    card: &FacetCard,
    store: &EmbeddingStore,
    bank: &ConceptBank,
    cfg: PoolingConfig,
) -> Result<ConceptVector, ActivationError> {
    expect_mode(card, CardMode::Item)?;
    pool(&units_for(card, store, |_| true)?, bank, cfg)
}

/// Identifies the bank, encoder and temperature an activation cache was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub bank_hash: String,
    pub store_hash: String,
    pub temperature: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub key: CacheKey,
    pub users: BTreeMap<String, SignedUserVector>,
    pub items: BTreeMap<String, ConceptVector>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum CacheLine {
    Header(CacheKey),
    User {
        entity_id: String,
        #[serde(flatten)]
        vector: SignedUserVector,
    },
    Item {
        entity_id: String,
        #[serde(flatten)]
        vector: ConceptVector,
    },
}

impl ActivationSet {
    pub fn compute(
        user_cards: &[FacetCard],
        item_cards: &[FacetCard],
        store: &EmbeddingStore,
        bank: &ConceptBank,
        cfg: PoolingConfig,
    ) -> Result<Self, ActivationError> {
        let key = CacheKey {
            bank_hash: bank.fingerprint(),
            store_hash: store.fingerprint(),
            temperature: cfg.temperature,
            k: bank.k,
        };
        let users = user_cards
            .iter()
            .map(|c| Ok((c.meta.entity_id.clone(), user_vector(c, store, bank, cfg)?)))
            .collect::<Result<_, ActivationError>>()?;
        let items = item_cards
            .iter()
            .map(|c| Ok((c.meta.entity_id.clone(), item_vector(c, store, bank, cfg)?)))
            .collect::<Result<_, ActivationError>>()?;
        Ok(Self { key, users, items })
    }

    pub fn save(&self, path: &Path) -> Result<(), ActivationError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut line = |l: &CacheLine| -> std::io::Result<()> {
            serde_json::to_writer(&mut out, l)?;
            out.write_all(b"\n")
        };
        line(&CacheLine::Header(self.key.clone()))?;
        for (id, v) in &self.users {
            line(&CacheLine::User { entity_id: id.clone(), vector: v.clone() })?;
        }
        for (id, v) in &self.items {
            line(&CacheLine::Item { entity_id: id.clone(), vector: v.clone() })?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ActivationError> {
        let mut key = None;
        let mut users = BTreeMap::new();
        let mut items = BTreeMap::new();
        for (idx, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CacheLine = serde_json::from_str(&line)
                .map_err(|e| ActivationError::Cache(format!("line {}: {e}", idx + 1)))?;
            match parsed {
                CacheLine::Header(k) if key.is_none() => key = Some(k),
                CacheLine::Header(_) => {
                    return Err(ActivationError::Cache(format!("line {}: second header", idx + 1)))
                }
                CacheLine::User { entity_id, vector } => {
                    users.insert(entity_id, vector);
                }
                CacheLine::Item { entity_id, vector } => {
                    items.insert(entity_id, vector);
                }
            }
        }
        let key = key.ok_or_else(|| ActivationError::Cache("missing header line".into()))?;
        let bad_len = users.values().any(|u: &SignedUserVector| u.a_s.len() != key.k)
            || items.values().any(|i: &ConceptVector| i.values.len() != key.k);
        if bad_len {
            return Err(ActivationError::Cache(format!("vector length differs from K = {}", key.k)));
        }
        Ok(Self { key, users, items })
    }

    /// Fails unless the cache was built with exactly this bank.
    pub fn check_bank(&self, bank: &ConceptBank) -> Result<(), ActivationError> {
        if self.key.bank_hash != bank.fingerprint() {
            return Err(ActivationError::Cache("built with a different concept bank".into()));
        }
        Ok(())
    }
}
