//! Learnable parameters and the scoring path.
//!
//! A source-domain user vector is carried into the target concept space by a
//! square transfer matrix, `a_T = M a_S`. The head scores the feature vector
//! `z = [a_T ⊙ b | δ_u a_T | δ_i b]` linearly and adds a per-item bias,
//! giving a centered score; the prediction adds back the training mean and
//! is clamped to the rating range.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cards::RatingRange;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite parameter in {0}")]
    NonFinite(&'static str),
    #[error("unknown ablation variant `{0}` (expected full, int-only, int+user or int+item)")]
    UnknownAblation(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn check_len(expected: usize, found: usize) -> Result<(), ModelError> {
    if expected != found {
        return Err(ModelError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Which marginal blocks feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ablation {
    pub delta_u: bool,
    pub delta_i: bool,
}

impl Ablation {
    pub const FULL: Self = Self { delta_u: true, delta_i: true };
    pub const INT_ONLY: Self = Self { delta_u: false, delta_i: false };
    pub const INT_USER: Self = Self { delta_u: true, delta_i: false };
    pub const INT_ITEM: Self = Self { delta_u: false, delta_i: true };

    pub fn user_scale(&self) -> f64 {
        if self.delta_u { 1.0 } else { 0.0 }
    }

    pub fn item_scale(&self) -> f64 {
        if self.delta_i { 1.0 } else { 0.0 }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.delta_u, self.delta_i) {
            (true, true) => "full",
            (false, false) => "int-only",
            (true, false) => "int+user",
            (false, true) => "int+item",
        })
    }
}

impl FromStr for Ablation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::FULL),
            "int-only" | "intonly" => Ok(Self::INT_ONLY),
            "int+user" | "int-user" => Ok(Self::INT_USER),
            "int+item" | "int-item" => Ok(Self::INT_ITEM),
            _ => Err(ModelError::UnknownAblation(s.to_string())),
        }
    }
}

impl TryFrom<String> for Ablation {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> Self {
        a.to_string()
    }
}

/// K×K transfer matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMap {
    k: usize,
    m: Vec<f64>,
}

impl TransferMap {
    pub fn identity(k: usize) -> Self {
        let mut m = vec![0.0; k * k];
        (0..k).for_each(|i| m[i * k + i] = 1.0);
        Self { k, m }
    }

    pub fn from_row_major(k: usize, m: Vec<f64>) -> Result<Self, ModelError> {
        check_len(k * k, m.len())?;
        Ok(Self { k, m })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.m[row * self.k + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.m[row * self.k + col] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.m
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.m
    }

    /// `‖M − I‖²_F`.
    pub fn identity_deviation(&self) -> f64 {
        let k = self.k;
        self.m
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let d = if idx / k == idx % k { v - 1.0 } else { *v };
                d * d
            })
            .sum()
    }

    pub fn apply(&self, a_s: &[f64]) -> Result<Vec<f64>, ModelError> {
        check_len(self.k, a_s.len())?;
        Ok(self
            .m
            .chunks_exact(self.k)
            .map(|row| row.iter().zip(a_s).map(|(m, a)| m * a).sum())
            .collect())
    }
}

/// `a_T = M a_S`.
pub fn map_user(a_s: &[f64], map: &TransferMap) -> Result<Vec<f64>, ModelError> {
    map.apply(a_s)
}

/// Linear scoring head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w_int: Vec<f64>,
    pub w_u: Vec<f64>,
    pub w_i: Vec<f64>,
    pub item_bias: BTreeMap<String, f64>,
    pub ablation: Ablation,
    pub mu_t: f64,
    pub rating_range: RatingRange,
}

impl Head {
    pub fn zeros(k: usize, mu_t: f64, ablation: Ablation, rating_range: RatingRange) -> Self {
        Self {
            w_int: vec![0.0; k],
            w_u: vec![0.0; k],
            w_i: vec![0.0; k],
            item_bias: BTreeMap::new(),
            ablation,
            mu_t,
            rating_range,
        }
    }

    pub fn k(&self) -> usize {
        self.w_int.len()
    }

    /// Item bias; zero for items never seen in training.
    pub fn bias(&self, item_id: &str) -> f64 {
        self.item_bias.get(item_id).copied().unwrap_or(0.0)
    }

    /// `w = [w_int | w_u | w_i]`.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(3 * self.k());
        w.extend_from_slice(&self.w_int);
        w.extend_from_slice(&self.w_u);
        w.extend_from_slice(&self.w_i);
        w
    }

    fn check_finite(&self) -> Result<(), ModelError> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.w_int) && finite(&self.w_u) && finite(&self.w_i)) {
            return Err(ModelError::NonFinite("head weights"));
        }
        if !self.item_bias.values().all(|b| b.is_finite()) {
            return Err(ModelError::NonFinite("item biases"));
        }
        if !self.mu_t.is_finite() {
            return Err(ModelError::NonFinite("mu_T"));
        }
        Ok(())
    }
}

/// `z = [a_T ⊙ b | δ_u a_T | δ_i b]`, always of length 3K.
pub fn features(a_t: &[f64], b: &[f64], ablation: Ablation) -> Result<Vec<f64>, ModelError> {
    check_len(a_t.len(), b.len())?;
    let (su, si) = (ablation.user_scale(), ablation.item_scale());
    let mut z = Vec::with_capacity(3 * a_t.len());
    z.extend(a_t.iter().zip(b).map(|(a, b)| a * b));
    z.extend(a_t.iter().map(|a| su * a));
    z.extend(b.iter().map(|b| si * b));
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// Centered score `wᵀz + b_i`.
    pub y_c: f64,
    /// `μ_T + y_c` before clamping.
    pub unclamped: f64,
    /// Prediction clamped to the rating range.
    pub rating: f64,
}

pub fn score(z: &[f64], item_id: &str, head: &Head) -> Result<Score, ModelError> {
    check_len(3 * head.k(), z.len())?;
    head.check_finite()?;
    let w = head.weights();
    let y_c = w.iter().zip(z).map(|(w, z)| w * z).sum::<f64>() + head.bias(item_id);
    let unclamped = head.mu_t + y_c;
    Ok(Score { y_c, unclamped, rating: head.rating_range.clamp(unclamped) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub transfer: TransferMap,
    pub head: Head,
    pub temperature: f64,
    pub bank_hash: String,
    pub seed: u64,
}

impl Model {
    pub fn k(&self) -> usize {
        self.transfer.k()
    }

    /// Fresh model: `M = I`, `w = 0`, no item biases.
    pub fn initial(k: usize, mu_t: f64, ablation: Ablation, rating_range: RatingRange) -> Self {
        Self {
            transfer: TransferMap::identity(k),
            head: Head::zeros(k, mu_t, ablation, rating_range),
            temperature: crate::activations::DEFAULT_TEMPERATURE,
            bank_hash: String::new(),
            seed: 0,
        }
    }

    pub fn map_user(&self, a_s: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.transfer.apply(a_s)
    }

    /// Scores a user (source-domain vector) against an item.
    pub fn predict(&self, a_s: &[f64], b: &[f64], item_id: &str) -> Result<Score, ModelError> {
        let a_t = self.map_user(a_s)?;
        self.score_mapped(&a_t, b, item_id)
    }

    pub fn score_mapped(&self, a_t: &[f64], b: &[f64], item_id: &str) -> Result<Score, ModelError> {
        check_len(self.k(), a_t.len())?;
        let z = features(a_t, b, self.head.ablation)?;
        score(&z, item_id, &self.head)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            k: self.k(),
            m: self.transfer.as_slice().to_vec(),
            w_int: self.head.w_int.clone(),
            w_u: self.head.w_u.clone(),
            w_i: self.head.w_i.clone(),
            item_bias: self.head.item_bias.clone(),
            mu_t: self.head.mu_t,
            delta_u: self.head.ablation.delta_u as u8,
            delta_i: self.head.ablation.delta_i as u8,
            rating_range: self.head.rating_range,
            temperature: self.temperature,
            bank_hash: self.bank_hash.clone(),
            seed: self.seed,
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self, ModelError> {
        for (name, len) in [("w_int", c.w_int.len()), ("w_u", c.w_u.len()), ("w_i", c.w_i.len())] {
            if len != c.k {
                return Err(ModelError::Checkpoint(format!("{name} has length {len}, K = {}", c.k)));
            }
        }
        if c.delta_u > 1 || c.delta_i > 1 {
            return Err(ModelError::Checkpoint("delta switches must be 0 or 1".into()));
        }
        let transfer = TransferMap::from_row_major(c.k, c.m)?;
        let head = Head {
            w_int: c.w_int,
            w_u: c.w_u,
            w_i: c.w_i,
            item_bias: c.item_bias,
            ablation: Ablation { delta_u: c.delta_u == 1, delta_i: c.delta_i == 1 },
            mu_t: c.mu_t,
            rating_range: c.rating_range,
        };
        head.check_finite()?;
        Ok(Self { transfer, head, temperature: c.temperature, bank_hash: c.bank_hash, seed: c.seed })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_checkpoint())?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let c: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(c)
    }
}

/// On-disk model format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(rename = "K")]
    pub k: usize,
    /// Row-major transfer matrix.
    #[serde(rename = "M")]
    pub m: Vec<f64>,
    pub w_int: Vec<f64>,
    pub w_u: Vec<f64>,
    pub w_i: Vec<f64>,
    pub item_bias: BTreeMap<String, f64>,
    #[serde(rename = "mu_T")]
    pub mu_t: f64,
    pub delta_u: u8,
    pub delta_i: u8,
    pub rating_range: RatingRange,
    pub temperature: f64,
    pub bank_hash: String,
    pub seed: u64,
}
