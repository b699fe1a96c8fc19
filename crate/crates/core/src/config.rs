//! Run configuration, read from TOML and overridden from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activations::DEFAULT_TEMPERATURE;
use crate::cards::RatingRange;
use crate::concepts::KMeansParams;
use crate::diagnostics::DEFAULT_RANDOM_DRAWS;
use crate::embed::DEFAULT_HASH_DIM;
use crate::model::Ablation;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub user_cards: Option<PathBuf>,
    pub item_cards: Option<PathBuf>,
    pub ratings: Option<PathBuf>,
    pub ownership: Option<PathBuf>,
    /// JSONL `{"text", "vector"}` store; the hashing encoder is used when absent.
    pub embeddings: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out"), user_cards: None, item_cards: None, ratings: None, ownership: None, embeddings: None }
    }
}

impl Paths {
    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn or_out(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out(name))
    }

    pub fn user_cards(&self) -> PathBuf {
        self.or_out(&self.user_cards, "user_cards.jsonl")
    }
    pub fn item_cards(&self) -> PathBuf {
        self.or_out(&self.item_cards, "item_cards.jsonl")
    }
    pub fn ratings(&self) -> PathBuf {
        self.or_out(&self.ratings, "ratings.csv")
    }
    pub fn ownership(&self) -> PathBuf {
        self.or_out(&self.ownership, "ownership.csv")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub dim: usize,
    pub seed: u64,
    /// Hash unknown texts when a file store is used.
    pub fallback: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { dim: DEFAULT_HASH_DIM, seed: 0, fallback: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratio: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    /// Largest m on the curves; K/4 when unset.
    pub m_max: Option<usize>,
    pub draws: usize,
    /// Number of test pairs to sample; all pairs when unset.
    pub sample: Option<usize>,
    pub seed: u64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self { m_max: None, draws: DEFAULT_RANDOM_DRAWS, sample: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub embed: EmbedConfig,
    pub bank: KMeansParams,
    pub temperature: f64,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub rating_range: RatingRange,
    /// Training seeds for repeated evaluation runs.
    pub seeds: Vec<u64>,
    pub diagnostics: DiagConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            embed: EmbedConfig::default(),
            bank: KMeansParams::default(),
            temperature: DEFAULT_TEMPERATURE,
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::FULL,
            rating_range: RatingRange::default(),
            seeds: vec![0, 1, 2, 3, 4],
            diagnostics: DiagConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(!self.seeds.is_empty(), "seeds must not be empty");
        anyhow::ensure!(self.rating_range.lo < self.rating_range.hi, "rating_range.lo must be below rating_range.hi");
        anyhow::ensure!(self.temperature > 0.0 && self.temperature.is_finite(), "temperature must be positive");
        anyhow::ensure!(self.split.ratio > 0.0 && self.split.ratio < 1.0, "split.ratio must lie in (0, 1)");
        self.train.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
