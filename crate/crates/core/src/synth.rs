//! Synthetic corpora generated from a planted concept model.
//!
//! Concepts are fixed anchor phrases. Every facet of every card is one of
//! them, and its evidence sentences are templates that contain the phrase,
//! so the hashing encoder aligns each sentence with its concept. The true
//! activations are pooled from those sentences exactly the way the
//! pipeline pools them, against the anchor embeddings in planted order.
//! A bank induced at `K = K_true` from the card facets therefore recovers
//! the planted concepts up to a permutation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activations::{item_vector, user_vector, ActivationError, PoolingConfig, DEFAULT_TEMPERATURE};
use crate::cards::{
    write_cards, write_ownership, write_ratings, CardError, CardMeta, CardMode, Evidence, Facet, FacetCard,
    RatingRange, RatingRecord,
};
use crate::concepts::ConceptBank;
use crate::embed::{EmbedError, EmbeddingStore, HashEncoder, DEFAULT_HASH_DIM};

pub const ANCHORS: [&str; 40] = [
    "live energy",
    "deep cuts",
    "catchy hooks",
    "slow pacing",
    "witty dialogue",
    "dark atmosphere",
    "strong vocals",
    "lush production",
    "plot twists",
    "family friendly",
    "epic battles",
    "quiet moments",
    "raw emotion",
    "sharp humor",
    "clever lyrics",
    "heavy bass",
    "acoustic warmth",
    "retro style",
    "complex characters",
    "stunning visuals",
    "tight editing",
    "gritty realism",
    "dreamy melodies",
    "fast tempo",
    "moral ambiguity",
    "romantic tension",
    "haunting score",
    "political intrigue",
    "big choruses",
    "technical skill",
    "nostalgic feel",
    "minimal arrangements",
    "jazz influences",
    "orchestral swells",
    "world building",
    "satirical edge",
    "long runtime",
    "improvised solos",
    "spooky mood",
    "feel good ending",
];

const LIKED: [&str; 4] =
    ["this has {} throughout", "i loved the {} here", "the {} kept me hooked", "so much {} in every scene"];
const DISLIKED: [&str; 4] =
    ["the {} really bothered me", "too much {} for my taste", "i could not stand the {}", "the {} ruined it for me"];
const DESCRIBED: [&str; 4] =
    ["this has {} throughout", "reviewers praise the {}", "expect plenty of {}", "the {} stands out"];

const BASE_TIME: i64 = 1_400_000_000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("unknown {kind} `{id}`")]
    UnknownEntity { kind: &'static str, id: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error(transparent)]
    Card(#[from] CardError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub k_true: usize,
    /// Hashing encoder dimension and seed; the pipeline must embed with the same.
    pub dim: usize,
    pub embed_seed: u64,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Off-diagonal entries of `M*` are drawn from `±m_offdiag`, the
    /// diagonal from `1 ± m_offdiag`.
    pub m_offdiag: f64,
    pub w_int_range: f64,
    pub w_u_range: f64,
    pub w_i_range: f64,
    pub bias_range: f64,
    pub mu: f64,
    pub facets_per_user: usize,
    pub facets_per_item: usize,
    pub evidence_per_facet: usize,
    pub max_support: u32,
    /// Chance that a user facet is liked rather than disliked.
    pub p_liked: f64,
    pub ratings_per_user: usize,
    /// Share of item evidence written by users who rated the item; the
    /// rest comes from reviewers outside the user population.
    pub p_user_authored: f64,
    pub temperature: f64,
    pub rating_range: RatingRange,
    pub source_domain: String,
    pub target_domain: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 100,
            k_true: 8,
            dim: DEFAULT_HASH_DIM,
            embed_seed: 0,
            seed: 0,
            noise_sigma: 0.0,
            m_offdiag: 0.1,
            w_int_range: 1.0,
            w_u_range: 0.5,
            w_i_range: 0.5,
            bias_range: 0.3,
            mu: 3.2,
            facets_per_user: 4,
            facets_per_item: 3,
            evidence_per_facet: 2,
            max_support: 5,
            p_liked: 0.7,
            ratings_per_user: 20,
            p_user_authored: 0.0,
            temperature: DEFAULT_TEMPERATURE,
            rating_range: RatingRange::default(),
            source_domain: "Movies".into(),
            target_domain: "Music".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(SynthError::InvalidConfig(msg.to_string())) };
        check(self.k_true >= 2 && self.k_true <= ANCHORS.len(), "k_true must lie in [2, 40]")?;
        check(self.n_users >= 1 && self.n_items >= 1, "need at least one user and one item")?;
        check((1..=self.n_items).contains(&self.ratings_per_user), "ratings_per_user must lie in [1, n_items]")?;
        check(
            (1..=self.k_true).contains(&self.facets_per_user) && (1..=self.k_true).contains(&self.facets_per_item),
            "facets per entity must lie in [1, k_true]",
        )?;
        check((1..=LIKED.len()).contains(&self.evidence_per_facet), "evidence_per_facet must lie in [1, 4]")?;
        check(self.max_support >= 1, "max_support must be >= 1")?;
        check(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(), "noise_sigma must be >= 0")?;
        check((0.0..=1.0).contains(&self.p_liked) && (0.0..=1.0).contains(&self.p_user_authored), "probabilities must lie in [0, 1]")?;
        let ranges = [self.m_offdiag, self.w_int_range, self.w_u_range, self.w_i_range, self.bias_range];
        check(ranges.iter().all(|r| *r >= 0.0 && r.is_finite()), "parameter ranges must be >= 0")?;
        check(self.rating_range.contains(self.mu), "mu must lie in the rating range")?;
        check(self.temperature > 0.0 && self.temperature.is_finite(), "temperature must be > 0")?;
        HashEncoder::new(self.dim, self.embed_seed)?;
        Ok(())
    }
}

/// Ground truth behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub phrases: Vec<String>,
    /// `M*`, row-major K×K.
    pub m: Vec<f64>,
    pub w_int: Vec<f64>,
    pub w_u: Vec<f64>,
    pub w_i: Vec<f64>,
    pub item_bias: BTreeMap<String, f64>,
    pub mu: f64,
    /// Source activations `a_S*` per user, in planted concept order.
    pub users: BTreeMap<String, Vec<f64>>,
    /// Item activations `b*` per item.
    pub items: BTreeMap<String, Vec<f64>>,
}

impl PlantedTruth {
    pub fn k(&self) -> usize {
        self.phrases.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// True centered score `y*_c = w*ᵀz* + b*_i`, before noise and clamping.
pub fn oracle_score(truth: &PlantedTruth, user_id: &str, item_id: &str) -> Result<f64, SynthError> {
    let a_s = truth
        .users
        .get(user_id)
        .ok_or_else(|| SynthError::UnknownEntity { kind: "user", id: user_id.to_string() })?;
    let b = truth
        .items
        .get(item_id)
        .ok_or_else(|| SynthError::UnknownEntity { kind: "item", id: item_id.to_string() })?;
    let k = truth.k();
    let mut y = truth.item_bias.get(item_id).copied().unwrap_or(0.0);
    for (c, &bc) in b.iter().enumerate().take(k) {
        let a_t: f64 = truth.m[c * k..(c + 1) * k].iter().zip(a_s).map(|(m, a)| m * a).sum();
        y += truth.w_int[c] * a_t * bc + truth.w_u[c] * a_t + truth.w_i[c] * bc;
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub user_cards: Vec<FacetCard>,
    pub item_cards: Vec<FacetCard>,
    pub ratings: Vec<RatingRecord>,
    /// Author of every review cited by any card.
    pub ownership: BTreeMap<String, String>,
    pub truth: PlantedTruth,
}

impl SynthCorpus {
    /// Writes `user_cards.jsonl`, `item_cards.jsonl`, `ratings.csv`,
    /// `ownership.csv` and `truth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        write_cards(&dir.join("user_cards.jsonl"), &self.user_cards)?;
        write_cards(&dir.join("item_cards.jsonl"), &self.item_cards)?;
        write_ratings(&dir.join("ratings.csv"), &self.ratings)?;
        write_ownership(&dir.join("ownership.csv"), &self.ownership)?;
        self.truth.save(&dir.join("truth.json"))
    }
}

/// The encoder a synthetic corpus was built for.
pub fn encoder_for(cfg: &SynthConfig) -> Result<HashEncoder, SynthError> {
    Ok(HashEncoder::new(cfg.dim, cfg.embed_seed)?)
}

/// Bank whose prototypes are the anchor embeddings in planted order.
pub fn planted_bank(phrases: &[String], store: &EmbeddingStore, seed: u64) -> Result<ConceptBank, SynthError> {
    let prototypes = phrases
        .iter()
        .map(|p| Ok(store.embed(p)?.into_inner()))
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(ConceptBank {
        k: phrases.len(),
        dim: store.dim(),
        seed,
        labels: phrases.to_vec(),
        prototypes,
        inertia: 0.0,
    })
}

fn id(prefix: char, i: usize, n: usize) -> String {
    let width = n.to_string().len().max(3);
    format!("{prefix}{i:0width$}")
}

fn draw_uniform(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.random_range(-range..=range)
    }
}

struct Review {
    id: String,
    owner: String,
}

fn facet(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    phrase: &str,
    polarity: i8,
    templates: &[&str; 4],
    mut review: impl FnMut(&mut ChaCha8Rng) -> Review,
    ownership: &mut BTreeMap<String, String>,
) -> Facet {
    let chosen = sample(rng, templates.len(), cfg.evidence_per_facet).into_vec();
    let evidence = chosen
        .into_iter()
        .map(|t| {
            let r = review(rng);
            ownership.insert(r.id.clone(), r.owner);
            let rating = match polarity {
                1 => rng.random_range(4..=5),
                -1 => rng.random_range(1..=2),
                _ => rng.random_range(3..=5),
            } as f64;
            Evidence {
                review_id: r.id,
                rating: cfg.rating_range.clamp(rating),
                unix_time: BASE_TIME + rng.random_range(0..100_000_000),
                sentence: templates[t].replace("{}", phrase),
            }
        })
        .collect();
    Facet { facet: phrase.to_string(), polarity, support_count: rng.random_range(1..=cfg.max_support), evidence }
}

/// Generates cards, ratings, review ownership and the planted truth.
/// Fully determined by `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.k_true;
    let phrases: Vec<String> =
        sample(&mut rng, ANCHORS.len(), k).into_iter().map(|i| ANCHORS[i].to_string()).collect();

    let mut m = vec![0.0; k * k];
    for (idx, v) in m.iter_mut().enumerate() {
        *v = if idx / k == idx % k { 1.0 } else { 0.0 } + draw_uniform(&mut rng, cfg.m_offdiag);
    }
    let w_int: Vec<f64> = (0..k).map(|_| draw_uniform(&mut rng, cfg.w_int_range)).collect();
    let w_u: Vec<f64> = (0..k).map(|_| draw_uniform(&mut rng, cfg.w_u_range)).collect();
    let w_i: Vec<f64> = (0..k).map(|_| draw_uniform(&mut rng, cfg.w_i_range)).collect();

    let user_ids: Vec<String> = (0..cfg.n_users).map(|i| id('u', i, cfg.n_users)).collect();
    let item_ids: Vec<String> = (0..cfg.n_items).map(|i| id('i', i, cfg.n_items)).collect();
    let item_bias: BTreeMap<String, f64> =
        item_ids.iter().map(|i| (i.clone(), draw_uniform(&mut rng, cfg.bias_range))).collect();

    // Who rates what, decided up front so item evidence can cite raters.
    let mut rated: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_users);
    let mut raters: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_items];
    for u in 0..cfg.n_users {
        let mut items = sample(&mut rng, cfg.n_items, cfg.ratings_per_user).into_vec();
        items.sort_unstable();
        items.iter().for_each(|&i| raters[i].push(u));
        rated.push(items);
    }

    let mut ownership = BTreeMap::new();
    let mut user_cards = Vec::with_capacity(cfg.n_users);
    for (u, user_id) in user_ids.iter().enumerate() {
        let mut concepts = sample(&mut rng, k, cfg.facets_per_user).into_vec();
        concepts.sort_unstable();
        let mut counter = 0usize;
        let facets = concepts
            .into_iter()
            .map(|c| {
                let polarity = if rng.random_bool(cfg.p_liked) { 1 } else { -1 };
                let templates = if polarity == 1 { &LIKED } else { &DISLIKED };
                let review = |_: &mut ChaCha8Rng| {
                    counter += 1;
                    Review { id: format!("r{user_id}-{counter}"), owner: user_ids[u].clone() }
                };
                facet(&mut rng, cfg, &phrases[c], polarity, templates, review, &mut ownership)
            })
            .collect();
        user_cards.push(FacetCard {
            meta: CardMeta { mode: CardMode::User, entity_id: user_id.clone(), domain: cfg.source_domain.clone() },
            facets,
        });
    }

    let mut external = 0usize;
    let mut item_cards = Vec::with_capacity(cfg.n_items);
    for (i, item_id) in item_ids.iter().enumerate() {
        let mut concepts = sample(&mut rng, k, cfg.facets_per_item).into_vec();
        concepts.sort_unstable();
        let mut counter = 0usize;
        let facets = concepts
            .into_iter()
            .map(|c| {
                let review = |rng: &mut ChaCha8Rng| {
                    counter += 1;
                    let owner = match raters[i].choose(rng) {
                        Some(&u) if rng.random_bool(cfg.p_user_authored) => user_ids[u].clone(),
                        _ => {
                            external += 1;
                            format!("x{external:06}")
                        }
                    };
                    Review { id: format!("r{item_id}-{counter}"), owner }
                };
                facet(&mut rng, cfg, &phrases[c], 0, &DESCRIBED, review, &mut ownership)
            })
            .collect();
        item_cards.push(FacetCard {
            meta: CardMeta { mode: CardMode::Item, entity_id: item_id.clone(), domain: cfg.target_domain.clone() },
            facets,
        });
    }

    let store = EmbeddingStore::hashing(encoder_for(cfg)?);
    let bank = planted_bank(&phrases, &store, cfg.seed)?;
    let pooling = PoolingConfig::new(cfg.temperature)?;
    let users = user_cards
        .iter()
        .map(|c| Ok((c.meta.entity_id.clone(), user_vector(c, &store, &bank, pooling)?.a_s)))
        .collect::<Result<BTreeMap<_, _>, SynthError>>()?;
    let items = item_cards
        .iter()
        .map(|c| Ok((c.meta.entity_id.clone(), item_vector(c, &store, &bank, pooling)?.values)))
        .collect::<Result<BTreeMap<_, _>, SynthError>>()?;
    let truth = PlantedTruth { phrases, m, w_int, w_u, w_i, item_bias, mu: cfg.mu, users, items };

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let mut ratings = Vec::with_capacity(cfg.n_users * cfg.ratings_per_user);
    for (u, items) in rated.iter().enumerate() {
        for &i in items {
            let y = oracle_score(&truth, &user_ids[u], &item_ids[i])?;
            let eps = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            ratings.push(RatingRecord {
                user_id: user_ids[u].clone(),
                item_id: item_ids[i].clone(),
                rating: cfg.rating_range.clamp(truth.mu + y + eps),
                unix_time: BASE_TIME + (ratings.len() as i64) * 60,
            });
        }
    }

    Ok(SynthCorpus { user_cards, item_cards, ratings, ownership, truth })
}

/// Users whose reviews are cited by item cards.
pub fn item_evidence_authors(corpus: &SynthCorpus) -> BTreeSet<String> {
    corpus
        .item_cards
        .iter()
        .flat_map(|c| c.evidence().map(|(_, e)| e.review_id.clone()))
        .filter_map(|r| corpus.ownership.get(&r).cloned())
        .collect()
}
