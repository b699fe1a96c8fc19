//! Glue between the stages: phrase collection, leakage-safe item cards and
//! train/test pair sets.

use std::collections::BTreeMap;

use crate::activations::{ActivationError, ActivationSet, PoolingConfig};
use crate::cards::{check_leakage, exclude_reviews_by, ExclusionStats, FacetCard, LeakageReport, RatingRecord, SplitSpec};
use crate::concepts::ConceptBank;
use crate::embed::{EmbedError, EmbeddingStore, UnitVector};
use crate::train::{DatasetStats, PairDataset};

/// Every facet phrase on the given cards with its embedding, in card order.
pub fn facet_phrases<'a>(
    cards: impl IntoIterator<Item = &'a FacetCard>,
    store: &EmbeddingStore,
) -> Result<Vec<(String, UnitVector)>, EmbedError> {
    cards
        .into_iter()
        .flat_map(|c| &c.facets)
        .map(|f| Ok((f.facet.clone(), store.embed(&f.facet)?)))
        .collect()
}

/// Item cards with evidence by held-out users removed, plus the leakage
/// audit of the result. Without an ownership table nothing can be removed
/// and every review is reported as of unknown authorship.
pub fn leakage_safe_items(
    item_cards: &[FacetCard],
    split: &SplitSpec,
    ownership: &BTreeMap<String, String>,
) -> (Vec<FacetCard>, ExclusionStats, LeakageReport) {
    let (kept, stats) = exclude_reviews_by(item_cards, &split.test_users, ownership);
    let report = check_leakage(&kept, &split.test_users, ownership);
    (kept, stats, report)
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub activations: ActivationSet,
    pub train: PairDataset,
    pub train_stats: DatasetStats,
    pub test: PairDataset,
    pub test_stats: DatasetStats,
}

/// Builds activations for all cards and splits the ratings into the train
/// and held-out pair sets. `item_cards` should already be leakage-safe.
pub fn prepare(
    user_cards: &[FacetCard],
    item_cards: &[FacetCard],
    ratings: &[RatingRecord],
    split: &SplitSpec,
    store: &EmbeddingStore,
    bank: &ConceptBank,
    pooling: PoolingConfig,
) -> Result<Prepared, ActivationError> {
    let activations = ActivationSet::compute(user_cards, item_cards, store, bank, pooling)?;
    Ok(pairs_from(activations, ratings, split))
}

pub fn pairs_from(activations: ActivationSet, ratings: &[RatingRecord], split: &SplitSpec) -> Prepared {
    let (train, train_stats) = PairDataset::from_ratings(ratings, &split.train_users, &activations);
    let (test, test_stats) = PairDataset::from_ratings(ratings, &split.test_users, &activations);
    Prepared { activations, train, train_stats, test, test_stats }
}
