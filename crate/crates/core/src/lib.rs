//! Cold-start cross-domain rating prediction through a shared concept
//! space, with exact per-concept explanations citing review evidence.
//!
//! Stages: facet cards ([`cards`]) are embedded ([`embed`]) and clustered
//! into a concept bank ([`concepts`]); evidence is pooled into concept
//! activations ([`activations`]); a linear transfer map and additive head
//! ([`model`]) are fit on centered ratings ([`train`]); predictions
//! decompose into cited contributions ([`explain`]) checked by
//! faithfulness curves ([`diagnostics`]). [`synth`] generates corpora from
//! a planted model for end-to-end testing.

pub mod activations;
pub mod cards;
pub mod cli;
pub mod concepts;
pub mod config;
pub mod diagnostics;
pub mod embed;
pub mod explain;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use activations::{ActivationSet, ConceptVector, PoolingConfig, SignedUserVector};
pub use cards::{FacetCard, RatingRange, RatingRecord, SplitSpec};
pub use concepts::{ConceptBank, KMeansParams};
pub use embed::{EmbeddingStore, HashEncoder, UnitVector};
pub use explain::{ConceptContribution, Explanation};
pub use model::{Ablation, Model};
pub use train::{PairDataset, TrainConfig};
