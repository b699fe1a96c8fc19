//! Per-concept contributions, cited explanations and single-coordinate
//! what-if edits.
//!
//! The head is additive over concepts, so `y_c = Σ_k contrib_k + b_i` holds
//! up to float rounding and every explanation is an exact decomposition of
//! the score.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activations::{Citation, ConceptVector, SignedUserVector};
use crate::model::{Model, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("concept index {k} out of range for K = {big_k}")]
    IndexOutOfRange { k: usize, big_k: usize },
    #[error("edit value must be finite, got {0}")]
    NonFinite(f64),
}

/// A sentence cited for one side of a contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitedEvidence {
    pub facet: String,
    pub review_id: String,
    pub sentence: String,
    /// +1 or −1 for user evidence, 0 for item evidence.
    pub polarity: i8,
}

impl CitedEvidence {
    fn from_citation(c: &Citation, polarity: i8) -> Self {
        Self { facet: c.facet.clone(), review_id: c.review_id.clone(), sentence: c.sentence.clone(), polarity }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptContribution {
    pub k: usize,
    pub label: Option<String>,
    pub contrib: f64,
    pub int_term: f64,
    pub user_term: f64,
    pub item_term: f64,
    /// Source concept whose evidence is cited for the user side.
    pub source_concept: Option<usize>,
    pub user_evidence: Option<CitedEvidence>,
    pub item_evidence: Option<CitedEvidence>,
}

/// The K additive terms of `y_c`. Switched-off blocks contribute zero.
pub fn contributions(model: &Model, a_t: &[f64], b: &[f64]) -> Result<Vec<ConceptContribution>, ExplainError> {
    let k = model.k();
    for len in [a_t.len(), b.len()] {
        if len != k {
            return Err(ModelError::DimensionMismatch { expected: k, found: len }.into());
        }
    }
    let head = &model.head;
    let (su, si) = (head.ablation.user_scale(), head.ablation.item_scale());
    Ok((0..k)
        .map(|c| {
            let int_term = head.w_int[c] * a_t[c] * b[c];
            let user_term = su * head.w_u[c] * a_t[c];
            let item_term = si * head.w_i[c] * b[c];
            ConceptContribution {
                k: c,
                label: None,
                contrib: int_term + user_term + item_term,
                int_term,
                user_term,
                item_term,
                source_concept: None,
                user_evidence: None,
                item_evidence: None,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub user_id: String,
    pub item_id: String,
    pub y_c: f64,
    pub b_i: f64,
    pub mu_t: f64,
    /// Clamped prediction.
    pub r_hat: f64,
    pub top_positive: Vec<ConceptContribution>,
    pub top_negative: Vec<ConceptContribution>,
    /// `|y_c − (Σ_k contrib_k + b_i)|` over all K concepts.
    pub reconstruction_residual: f64,
}

/// Source concept `k'` maximizing `|M[k,k'] · a_S[k']|`, lowest index on
/// ties; `None` when every product is zero.
pub fn dominant_source(model: &Model, a_s: &[f64], k: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (src, a) in a_s.iter().enumerate() {
        let v = (model.transfer.get(k, src) * a).abs();
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((src, v));
        }
    }
    best.map(|(src, _)| src)
}

fn user_citation(user: &SignedUserVector, src: usize) -> Option<CitedEvidence> {
    let pos = user.positive.values[src];
    let neg = user.negative.values[src];
    if neg.abs() > pos.abs() {
        user.negative.provenance[src].as_ref().map(|c| CitedEvidence::from_citation(c, -1))
    } else {
        user.positive.provenance[src].as_ref().map(|c| CitedEvidence::from_citation(c, 1))
    }
}

/// Builds the explanation for one pair. The positive list holds
/// contributions ≥ 0 in descending order, the negative list those ≤ 0 in
/// ascending order, each truncated to `n`; equal values keep concept order.
pub fn render(
    model: &Model,
    labels: &[String],
    user_id: &str,
    user: &SignedUserVector,
    item_id: &str,
    item: &ConceptVector,
    n: usize,
) -> Result<Explanation, ExplainError> {
    let a_t = model.map_user(&user.a_s)?;
    let score = model.score_mapped(&a_t, &item.values, item_id)?;
    let mut all = contributions(model, &a_t, &item.values)?;
    for c in &mut all {
        c.label = labels.get(c.k).cloned();
        c.source_concept = dominant_source(model, &user.a_s, c.k);
        c.user_evidence = c.source_concept.and_then(|src| user_citation(user, src));
        c.item_evidence = item.provenance.get(c.k).and_then(|p| p.as_ref()).map(|p| CitedEvidence::from_citation(p, 0));
    }
    let b_i = model.head.bias(item_id);
    let total: f64 = all.iter().map(|c| c.contrib).sum();
    let residual = (score.y_c - (total + b_i)).abs();

    let mut positive: Vec<_> = all.iter().filter(|c| c.contrib >= 0.0).cloned().collect();
    positive.sort_by(|a, b| b.contrib.total_cmp(&a.contrib));
    positive.truncate(n);
    let mut negative: Vec<_> = all.iter().filter(|c| c.contrib <= 0.0).cloned().collect();
    negative.sort_by(|a, b| a.contrib.total_cmp(&b.contrib));
    negative.truncate(n);

    Ok(Explanation {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        y_c: score.y_c,
        b_i,
        mu_t: model.head.mu_t,
        r_hat: score.rating,
        top_positive: positive,
        top_negative: negative,
        reconstruction_residual: residual,
    })
}

fn concept_name(c: &ConceptContribution) -> String {
    c.label.clone().unwrap_or_else(|| format!("concept {}", c.k))
}

/// Two-column text table, concept with signed contribution on the left and
/// the cited sentences on the right. Zero contributions are left out.
pub fn to_table(e: &Explanation) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "user {}  item {}  r_hat {:.4}  (mu_T {:.4} + y_c {:.4}, b_i {:+.4})",
        e.user_id, e.item_id, e.r_hat, e.mu_t, e.y_c, e.b_i
    );
    let rows: Vec<(String, Vec<String>)> = e
        .top_positive
        .iter()
        .chain(&e.top_negative)
        .filter(|c| c.contrib != 0.0)
        .map(|c| {
            let mut cites = Vec::new();
            if let Some(u) = &c.user_evidence {
                cites.push(format!("U: \"{}\" [{}]", u.sentence, u.review_id));
            }
            if let Some(i) = &c.item_evidence {
                cites.push(format!("I: \"{}\" [{}]", i.sentence, i.review_id));
            }
            if cites.is_empty() {
                cites.push("-".to_string());
            }
            (format!("{} ({:+.2})", concept_name(c), c.contrib), cites)
        })
        .collect();
    let width = rows.iter().map(|(c, _)| c.chars().count()).chain(["Concept (contrib)".len()]).max().unwrap_or(0);
    let _ = writeln!(out, "{:<width$} | Cited evidence", "Concept (contrib)");
    let _ = writeln!(out, "{}-+-{}", "-".repeat(width), "-".repeat(14));
    for (concept, cites) in rows {
        for (j, cite) in cites.iter().enumerate() {
            let left = if j == 0 { concept.as_str() } else { "" };
            let _ = writeln!(out, "{left:<width$} | {cite}");
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "side", rename_all = "lowercase")]
pub enum Edit {
    /// Set `a_T[k] := value`.
    User { k: usize, value: f64 },
    /// Set `b[k] := value`.
    Item { k: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub y_c: f64,
    pub new_y_c: f64,
    pub delta: f64,
}

/// Score change of a single-coordinate edit, from linearity of the head.
pub fn whatif(model: &Model, a_t: &[f64], b: &[f64], item_id: &str, edit: Edit) -> Result<WhatIf, ExplainError> {
    let big_k = model.k();
    let (k, value) = match edit {
        Edit::User { k, value } | Edit::Item { k, value } => (k, value),
    };
    if k >= big_k {
        return Err(ExplainError::IndexOutOfRange { k, big_k });
    }
    if !value.is_finite() {
        return Err(ExplainError::NonFinite(value));
    }
    let y_c = model.score_mapped(a_t, b, item_id)?.y_c;
    let head = &model.head;
    let delta = match edit {
        Edit::User { .. } => (value - a_t[k]) * (head.w_int[k] * b[k] + head.ablation.user_scale() * head.w_u[k]),
        Edit::Item { .. } => (value - b[k]) * (head.w_int[k] * a_t[k] + head.ablation.item_scale() * head.w_i[k]),
    };
    Ok(WhatIf { y_c, new_y_c: y_c + delta, delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cards::RatingRange;
    use crate::model::Ablation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(k: usize, rng: &mut ChaCha8Rng, ablation: Ablation) -> Model {
        let mut m = Model::initial(k, rng.random_range(2.5..4.0), ablation, RatingRange::default());
        m.transfer.as_mut_slice().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        for w in [&mut m.head.w_int, &mut m.head.w_u, &mut m.head.w_i] {
            w.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        m.head.item_bias.insert("i".into(), rng.random_range(-0.5..0.5));
        m
    }

    fn vec_in(rng: &mut ChaCha8Rng, k: usize, lo: f64) -> Vec<f64> {
        (0..k).map(|_| rng.random_range(lo..1.0)).collect()
    }

    fn cite(tag: &str) -> Option<Citation> {
        Some(Citation { index: 0, facet: tag.into(), review_id: format!("r-{tag}"), sentence: format!("about {tag}") })
    }

    #[test]
    fn zero_head_has_zero_contributions() {
        let mut m = Model::initial(3, 3.0, Ablation::FULL, RatingRange::default());
        m.head.item_bias.insert("i".into(), 0.4);
        let c = contributions(&m, &[0.2, -0.1, 0.5], &[0.3, 0.3, 0.1]).unwrap();
        assert!(c.iter().all(|c| c.contrib == 0.0));
        assert_eq!(m.score_mapped(&[0.2, -0.1, 0.5], &[0.3, 0.3, 0.1], "i").unwrap().y_c, 0.4);
    }

    #[test]
    fn single_concept_hand_example() {
        let mut m = Model::initial(1, 3.0, Ablation::FULL, RatingRange::default());
        m.head.w_int = vec![1.0];
        m.head.w_u = vec![1.0];
        m.head.w_i = vec![1.0];
        let c = contributions(&m, &[0.5], &[2.0]).unwrap();
        assert_eq!(c[0].contrib, 3.5);
    }

    #[test]
    fn int_only_keeps_interaction_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(4, &mut rng, Ablation::INT_ONLY);
        let (a, b) = (vec_in(&mut rng, 4, -1.0), vec_in(&mut rng, 4, 0.0));
        for c in contributions(&m, &a, &b).unwrap() {
            assert_eq!(c.contrib, m.head.w_int[c.k] * a[c.k] * b[c.k]);
            assert_eq!(c.user_term, 0.0);
            assert_eq!(c.item_term, 0.0);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = Model::initial(3, 3.0, Ablation::FULL, RatingRange::default());
        assert!(contributions(&m, &[0.0; 2], &[0.0; 3]).is_err());
    }

    fn user_from(a_pos: Vec<f64>, a_neg: Vec<f64>) -> SignedUserVector {
        let k = a_pos.len();
        let pos = ConceptVector { provenance: (0..k).map(|c| if a_pos[c] > 0.0 { cite(&format!("p{c}")) } else { None }).collect(), values: a_pos };
        let neg = ConceptVector { provenance: (0..k).map(|c| if a_neg[c] > 0.0 { cite(&format!("n{c}")) } else { None }).collect(), values: a_neg };
        SignedUserVector::from_pools(pos, neg)
    }

    #[test]
    fn render_orders_truncates_and_cites() {
        let mut m = Model::initial(3, 3.5, Ablation::INT_ONLY, RatingRange::default());
        m.head.w_int = vec![1.0, -1.0, 0.5];
        let user = user_from(vec![0.9, 0.0, 0.6], vec![0.0, 0.8, 0.0]);
        let item = ConceptVector { values: vec![0.5, 0.5, 0.2], provenance: vec![cite("i0"), cite("i1"), cite("i2")] };
        let labels: Vec<String> = ["energy", "pacing", "vocals"].map(String::from).to_vec();
        let e = render(&m, &labels, "u", &user, "i", &item, 5).unwrap();
        // contribs: 0.45, +0.4 (−1 · −0.8 · 0.5), 0.06
        let order: Vec<usize> = e.top_positive.iter().map(|c| c.k).collect();
        assert_eq!(order, vec![0, 1, 2]);
        assert!(e.top_negative.is_empty());
        assert!(e.reconstruction_residual <= 1e-12);
        let second = &e.top_positive[1];
        assert_eq!(second.label.as_deref(), Some("pacing"));
        assert_eq!(second.source_concept, Some(1));
        assert_eq!(second.user_evidence.as_ref().unwrap().polarity, -1);
        assert_eq!(second.user_evidence.as_ref().unwrap().review_id, "r-n1");
        assert_eq!(second.item_evidence.as_ref().unwrap().review_id, "r-i1");

        let one = render(&m, &labels, "u", &user, "i", &item, 1).unwrap();
        assert_eq!(one.top_positive.len(), 1);
        assert_eq!(one.top_positive[0].label.as_deref(), Some("energy"));
        assert!((one.top_positive[0].contrib - 0.45).abs() < 1e-15);

        let table = to_table(&e);
        assert!(table.contains("energy (+0.45)"));
        assert!(table.contains("U: \"about p0\" [r-p0]"));
    }

    #[test]
    fn render_all_zero_keeps_zero_entries() {
        let m = Model::initial(2, 3.0, Ablation::FULL, RatingRange::default());
        let user = user_from(vec![0.2, 0.0], vec![0.0, 0.0]);
        let item = ConceptVector::zeros(2);
        let e = render(&m, &[], "u", &user, "i", &item, 10).unwrap();
        assert_eq!(e.top_positive.len(), 2);
        assert_eq!(e.top_negative.len(), 2);
        assert_eq!(e.reconstruction_residual, 0.0);
        assert_eq!(e.r_hat, 3.0);
        assert_eq!(to_table(&e).lines().count(), 3);
    }

    #[test]
    fn dominant_source_prefers_largest_product() {
        let mut m = Model::initial(2, 3.0, Ablation::FULL, RatingRange::default());
        m.transfer.set(0, 1, 2.0);
        assert_eq!(dominant_source(&m, &[0.5, 0.3], 0), Some(1));
        assert_eq!(dominant_source(&m, &[0.5, 0.3], 1), Some(1));
        assert_eq!(dominant_source(&m, &[0.0, 0.0], 0), None);
    }

    #[test]
    fn whatif_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(4, &mut rng, Ablation::FULL);
        let (a, b) = (vec_in(&mut rng, 4, -1.0), vec_in(&mut rng, 4, 0.0));
        let noop = whatif(&m, &a, &b, "i", Edit::User { k: 2, value: a[2] }).unwrap();
        assert_eq!(noop.delta, 0.0);

        let zero = whatif(&m, &a, &b, "i", Edit::User { k: 1, value: 0.0 }).unwrap();
        let c = &contributions(&m, &a, &b).unwrap()[1];
        assert!((zero.delta + c.int_term + c.user_term).abs() < 1e-15);

        assert_eq!(
            whatif(&m, &a, &b, "i", Edit::Item { k: 4, value: 0.0 }),
            Err(ExplainError::IndexOutOfRange { k: 4, big_k: 4 })
        );
        assert!(whatif(&m, &a, &b, "i", Edit::Item { k: 0, value: f64::NAN }).is_err());
    }

    proptest! {
        #[test]
        fn contributions_reconstruct_score(seed in any::<u64>(), k in 1usize..12, variant in 0usize..4) {
            let ablation = [Ablation::FULL, Ablation::INT_ONLY, Ablation::INT_USER, Ablation::INT_ITEM][variant];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(k, &mut rng, ablation);
            let (a, b) = (vec_in(&mut rng, k, -1.0), vec_in(&mut rng, k, 0.0));
            let y = m.score_mapped(&a, &b, "i").unwrap().y_c;
            let sum: f64 = contributions(&m, &a, &b).unwrap().iter().map(|c| c.contrib).sum();
            prop_assert!((y - (sum + m.head.bias("i"))).abs() <= 1e-9);
        }

        #[test]
        fn whatif_matches_rescoring(seed in any::<u64>(), k in 1usize..8, idx in 0usize..8, v in -1.0f64..1.0, user_side in any::<bool>()) {
            let idx = idx % k;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(k, &mut rng, Ablation::FULL);
            let (mut a, mut b) = (vec_in(&mut rng, k, -1.0), vec_in(&mut rng, k, 0.0));
            let edit = if user_side { Edit::User { k: idx, value: v } } else { Edit::Item { k: idx, value: v.abs() } };
            let w = whatif(&m, &a, &b, "i", edit).unwrap();
            match edit {
                Edit::User { k, value } => a[k] = value,
                Edit::Item { k, value } => b[k] = value,
            }
            let rescored = m.score_mapped(&a, &b, "i").unwrap().y_c;
            prop_assert!((w.new_y_c - rescored).abs() <= 1e-12);
        }
    }
}
