//! Concept bank induction: spherical k-means over facet-phrase embeddings,
//! each prototype labeled by its closest in-cluster phrase.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{dot, UnitVector};

pub const DEFAULT_K: usize = 128;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("K = {0} is below the minimum of 2")]
    KTooSmall(usize),
    #[error("K = {k} exceeds the {distinct} distinct embeddings available")]
    TooFewPoints { k: usize, distinct: usize },
    #[error("phrase `{phrase}` has dimension {found}, expected {expected}")]
    DimensionMismatch { phrase: String, expected: usize, found: usize },
    #[error("bank file: {0}")]
    Format(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { k: DEFAULT_K, seed: 0, max_iters: 100, tol: 1e-6 }
    }
}

/// K unit-norm prototypes with human-readable labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBank {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    pub seed: u64,
    pub labels: Vec<String>,
    pub prototypes: Vec<Vec<f64>>,
    pub inertia: f64,
}

impl ConceptBank {
    pub fn prototype(&self, k: usize) -> &[f64] {
        &self.prototypes[k]
    }

    /// SHA-256 of the serialized bank; keys activation caches and checkpoints.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("bank serializes")))
    }

    pub fn save(&self, path: &Path) -> Result<(), BankError> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("bank serializes"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BankError> {
        let bank: ConceptBank = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| BankError::Format(e.to_string()))?;
        if bank.prototypes.len() != bank.k || bank.labels.len() != bank.k {
            return Err(BankError::Format(format!(
                "K = {} but {} prototypes and {} labels",
                bank.k,
                bank.prototypes.len(),
                bank.labels.len()
            )));
        }
        if let Some(row) = bank.prototypes.iter().find(|p| p.len() != bank.dim) {
            return Err(BankError::Format(format!("prototype of dimension {} != d = {}", row.len(), bank.dim)));
        }
        Ok(bank)
    }
}

/// Clustering output before labeling.
#[derive(Debug, Clone)]
pub struct BankBuild {
    pub bank: ConceptBank,
    /// Deduplicated phrases in clustering order (lexicographic).
    pub phrases: Vec<String>,
    pub assignments: Vec<usize>,
    /// Objective after each iteration.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub reseeded: usize,
}

/// Lexicographically sorted, deduplicated `(phrase, embedding)` pairs; the
/// first embedding seen for a phrase wins.
pub fn dedup_phrases(phrases: &[(String, UnitVector)]) -> Vec<(String, UnitVector)> {
    let mut map: BTreeMap<&str, &UnitVector> = BTreeMap::new();
    for (p, v) in phrases {
        map.entry(p.as_str()).or_insert(v);
    }
    map.into_iter().map(|(p, v)| (p.to_string(), v.clone())).collect()
}

fn argmax_cos(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let cos = dot(x, c);
        if cos > best.1 {
            best = (k, cos);
        }
    }
    best
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    UnitVector::normalize(v.to_vec()).map(UnitVector::into_inner)
}

/// Spherical k-means with k-means++ seeding. Labels are left empty; see
/// [`label_bank`].
pub fn build_bank(phrases: &[(String, UnitVector)], params: KMeansParams) -> Result<BankBuild, BankError> {
    let k = params.k;
    if k < 2 {
        return Err(BankError::KTooSmall(k));
    }
    let points = dedup_phrases(phrases);
    let distinct = points
        .iter()
        .map(|(_, v)| v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len();
    if k > distinct {
        return Err(BankError::TooFewPoints { k, distinct });
    }
    let dim = points[0].1.dim();
    if let Some((p, v)) = points.iter().find(|(_, v)| v.dim() != dim) {
        return Err(BankError::DimensionMismatch { phrase: p.clone(), expected: dim, found: v.dim() });
    }
    let xs: Vec<&[f64]> = points.iter().map(|(_, v)| v.as_slice()).collect();
    let n = xs.len();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_plus_plus(&xs, k, &mut rng);

    let mut assign = vec![usize::MAX; n];
    let mut trace: Vec<f64> = Vec::new();
    let mut reseeded = 0;
    let mut iterations = 0;
    for _ in 0..params.max_iters.max(1) {
        iterations += 1;
        let mut changes = 0;
        let mut cos_to_own = vec![0.0; n];
        for (i, x) in xs.iter().enumerate() {
            let (best, cos) = argmax_cos(x, &centroids);
            if assign[i] != best {
                changes += 1;
                assign[i] = best;
            }
            cos_to_own[i] = cos;
        }

        let mut counts = vec![0usize; k];
        assign.iter().for_each(|&a| counts[a] += 1);
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Farthest point (lowest cosine to its centroid) from a cluster
            // that can spare one.
            let donor = (0..n)
                .filter(|&i| counts[assign[i]] > 1)
                .min_by(|&a, &b| cos_to_own[a].total_cmp(&cos_to_own[b]).then(a.cmp(&b)));
            if let Some(i) = donor {
                counts[assign[i]] -= 1;
                counts[c] = 1;
                assign[i] = c;
                cos_to_own[i] = 1.0;
                centroids[c] = xs[i].to_vec();
                reseeded += 1;
                changes += 1;
            }
        }

        let mut sums = vec![vec![0.0; dim]; k];
        for (i, x) in xs.iter().enumerate() {
            sums[assign[i]].iter_mut().zip(x.iter()).for_each(|(s, v)| *s += v);
        }
        for (c, sum) in sums.iter().enumerate() {
            // A zero mean leaves every centroid equally good; keep the old one.
            if let Some(unit) = normalized(sum) {
                centroids[c] = unit;
            }
        }

        let inertia: f64 = xs
            .iter()
            .enumerate()
            .map(|(i, x)| (1.0 - dot(x, &centroids[assign[i]])).max(0.0))
            .sum();
        let improvement = trace.last().map(|prev| prev - inertia);
        trace.push(inertia);
        if changes == 0 || improvement.is_some_and(|d| d < params.tol) {
            break;
        }
    }

    let inertia = *trace.last().expect("at least one iteration");
    Ok(BankBuild {
        bank: ConceptBank {
            k,
            dim,
            seed: params.seed,
            labels: vec![String::new(); k],
            prototypes: centroids,
            inertia,
        },
        phrases: points.into_iter().map(|(p, _)| p).collect(),
        assignments: assign,
        inertia_trace: trace,
        iterations,
        reseeded,
    })
}

fn kmeans_plus_plus(xs: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = xs.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(xs[rng.random_range(0..n)].to_vec());
    // Squared chord distance between unit vectors: 2 - 2 cos.
    let mut d2: Vec<f64> = xs.iter().map(|x| (2.0 - 2.0 * dot(x, &centroids[0])).max(0.0)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave the target past the last positive weight.
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive weight"))
        } else {
            rng.random_range(0..n)
        };
        let c = xs[pick].to_vec();
        for (i, x) in xs.iter().enumerate() {
            d2[i] = d2[i].min((2.0 - 2.0 * dot(x, &c)).max(0.0));
        }
        centroids.push(c);
    }
    centroids
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelReport {
    /// Concepts with no member phrase; labeled by the nearest phrase overall.
    pub empty_clusters: Vec<usize>,
}

/// Labels each concept with the in-cluster phrase of highest cosine to its
/// prototype, ties going to the lexicographically smaller phrase.
pub fn label_bank(
    mut bank: ConceptBank,
    phrases: &[(String, UnitVector)],
) -> Result<(ConceptBank, LabelReport), BankError> {
    let points = dedup_phrases(phrases);
    if let Some((p, v)) = points.iter().find(|(_, v)| v.dim() != bank.dim) {
        return Err(BankError::DimensionMismatch { phrase: p.clone(), expected: bank.dim, found: v.dim() });
    }
    let mut best: Vec<Option<(usize, f64)>> = vec![None; bank.k];
    for (i, (_, v)) in points.iter().enumerate() {
        let (c, cos) = argmax_cos(v.as_slice(), &bank.prototypes);
        // Points are sorted, so strict > keeps the smaller phrase on ties.
        if best[c].is_none_or(|(_, b)| cos > b) {
            best[c] = Some((i, cos));
        }
    }
    let mut report = LabelReport::default();
    for (c, slot) in best.iter().enumerate() {
        let idx = match slot {
            Some((i, _)) => *i,
            None => {
                report.empty_clusters.push(c);
                let mut global = (0, f64::NEG_INFINITY);
                for (i, (_, v)) in points.iter().enumerate() {
                    let cos = v.dot(&bank.prototypes[c]);
                    if cos > global.1 {
                        global = (i, cos);
                    }
                }
                global.0
            }
        };
        bank.labels[c] = points[idx].0.clone();
    }
    Ok((bank, report))
}

/// Clusters and labels in one step.
pub fn induce_bank(phrases: &[(String, UnitVector)], params: KMeansParams) -> Result<ConceptBank, BankError> {
    let build = build_bank(phrases, params)?;
    Ok(label_bank(build.bank, phrases)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::hash_encode;

    fn unit(v: &[f64]) -> UnitVector {
        UnitVector::normalize(v.to_vec()).unwrap()
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<(String, UnitVector)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
                (format!("p{i:03}"), unit(&v))
            })
            .collect()
    }

    #[test]
    fn k_equals_n_gives_one_point_per_cluster() {
        let pts = random_points(6, 5, 1);
        let build = build_bank(&pts, KMeansParams { k: 6, seed: 3, ..Default::default() }).unwrap();
        assert!(build.bank.inertia.abs() < 1e-12);
        for (_, v) in &pts {
            let hit = build.bank.prototypes.iter().any(|p| {
                p.iter().zip(v.as_slice()).all(|(a, b)| (a - b).abs() < 1e-12)
            });
            assert!(hit);
        }
    }

    // Brute force over every 2-partition of the four points confirms that
    // the grouping {a1, a2} | {b1, b2} is optimal, and k-means finds it.
    #[test]
    fn antipodal_groups() {
        let a = unit(&[1.0, 2.0, 0.5]);
        let b = unit(&[-1.0, -2.0, -0.5]);
        let pts = vec![
            ("a1".to_string(), a.clone()),
            ("a2".to_string(), a.clone()),
            ("b1".to_string(), b.clone()),
            ("b2".to_string(), b.clone()),
        ];
        let xs: Vec<&[f64]> = pts.iter().map(|(_, v)| v.as_slice()).collect();
        let objective = |mask: u32| -> f64 {
            let mut total = 0.0;
            for side in [true, false] {
                let members: Vec<&[f64]> =
                    (0..4).filter(|i| ((mask >> i) & 1 == 1) == side).map(|i| xs[i]).collect();
                if members.is_empty() {
                    return f64::INFINITY;
                }
                let mut s = vec![0.0; 3];
                members.iter().for_each(|m| s.iter_mut().zip(m.iter()).for_each(|(a, b)| *a += b));
                let c = match normalized(&s) {
                    Some(c) => c,
                    None => return f64::INFINITY,
                };
                total += members.iter().map(|m| 1.0 - dot(m, &c)).sum::<f64>();
            }
            total
        };
        let (best_mask, best) = (1u32..15)
            .map(|m| (m, objective(m)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        assert!(best_mask == 0b0011 || best_mask == 0b1100);

        let build = build_bank(&pts, KMeansParams { k: 2, seed: 11, ..Default::default() }).unwrap();
        assert!((build.bank.inertia - best).abs() < 1e-12);
        for target in [&a, &b] {
            assert!(build
                .bank
                .prototypes
                .iter()
                .any(|p| p.iter().zip(target.as_slice()).all(|(x, y)| (x - y).abs() < 1e-12)));
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let pts = random_points(40, 8, 2);
        let params = KMeansParams { k: 5, seed: 9, ..Default::default() };
        let a = induce_bank(&pts, params).unwrap();
        let b = induce_bank(&pts, params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn inertia_non_increasing_and_prototypes_unit() {
        for seed in 0..10 {
            let pts = random_points(60, 6, seed);
            let build = build_bank(&pts, KMeansParams { k: 7, seed, max_iters: 100, tol: 0.0 }).unwrap();
            for w in build.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", build.inertia_trace);
            }
            for p in &build.bank.prototypes {
                assert!((dot(p, p).sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bound_errors() {
        let pts = random_points(3, 4, 0);
        assert!(matches!(
            build_bank(&pts, KMeansParams { k: 1, ..Default::default() }),
            Err(BankError::KTooSmall(1))
        ));
        assert!(matches!(
            build_bank(&pts, KMeansParams { k: 4, ..Default::default() }),
            Err(BankError::TooFewPoints { k: 4, distinct: 3 })
        ));
    }

    #[test]
    fn duplicates_are_dropped_before_clustering() {
        let mut pts = random_points(3, 4, 0);
        pts.push(pts[0].clone());
        let build = build_bank(&pts, KMeansParams { k: 3, ..Default::default() }).unwrap();
        assert_eq!(build.phrases.len(), 3);
    }

    #[test]
    fn singleton_cluster_label() {
        let pts = random_points(4, 6, 5);
        let bank = induce_bank(&pts, KMeansParams { k: 4, ..Default::default() }).unwrap();
        let mut labels = bank.labels.clone();
        labels.sort();
        assert_eq!(labels, vec!["p000", "p001", "p002", "p003"]);
    }

    #[test]
    fn label_is_closest_phrase() {
        let phrases: Vec<(String, UnitVector)> = ["live energy", "vocal clarity"]
            .iter()
            .map(|p| (p.to_string(), hash_encode(p, 256, 0).unwrap()))
            .collect();
        let mut sum = vec![0.0; 256];
        for (_, v) in &phrases {
            sum.iter_mut().zip(v.as_slice()).for_each(|(s, x)| *s += x);
        }
        // Tilt the centroid toward "vocal clarity".
        sum.iter_mut().zip(phrases[1].1.as_slice()).for_each(|(s, x)| *s += 0.1 * x);
        let proto = normalized(&sum).unwrap();
        let expected = if phrases[0].1.dot(&proto) > phrases[1].1.dot(&proto) { "live energy" } else { "vocal clarity" };
        let bank = ConceptBank {
            k: 2,
            dim: 256,
            seed: 0,
            labels: vec![String::new(); 2],
            prototypes: vec![proto.clone(), proto.iter().map(|x| -x).collect()],
            inertia: 0.0,
        };
        let (bank, report) = label_bank(bank, &phrases).unwrap();
        assert_eq!(bank.labels[0], expected);
        assert_eq!(bank.labels[0], "vocal clarity");
        assert_eq!(report.empty_clusters, vec![1]);
    }

    #[test]
    fn label_ties_go_to_smaller_phrase() {
        let v = unit(&[1.0, 0.0, 0.0]);
        let phrases = vec![("zeta".to_string(), v.clone()), ("alpha".to_string(), v.clone())];
        let bank = ConceptBank {
            k: 2,
            dim: 3,
            seed: 0,
            labels: vec![String::new(); 2],
            prototypes: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            inertia: 0.0,
        };
        let (bank, _) = label_bank(bank, &phrases).unwrap();
        assert_eq!(bank.labels[0], "alpha");
    }

    #[test]
    fn bank_file_roundtrip() {
        let pts = random_points(10, 4, 7);
        let bank = induce_bank(&pts, KMeansParams { k: 3, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        bank.save(&path).unwrap();
        assert_eq!(ConceptBank::load(&path).unwrap(), bank);
    }
}
