//! Faithfulness curves and rating-error evaluation.
//!
//! Deleting a concept subtracts its additive term from the score, which is
//! exact for the linear head. Curves are computed per pair from the
//! contribution vector and averaged over pairs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cards::RatingRange;
use crate::explain::{contributions, ExplainError};
use crate::model::{Ablation, Model, ModelError};
use crate::train::{fit, PairDataset, TrainConfig, TrainError};

/// Random deletions enumerate every subset up to this many.
pub const EXHAUSTIVE_LIMIT: u128 = 1000;
pub const DEFAULT_RANDOM_DRAWS: usize = 100;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("m_max = {m_max} exceeds K = {k}")]
    MTooLarge { m_max: usize, k: usize },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("prediction and rating counts differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    /// Delete the top-m positive contributions.
    Pos,
    /// Delete the top-m negative contributions.
    Neg,
    /// Delete the top-m by magnitude.
    Abs,
    /// Delete m concepts drawn uniformly; mean over draws.
    Random,
    /// Keep the top-m by magnitude; residual to the full score.
    Sufficiency,
    /// Share of total absolute contribution held by the top-m.
    Mass,
}

impl CurveKind {
    pub const DELETION: [CurveKind; 4] = [CurveKind::Pos, CurveKind::Neg, CurveKind::Abs, CurveKind::Random];
    pub const ALL: [CurveKind; 6] =
        [CurveKind::Pos, CurveKind::Neg, CurveKind::Abs, CurveKind::Random, CurveKind::Sufficiency, CurveKind::Mass];

    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Pos => "pos",
            CurveKind::Neg => "neg",
            CurveKind::Abs => "abs",
            CurveKind::Random => "random",
            CurveKind::Sufficiency => "sufficiency",
            CurveKind::Mass => "mass",
        }
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CurveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CurveKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown curve `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub kind: CurveKind,
    pub m: usize,
    pub value: f64,
}

fn check_m(m_max: usize, k: usize) -> Result<(), DiagError> {
    if m_max > k {
        return Err(DiagError::MTooLarge { m_max, k });
    }
    Ok(())
}

/// Indices sorted by `key` descending; equal keys keep index order.
fn ranked(contribs: &[f64], key: impl Fn(f64) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..contribs.len()).collect();
    idx.sort_by(|&a, &b| key(contribs[b]).total_cmp(&key(contribs[a])));
    idx
}

fn binomial(n: usize, m: usize) -> u128 {
    let m = m.min(n - m);
    let mut acc: u128 = 1;
    for j in 0..m {
        acc = acc * (n - j) as u128 / (j + 1) as u128;
        if acc > u64::MAX as u128 {
            return acc;
        }
    }
    acc
}

/// Visits every m-subset of `0..n` in lexicographic order.
fn for_each_subset(n: usize, m: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        f(&idx);
        let Some(pos) = (0..m).rev().find(|&p| idx[p] != p + n - m) else { return };
        idx[pos] += 1;
        for q in pos + 1..m {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

/// Mean `|Σ_{k∈S} contrib_k|` over random m-subsets S: every subset when
/// there are at most [`EXHAUSTIVE_LIMIT`], otherwise `draws` samples.
pub fn random_deletion(contribs: &[f64], m: usize, draws: usize, rng: &mut ChaCha8Rng) -> f64 {
    let k = contribs.len();
    if m == 0 {
        return 0.0;
    }
    let subset_sum = |s: &[usize]| s.iter().map(|&i| contribs[i]).sum::<f64>().abs();
    if binomial(k, m) <= EXHAUSTIVE_LIMIT {
        let (mut total, mut count) = (0.0, 0usize);
        for_each_subset(k, m, |s| {
            total += subset_sum(s);
            count += 1;
        });
        return total / count as f64;
    }
    let draws = draws.max(1);
    let total: f64 = (0..draws).map(|_| subset_sum(&sample(rng, k, m).into_vec())).sum();
    total / draws as f64
}

/// Deletion curve for m = 0..=m_max. Signed modes only remove
/// contributions of their sign, so fewer than m may be removed.
pub fn deletion_curve(
    contribs: &[f64],
    m_max: usize,
    kind: CurveKind,
    seed: u64,
    draws: usize,
) -> Result<Vec<CurvePoint>, DiagError> {
    check_m(m_max, contribs.len())?;
    let order: Vec<usize> = match kind {
        CurveKind::Pos => ranked(contribs, |c| c).into_iter().filter(|&i| contribs[i] > 0.0).collect(),
        CurveKind::Neg => ranked(contribs, |c| -c).into_iter().filter(|&i| contribs[i] < 0.0).collect(),
        CurveKind::Abs => ranked(contribs, f64::abs),
        CurveKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            return Ok((0..=m_max)
                .map(|m| CurvePoint { kind, m, value: random_deletion(contribs, m, draws, &mut rng) })
                .collect());
        }
        other => panic!("{other} is not a deletion curve"),
    };
    Ok((0..=m_max)
        .map(|m| {
            let removed: f64 = order.iter().take(m).map(|&i| contribs[i]).sum();
            CurvePoint { kind, m, value: removed.abs() }
        })
        .collect())
}

/// Keep-top-m residual `|Σ excluded contrib_k|`, ranking by magnitude.
/// At m = K nothing is excluded and the residual is exactly zero.
pub fn sufficiency_curve(contribs: &[f64], m_max: usize) -> Result<Vec<CurvePoint>, DiagError> {
    check_m(m_max, contribs.len())?;
    let order = ranked(contribs, f64::abs);
    Ok((0..=m_max)
        .map(|m| {
            let excluded: f64 = order[m..].iter().map(|&i| contribs[i]).sum();
            CurvePoint { kind: CurveKind::Sufficiency, m, value: excluded.abs() }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassCurve {
    pub points: Vec<CurvePoint>,
    /// Every contribution is zero; the curve is all zeros by convention.
    pub degenerate: bool,
}

/// Top-m share of total absolute contribution. The total is summed in the
/// same order as the prefixes, so the value at m = K is exactly one.
pub fn contribution_mass(contribs: &[f64], m_max: usize) -> Result<MassCurve, DiagError> {
    check_m(m_max, contribs.len())?;
    let order = ranked(contribs, f64::abs);
    let total: f64 = order.iter().map(|&i| contribs[i].abs()).sum();
    let degenerate = total == 0.0;
    let mut prefix = 0.0;
    let mut points = Vec::with_capacity(m_max + 1);
    for m in 0..=m_max {
        if m > 0 {
            prefix += contribs[order[m - 1]].abs();
        }
        let value = if degenerate { 0.0 } else { prefix / total };
        points.push(CurvePoint { kind: CurveKind::Mass, m, value });
    }
    Ok(MassCurve { points, degenerate })
}

/// All six curves for one pair.
pub fn pair_curves(contribs: &[f64], m_max: usize, seed: u64, draws: usize) -> Result<Vec<CurvePoint>, DiagError> {
    let mut out = Vec::new();
    for kind in CurveKind::DELETION {
        out.extend(deletion_curve(contribs, m_max, kind, seed, draws)?);
    }
    out.extend(sufficiency_curve(contribs, m_max)?);
    out.extend(contribution_mass(contribs, m_max)?.points);
    Ok(out)
}

/// Pointwise mean over pairs; all inputs must share one layout.
pub fn mean_curves(curves: &[Vec<CurvePoint>]) -> Vec<CurvePoint> {
    let Some(first) = curves.first() else { return Vec::new() };
    first
        .iter()
        .enumerate()
        .map(|(j, p)| CurvePoint {
            kind: p.kind,
            m: p.m,
            value: curves.iter().map(|c| c[j].value).sum::<f64>() / curves.len() as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub k: usize,
    pub m_max: usize,
    pub pairs: Vec<(String, Vec<CurvePoint>)>,
    pub mean: Vec<CurvePoint>,
}

/// Curves for the test pairs (all of them, or a seeded sample of
/// `sample` pairs), with the random control seeded per pair.
pub fn diagnose(
    model: &Model,
    data: &PairDataset,
    m_max: usize,
    seed: u64,
    draws: usize,
    sample_size: Option<usize>,
) -> Result<DiagnosticsReport, DiagError> {
    if data.is_empty() {
        return Err(DiagError::EmptyTestSet);
    }
    check_m(m_max, model.k())?;
    let mut chosen: Vec<usize> = (0..data.len()).collect();
    if let Some(n) = sample_size.filter(|&n| n < data.len()) {
        chosen.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        chosen.truncate(n);
        chosen.sort_unstable();
    }
    let mut pairs = Vec::with_capacity(chosen.len());
    for idx in chosen {
        let p = data.pairs[idx];
        let a_t = model.map_user(&data.a_s[p.user])?;
        let contribs: Vec<f64> = contributions(model, &a_t, &data.b[p.item])?.iter().map(|c| c.contrib).collect();
        let id = format!("{}:{}", data.user_ids[p.user], data.item_ids[p.item]);
        pairs.push((id, pair_curves(&contribs, m_max, seed.wrapping_add(idx as u64), draws)?));
    }
    let curves: Vec<Vec<CurvePoint>> = pairs.iter().map(|(_, c)| c.clone()).collect();
    Ok(DiagnosticsReport { k: model.k(), m_max, mean: mean_curves(&curves), pairs })
}

/// Writes `pair_id,mode,m,value`, per-pair rows first, then `mean` rows.
pub fn write_curves(path: &Path, report: &DiagnosticsReport) -> Result<(), DiagError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pair_id", "mode", "m", "value"])?;
    let rows = report.pairs.iter().map(|(id, c)| (id.as_str(), c)).chain([("mean", &report.mean)]);
    for (id, curve) in rows {
        for p in curve {
            w.write_record([id, p.kind.name(), &p.m.to_string(), &p.value.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub n_pairs: usize,
}

pub fn error_metrics(predictions: &[f64], ratings: &[f64]) -> Result<ErrorMetrics, DiagError> {
    if predictions.len() != ratings.len() {
        return Err(DiagError::LengthMismatch(predictions.len(), ratings.len()));
    }
    if ratings.is_empty() {
        return Err(DiagError::EmptyTestSet);
    }
    let n = ratings.len() as f64;
    let (abs, sq) = predictions.iter().zip(ratings).fold((0.0, 0.0), |(a, s), (p, r)| {
        let e = p - r;
        (a + e.abs(), s + e * e)
    });
    Ok(ErrorMetrics { mae: abs / n, rmse: (sq / n).sqrt(), n_pairs: ratings.len() })
}

/// MAE and RMSE of clamped predictions on a pair set.
pub fn score_dataset(model: &Model, data: &PairDataset) -> Result<ErrorMetrics, DiagError> {
    let mut preds = Vec::with_capacity(data.len());
    for p in &data.pairs {
        preds.push(model.predict(&data.a_s[p.user], &data.b[p.item], &data.item_ids[p.item])?.rating);
    }
    let ratings: Vec<f64> = data.pairs.iter().map(|p| p.rating).collect();
    error_metrics(&preds, &ratings)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n_pairs: usize,
    pub runs: Vec<RunMetrics>,
    pub mae: f64,
    pub rmse: f64,
}

/// Retrains once per seed and scores the held-out pairs; the reported
/// figures are means over runs.
pub fn evaluate(
    train: &PairDataset,
    test: &PairDataset,
    cfg: &TrainConfig,
    ablation: Ablation,
    range: RatingRange,
    seeds: &[u64],
) -> Result<EvalResult, DiagError> {
    if test.is_empty() {
        return Err(DiagError::EmptyTestSet);
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let model = fit(train, &TrainConfig { seed, ..*cfg }, ablation, range)?.model;
        let m = score_dataset(&model, test)?;
        runs.push(RunMetrics { seed, mae: m.mae, rmse: m.rmse });
    }
    let n = runs.len().max(1) as f64;
    Ok(EvalResult {
        n_pairs: test.len(),
        mae: runs.iter().map(|r| r.mae).sum::<f64>() / n,
        rmse: runs.iter().map(|r| r.rmse).sum::<f64>() / n,
        runs,
    })
}

/// Writes `run_seed,mae,rmse`, one row per run and a final `mean` row.
pub fn write_metrics(path: &Path, result: &EvalResult) -> Result<(), DiagError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run_seed", "mae", "rmse"])?;
    for r in &result.runs {
        w.write_record([r.seed.to_string(), r.mae.to_string(), r.rmse.to_string()])?;
    }
    w.write_record(["mean".to_string(), result.mae.to_string(), result.rmse.to_string()])?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn values(points: &[CurvePoint]) -> Vec<f64> {
        points.iter().map(|p| p.value).collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    #[test]
    fn m_zero_is_zero_everywhere() {
        let c = [0.4, -0.2, 0.1];
        for kind in CurveKind::DELETION {
            assert_eq!(deletion_curve(&c, 0, kind, 0, 10).unwrap()[0].value, 0.0);
        }
        assert!(matches!(deletion_curve(&c, 4, CurveKind::Pos, 0, 10), Err(DiagError::MTooLarge { .. })));
    }

    #[test]
    fn top_one_positive() {
        assert_eq!(deletion_curve(&[0.1, 0.7, -0.9], 1, CurveKind::Pos, 0, 1).unwrap()[1].value, 0.7);
        assert_eq!(deletion_curve(&[-0.1, -0.7], 1, CurveKind::Pos, 0, 1).unwrap()[1].value, 0.0);
        assert_eq!(deletion_curve(&[0.1, 0.7, -0.9], 1, CurveKind::Neg, 0, 1).unwrap()[1].value, 0.9);
        assert_eq!(deletion_curve(&[0.1, 0.7, -0.9], 1, CurveKind::Abs, 0, 1).unwrap()[1].value, 0.9);
    }

    #[test]
    fn four_concept_example() {
        let c = [0.5, 0.3, -0.2, 0.1];
        let pos = deletion_curve(&c, 2, CurveKind::Pos, 0, 100).unwrap();
        assert!(close(pos[2].value, 0.8));
        // |pair sums| over the six pairs: .8 .3 .6 .1 .4 .1
        let random = deletion_curve(&c, 2, CurveKind::Random, 0, 100).unwrap();
        assert!(close(random[2].value, 2.3 / 6.0));
        assert!(pos[2].value >= random[2].value);
    }

    #[test]
    fn sampled_random_deletion_is_seeded() {
        let c: Vec<f64> = (0..20).map(|i| (i as f64 - 9.5) / 10.0).collect();
        assert!(binomial(20, 5) > EXHAUSTIVE_LIMIT);
        let a = deletion_curve(&c, 5, CurveKind::Random, 3, 50).unwrap();
        let b = deletion_curve(&c, 5, CurveKind::Random, 3, 50).unwrap();
        assert_eq!(a, b);
        assert!(a[5].value > 0.0);
    }

    #[test]
    fn subsets_are_enumerated() {
        let mut seen = Vec::new();
        for_each_subset(4, 2, |s| seen.push(s.to_vec()));
        assert_eq!(seen, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(binomial(8, 4), 70);
        assert_eq!(binomial(5, 5), 1);
    }

    #[test]
    fn sufficiency_examples() {
        assert_eq!(sufficiency_curve(&[0.3, -0.1, 0.25], 3).unwrap()[3].value, 0.0);
        assert_eq!(sufficiency_curve(&[0.0, 0.6, 0.0], 1).unwrap()[1].value, 0.0);
        assert!(close(sufficiency_curve(&[0.5, -0.5, 0.1], 2).unwrap()[2].value, 0.1));
    }

    #[test]
    fn mass_examples() {
        let uniform = contribution_mass(&[0.2, -0.2, 0.2, -0.2], 4).unwrap();
        for (v, want) in values(&uniform.points).into_iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!(close(v, want));
        }
        let dominant = contribution_mass(&[0.05, 0.9, 0.05], 3).unwrap();
        assert!(close(dominant.points[1].value, 0.9));
        assert_eq!(dominant.points[3].value, 1.0);
        let zero = contribution_mass(&[0.0, 0.0], 2).unwrap();
        assert!(zero.degenerate);
        assert_eq!(values(&zero.points), vec![0.0; 3]);
    }

    #[test]
    fn metrics_examples() {
        let perfect = error_metrics(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert_eq!((perfect.mae, perfect.rmse), (0.0, 0.0));
        let constant = error_metrics(&[3.5, 3.5], &[4.5, 2.5]).unwrap();
        assert_eq!((constant.mae, constant.rmse), (1.0, 1.0));
        let m = error_metrics(&[3.0, 5.0], &[3.0, 3.0]).unwrap();
        assert_eq!(m.mae, 1.0);
        assert!(close(m.rmse, 2f64.sqrt()));
        assert!(matches!(error_metrics(&[], &[]), Err(DiagError::EmptyTestSet)));
    }

    #[test]
    fn curve_kind_names_roundtrip() {
        for k in CurveKind::ALL {
            assert_eq!(k.name().parse::<CurveKind>().unwrap(), k);
        }
    }

    fn brute_force_max(c: &[f64], m: usize) -> f64 {
        let mut best = 0.0f64;
        for size in 1..=m {
            for_each_subset(c.len(), size, |s| best = best.max(s.iter().map(|&i| c[i]).sum()));
        }
        best
    }

    proptest! {
        #[test]
        fn pos_deletion_is_best_subset(c in prop::collection::vec(-1.0f64..1.0, 1..=8), m in 0usize..=8) {
            let m = m.min(c.len());
            let pos = deletion_curve(&c, m, CurveKind::Pos, 0, 1).unwrap();
            prop_assert!((pos[m].value - brute_force_max(&c, m)).abs() <= 1e-12);
        }

        #[test]
        fn curve_endpoints(c in prop::collection::vec(-1.0f64..1.0, 1..=16)) {
            let k = c.len();
            prop_assert_eq!(sufficiency_curve(&c, k).unwrap()[k].value, 0.0);
            let mass = contribution_mass(&c, k).unwrap();
            prop_assert_eq!(mass.points[k].value, 1.0);
            prop_assert!(mass.points.windows(2).all(|w| w[0].value <= w[1].value));
        }

        #[test]
        fn same_sign_abs_deletion_beats_random(c in prop::collection::vec(0.0f64..1.0, 1..=10), m in 1usize..=10, neg in any::<bool>()) {
            let c: Vec<f64> = c.into_iter().map(|v| if neg { -v } else { v }).collect();
            let m = m.min(c.len());
            let abs = deletion_curve(&c, m, CurveKind::Abs, 0, 1).unwrap()[m].value;
            let random = deletion_curve(&c, m, CurveKind::Random, 0, 1).unwrap()[m].value;
            prop_assert!(abs >= random - 1e-12);
        }

        #[test]
        fn rmse_dominates_mae(p in prop::collection::vec(1.0f64..5.0, 1..50), seed in any::<u64>()) {
            let mut r = p.clone();
            r.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let m = error_metrics(&p, &r).unwrap();
            prop_assert!(m.rmse >= m.mae - 1e-12 && m.mae >= 0.0);
        }
    }
}
