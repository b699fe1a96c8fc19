//! Fitting the transfer map, head weights and item biases.
//!
//! The objective is the mean squared error on centered ratings plus
//! `λ_M ‖M − I‖²_F + λ_b Σ_i b_i²`, minimized with seeded mini-batch AdamW.
//! Gradients are closed-form; the model is linear in everything except the
//! `M`/`w_int` product.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activations::ActivationSet;
use crate::cards::{RatingRange, RatingRecord};
use crate::model::{Ablation, Head, Model, ModelError, TransferMap};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no rating pairs")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_m: f64,
    pub lambda_b: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled AdamW decay; zero because the objective already carries
    /// explicit regularization.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_m: 1e-2,
            lambda_b: 1e-4,
            learning_rate: 1e-2,
            batch_size: 256,
            epochs: 30,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if !(self.lambda_m >= 0.0 && self.lambda_m.is_finite()) {
            return bad("lambda_m must be >= 0");
        }
        if !(self.lambda_b >= 0.0 && self.lambda_b.is_finite()) {
            return bad("lambda_b must be >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.weight_decay < 0.0 {
            return bad("epsilon must be > 0 and weight_decay >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// Rating pairs with the activations they need, indexed densely.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub k: usize,
    pub user_ids: Vec<String>,
    pub a_s: Vec<Vec<f64>>,
    pub item_ids: Vec<String>,
    pub b: Vec<Vec<f64>>,
    pub pairs: Vec<Pair>,
}

pub type TrainDataset = PairDataset;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pairs: usize,
    pub skipped_other_users: usize,
    pub skipped_no_user_card: usize,
    pub skipped_no_item_card: usize,
}

impl PairDataset {
    /// Keeps ratings whose user is in `users`, has a source activation, and
    /// whose item has an item activation. Users and items are indexed in
    /// sorted id order; pairs keep file order.
    pub fn from_ratings(
        ratings: &[RatingRecord],
        users: &BTreeSet<String>,
        activations: &ActivationSet,
    ) -> (Self, DatasetStats) {
        let mut stats = DatasetStats::default();
        let mut kept = Vec::new();
        for r in ratings {
            if !users.contains(&r.user_id) {
                stats.skipped_other_users += 1;
            } else if !activations.users.contains_key(&r.user_id) {
                stats.skipped_no_user_card += 1;
            } else if !activations.items.contains_key(&r.item_id) {
                stats.skipped_no_item_card += 1;
            } else {
                kept.push(r);
            }
        }
        let user_index: BTreeMap<&str, usize> = kept
            .iter()
            .map(|r| r.user_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, u)| (u, i))
            .collect();
        let item_index: BTreeMap<&str, usize> = kept
            .iter()
            .map(|r| r.item_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, u)| (u, i))
            .collect();
        let pairs = kept
            .iter()
            .map(|r| Pair { user: user_index[r.user_id.as_str()], item: item_index[r.item_id.as_str()], rating: r.rating })
            .collect::<Vec<_>>();
        stats.pairs = pairs.len();
        let data = Self {
            k: activations.key.k,
            user_ids: user_index.keys().map(|s| s.to_string()).collect(),
            a_s: user_index.keys().map(|u| activations.users[*u].a_s.clone()).collect(),
            item_ids: item_index.keys().map(|s| s.to_string()).collect(),
            b: item_index.keys().map(|i| activations.items[*i].values.clone()).collect(),
            pairs,
        };
        (data, stats)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `μ_T`, the mean training rating.
pub fn compute_mean(pairs: &[Pair]) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(pairs.iter().map(|p| p.rating).sum::<f64>() / pairs.len() as f64)
}

/// Flat parameter vector `[M (K²) | w_int | w_u | w_i | b (items)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub k: usize,
    pub n_items: usize,
    pub values: Vec<f64>,
}

impl Parameters {
    pub fn initial(k: usize, n_items: usize) -> Self {
        let mut values = vec![0.0; k * k + 3 * k + n_items];
        (0..k).for_each(|i| values[i * k + i] = 1.0);
        Self { k, n_items, values }
    }

    fn off_w_int(&self) -> usize {
        self.k * self.k
    }
    fn off_w_u(&self) -> usize {
        self.off_w_int() + self.k
    }
    fn off_w_i(&self) -> usize {
        self.off_w_u() + self.k
    }
    fn off_bias(&self) -> usize {
        self.off_w_i() + self.k
    }

    pub fn m(&self) -> &[f64] {
        &self.values[..self.off_w_int()]
    }
    pub fn w_int(&self) -> &[f64] {
        &self.values[self.off_w_int()..self.off_w_u()]
    }
    pub fn w_u(&self) -> &[f64] {
        &self.values[self.off_w_u()..self.off_w_i()]
    }
    pub fn w_i(&self) -> &[f64] {
        &self.values[self.off_w_i()..self.off_bias()]
    }
    pub fn bias(&self) -> &[f64] {
        &self.values[self.off_bias()..]
    }

    /// Reads a model's parameters, taking item biases in `item_ids` order.
    pub fn from_model(model: &Model, item_ids: &[String]) -> Self {
        let k = model.k();
        let mut values = Vec::with_capacity(k * k + 3 * k + item_ids.len());
        values.extend_from_slice(model.transfer.as_slice());
        values.extend_from_slice(&model.head.w_int);
        values.extend_from_slice(&model.head.w_u);
        values.extend_from_slice(&model.head.w_i);
        values.extend(item_ids.iter().map(|i| model.head.bias(i)));
        Self { k, n_items: item_ids.len(), values }
    }

    pub fn to_model(&self, item_ids: &[String], mu_t: f64, ablation: Ablation, range: RatingRange) -> Model {
        let mut model = Model::initial(self.k, mu_t, ablation, range);
        model.transfer = TransferMap::from_row_major(self.k, self.m().to_vec()).expect("K² entries");
        model.head = Head {
            w_int: self.w_int().to_vec(),
            w_u: self.w_u().to_vec(),
            w_i: self.w_i().to_vec(),
            item_bias: item_ids.iter().cloned().zip(self.bias().iter().copied()).collect(),
            ablation,
            mu_t,
            rating_range: range,
        };
        model
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub reg: f64,
}

/// Regularization `λ_M ‖M − I‖²_F + λ_b Σ b_i²` over every item.
fn reg_term(params: &Parameters, cfg: &TrainConfig) -> f64 {
    let k = params.k;
    let dev: f64 = params
        .m()
        .iter()
        .enumerate()
        .map(|(idx, v)| {
            let d = if idx / k == idx % k { v - 1.0 } else { *v };
            d * d
        })
        .sum();
    let bias: f64 = params.bias().iter().map(|b| b * b).sum();
    cfg.lambda_m * dev + cfg.lambda_b * bias
}

/// Objective on the pairs indexed by `batch`, with its gradient when
/// `grad` is given (overwritten, same layout as the parameters). An empty
/// batch contributes no data term.
pub fn loss_and_grad(
    params: &Parameters,
    data: &PairDataset,
    batch: &[usize],
    cfg: &TrainConfig,
    mu_t: f64,
    ablation: Ablation,
    mut grad: Option<&mut [f64]>,
) -> LossParts {
    let k = params.k;
    let (su, si) = (ablation.user_scale(), ablation.item_scale());
    let (m, w_int, w_u, w_i, bias) = (params.m(), params.w_int(), params.w_u(), params.w_i(), params.bias());
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }

    let mut a_t = vec![0.0; k];
    let mut sq = 0.0;
    let scale = if batch.is_empty() { 0.0 } else { 2.0 / batch.len() as f64 };
    for &idx in batch {
        let p = data.pairs[idx];
        let a_s = &data.a_s[p.user];
        let b = &data.b[p.item];
        for (r, out) in a_t.iter_mut().enumerate() {
            *out = m[r * k..(r + 1) * k].iter().zip(a_s).map(|(x, y)| x * y).sum();
        }
        let mut y = bias[p.item];
        for c in 0..k {
            y += w_int[c] * a_t[c] * b[c] + su * w_u[c] * a_t[c] + si * w_i[c] * b[c];
        }
        let err = y - (p.rating - mu_t);
        sq += err * err;

        if let Some(g) = grad.as_deref_mut() {
            let d = scale * err;
            let (off_int, off_u, off_i, off_b) = (params.off_w_int(), params.off_w_u(), params.off_w_i(), params.off_bias());
            for c in 0..k {
                g[off_int + c] += d * a_t[c] * b[c];
                g[off_u + c] += d * su * a_t[c];
                g[off_i + c] += d * si * b[c];
                let g_at = d * (w_int[c] * b[c] + su * w_u[c]);
                if g_at != 0.0 {
                    for (l, a) in a_s.iter().enumerate() {
                        g[c * k + l] += g_at * a;
                    }
                }
            }
            g[off_b + p.item] += d;
        }
    }

    if let Some(g) = grad {
        for (idx, v) in m.iter().enumerate() {
            let dev = if idx / k == idx % k { v - 1.0 } else { *v };
            g[idx] += 2.0 * cfg.lambda_m * dev;
        }
        let off_b = params.off_bias();
        for (i, b) in bias.iter().enumerate() {
            g[off_b + i] += 2.0 * cfg.lambda_b * b;
        }
    }

    let mse = if batch.is_empty() { 0.0 } else { sq / batch.len() as f64 };
    let reg = reg_term(params, cfg);
    LossParts { total: mse + reg, mse, reg }
}

/// AdamW over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total_loss: f64,
    pub mse: f64,
    pub reg: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: Model,
    /// Full-dataset objective after each epoch.
    pub trace: Vec<EpochLoss>,
}

/// Trains from `M = I`, `w = 0`, `b = 0` for `cfg.epochs` passes over
/// seeded shuffles of the data.
pub fn fit(
    data: &PairDataset,
    cfg: &TrainConfig,
    ablation: Ablation,
    range: RatingRange,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    let mu_t = compute_mean(&data.pairs)?;
    let mut params = Parameters::initial(data.k, data.item_ids.len());
    let mut opt = AdamW::new(params.values.len(), cfg);
    let mut grad = vec![0.0; params.values.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let all: Vec<usize> = order.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let loss = loss_and_grad(&params, data, batch, cfg, mu_t, ablation, Some(&mut grad));
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { epoch });
            }
            opt.step(&mut params.values, &grad);
        }
        let loss = loss_and_grad(&params, data, &all, cfg, mu_t, ablation, None);
        if !loss.total.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        trace.push(EpochLoss { epoch, total_loss: loss.total, mse: loss.mse, reg: loss.reg });
    }

    let mut model = params.to_model(&data.item_ids, mu_t, ablation, range);
    model.seed = cfg.seed;
    Ok(FitResult { model, trace })
}

/// Writes the per-epoch trace as `epoch,total_loss,mse,reg`.
pub fn write_log(path: &Path, trace: &[EpochLoss]) -> Result<(), TrainError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,total_loss,mse,reg")?;
    for e in trace {
        writeln!(out, "{},{},{},{}", e.epoch, e.total_loss, e.mse, e.reg)?;
    }
    out.flush()?;
    Ok(())
}

/// Largest relative error between analytic and central-difference
/// gradients over up to `max_entries` parameter coordinates (all of them
/// when the model is small enough, otherwise a seeded sample).
pub fn grad_check(
    model: &Model,
    data: &PairDataset,
    batch: &[usize],
    cfg: &TrainConfig,
    h: f64,
    max_entries: usize,
) -> Result<f64, TrainError> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TrainError::InvalidConfig(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let params = Parameters::from_model(model, &data.item_ids);
    let (mu_t, ablation) = (model.head.mu_t, model.head.ablation);
    let mut analytic = vec![0.0; params.values.len()];
    loss_and_grad(&params, data, batch, cfg, mu_t, ablation, Some(&mut analytic));

    let n = params.values.len();
    let coords: Vec<usize> = if n <= max_entries {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..max_entries).map(|_| rng.random_range(0..n)).collect()
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for idx in coords {
        let orig = probe.values[idx];
        probe.values[idx] = orig + h;
        let up = loss_and_grad(&probe, data, batch, cfg, mu_t, ablation, None).total;
        probe.values[idx] = orig - h;
        let down = loss_and_grad(&probe, data, batch, cfg, mu_t, ablation, None).total;
        probe.values[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[idx].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[idx] - numeric).abs() / denom);
    }
    Ok(worst)
}
