//! Command-line front end. Every subcommand reads its inputs from the run
//! directory (or the configured paths), writes its outputs there, records
//! a manifest, and returns a one-line summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::activations::{ActivationSet, PoolingConfig};
use crate::cards::{
    eligible_users, read_card_records, read_cards, read_ownership, read_ratings, split_users, validate_corpus, CardMode,
    FacetCard, RatingRecord, SplitSpec,
};
use crate::concepts::{build_bank, label_bank, ConceptBank};
use crate::config::RunConfig;
use crate::diagnostics::{diagnose, evaluate, score_dataset, write_curves, write_metrics, CurveKind};
use crate::embed::{EmbeddingStore, HashEncoder};
use crate::explain::{render, to_table, whatif, Edit};
use crate::model::{Ablation, Model};
use crate::pipeline::{facet_phrases, leakage_safe_items, pairs_from};
use crate::synth::generate;
use crate::train::{fit, write_log};

pub const OUT_DIR_ENV: &str = "EVISNAP_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "evisnap", version, about = "Concept-space cold-start recommender with cited explanations")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory for inputs and outputs.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with a planted model.
    Synth(SynthArgs),
    /// Check card files and ratings against the schema.
    Validate,
    /// Split users into train and held-out sets.
    Split(SplitArgs),
    /// Induce the concept bank from facet phrases.
    Bank(BankArgs),
    /// Pool concept activations for every card.
    Activate(ActivateArgs),
    /// Fit the transfer map and scoring head.
    Train(TrainArgs),
    /// Retrain per seed and report held-out MAE and RMSE.
    Evaluate(EvaluateArgs),
    /// Explain one prediction with cited evidence.
    Explain(ExplainArgs),
    /// Score change of a single-coordinate edit.
    Whatif(WhatifArgs),
    /// Deletion, sufficiency and contribution-mass curves on held-out pairs.
    Diagnose(DiagnoseArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Validate => "validate",
            Command::Split(_) => "split",
            Command::Bank(_) => "bank",
            Command::Activate(_) => "activate",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Explain(_) => "explain",
            Command::Whatif(_) => "whatif",
            Command::Diagnose(_) => "diagnose",
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_users: Option<usize>,
    #[arg(long)]
    pub n_items: Option<usize>,
    #[arg(long)]
    pub k_true: Option<usize>,
    #[arg(long)]
    pub ratings_per_user: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BankArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ActivateArgs {
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_m: Option<f64>,
    #[arg(long)]
    pub lambda_b: Option<f64>,
    /// full, int-only, int+user or int+item.
    #[arg(long)]
    pub ablation: Option<Ablation>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub user: String,
    #[arg(long)]
    pub item: String,
    #[arg(long, default_value_t = 3)]
    pub top: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Side {
    User,
    Item,
}

#[derive(Debug, Args)]
pub struct WhatifArgs {
    #[arg(long)]
    pub user: String,
    #[arg(long)]
    pub item: String,
    /// Edit the mapped user vector a_T or the item vector b.
    #[arg(long, value_enum)]
    pub side: Side,
    /// Concept index.
    #[arg(long)]
    pub k: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub value: f64,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub m_max: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
    /// Sample this many held-out pairs instead of using all of them.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub summary: String,
    /// Text for standard output (explanations, what-if results).
    pub stdout: Option<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: Vec<u64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seeds: &'a [u64],
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    created_unix: u64,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
}

/// Resolves the configuration: file, then environment/flag for the run directory.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    Ok(cfg)
}

/// Runs one command, writing its manifest next to its outputs.
pub fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = load_config(&cli)?;
    let name = cli.command.name();
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(&mut cfg, a)?,
        Command::Validate => cmd_validate(&cfg)?,
        Command::Split(a) => cmd_split(&mut cfg, a)?,
        Command::Bank(a) => cmd_bank(&mut cfg, a)?,
        Command::Activate(a) => cmd_activate(&mut cfg, a)?,
        Command::Train(a) => cmd_train(&mut cfg, a)?,
        Command::Evaluate(a) => cmd_evaluate(&mut cfg, a)?,
        Command::Explain(a) => cmd_explain(&cfg, a)?,
        Command::Whatif(a) => cmd_whatif(&cfg, a)?,
        Command::Diagnose(a) => cmd_diagnose(&mut cfg, a)?,
    };
    let manifest = Manifest {
        command: name,
        config_hash: cfg.hash(),
        seeds: &outcome.seeds,
        inputs: hashes(&outcome.inputs)?,
        outputs: hashes(&outcome.outputs)?,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    std::fs::write(cfg.paths.out(&format!("manifest-{name}.json")), serde_json::to_string_pretty(&manifest)?)?;
    Ok(outcome)
}

fn require(path: &Path) -> Result<PathBuf> {
    ensure!(path.exists(), "missing input file {}", path.display());
    Ok(path.to_path_buf())
}

fn load_cards(cfg: &RunConfig, mode: CardMode) -> Result<(PathBuf, Vec<FacetCard>)> {
    let path = require(&match mode {
        CardMode::User => cfg.paths.user_cards(),
        CardMode::Item => cfg.paths.item_cards(),
    })?;
    let cards = read_cards(&path, cfg.rating_range)?;
    let report = validate_corpus(&cards, mode, None);
    if let Some(v) = report.violations.first() {
        bail!("{}: {} schema violation(s), first: {v:?}", path.display(), report.violations.len());
    }
    Ok((path, cards))
}

fn load_ratings(cfg: &RunConfig) -> Result<(PathBuf, Vec<RatingRecord>)> {
    let path = require(&cfg.paths.ratings())?;
    let ratings = read_ratings(&path, cfg.rating_range)?;
    Ok((path, ratings))
}

fn load_split(cfg: &RunConfig) -> Result<(PathBuf, SplitSpec)> {
    let path = require(&cfg.paths.out("split.json"))?;
    let split = serde_json::from_str(&std::fs::read_to_string(&path)?).context("parsing split.json")?;
    Ok((path, split))
}

fn load_ownership(cfg: &RunConfig) -> Result<(Option<PathBuf>, BTreeMap<String, String>)> {
    let path = cfg.paths.ownership();
    if !path.exists() {
        tracing::warn!("no ownership file at {}; held-out evidence cannot be excluded", path.display());
        return Ok((None, BTreeMap::new()));
    }
    let owners = read_ownership(&path)?;
    Ok((Some(path), owners))
}

fn load_store(cfg: &RunConfig) -> Result<(Option<PathBuf>, EmbeddingStore)> {
    match &cfg.paths.embeddings {
        Some(path) => {
            let fallback = cfg.embed.fallback.then_some(cfg.embed.seed);
            let store = EmbeddingStore::load(&require(path)?, fallback)?;
            Ok((Some(path.clone()), store))
        }
        None => Ok((None, EmbeddingStore::hashing(HashEncoder::new(cfg.embed.dim, cfg.embed.seed)?))),
    }
}

fn load_bank(cfg: &RunConfig) -> Result<(PathBuf, ConceptBank)> {
    let path = require(&cfg.paths.out("bank.json"))?;
    let bank = ConceptBank::load(&path)?;
    Ok((path, bank))
}

fn load_activations(cfg: &RunConfig) -> Result<(PathBuf, ActivationSet)> {
    let path = require(&cfg.paths.out("activations.jsonl"))?;
    let acts = ActivationSet::load(&path)?;
    Ok((path, acts))
}

fn load_model(cfg: &RunConfig, acts: &ActivationSet) -> Result<(PathBuf, Model)> {
    let path = require(&cfg.paths.out("model.json"))?;
    let model = Model::load(&path)?;
    ensure!(
        model.bank_hash == acts.key.bank_hash,
        "model was trained on bank {} but activations use bank {}",
        model.bank_hash,
        acts.key.bank_hash
    );
    Ok((path, model))
}

fn apply_train(cfg: &mut RunConfig, o: &TrainOverrides) {
    let t = &mut cfg.train;
    t.epochs = o.epochs.unwrap_or(t.epochs);
    t.learning_rate = o.lr.unwrap_or(t.learning_rate);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    t.lambda_m = o.lambda_m.unwrap_or(t.lambda_m);
    t.lambda_b = o.lambda_b.unwrap_or(t.lambda_b);
    cfg.ablation = o.ablation.unwrap_or(cfg.ablation);
}

fn cmd_synth(cfg: &mut RunConfig, a: SynthArgs) -> Result<Outcome> {
    let s = &mut cfg.synth;
    s.n_users = a.n_users.unwrap_or(s.n_users);
    s.n_items = a.n_items.unwrap_or(s.n_items);
    s.k_true = a.k_true.unwrap_or(s.k_true);
    s.ratings_per_user = a.ratings_per_user.unwrap_or(s.ratings_per_user);
    s.noise_sigma = a.noise_sigma.unwrap_or(s.noise_sigma);
    s.seed = a.seed.unwrap_or(s.seed);
    // The corpus is only meaningful under the encoder the pipeline will use.
    s.dim = cfg.embed.dim;
    s.embed_seed = cfg.embed.seed;
    s.temperature = cfg.temperature;
    s.rating_range = cfg.rating_range;
    let corpus = generate(s)?;
    let dir = cfg.paths.out_dir.clone();
    corpus.write(&dir)?;
    let outputs = ["user_cards.jsonl", "item_cards.jsonl", "ratings.csv", "ownership.csv", "truth.json"]
        .map(|f| dir.join(f))
        .to_vec();
    Ok(Outcome {
        summary: format!(
            "synth: {} users, {} items, {} ratings, K_true = {} -> {}",
            corpus.user_cards.len(),
            corpus.item_cards.len(),
            corpus.ratings.len(),
            s.k_true,
            dir.display()
        ),
        outputs,
        seeds: vec![s.seed],
        ..Default::default()
    })
}

fn cmd_validate(cfg: &RunConfig) -> Result<Outcome> {
    let mut problems = Vec::new();
    let mut counts = Vec::new();
    let mut inputs = Vec::new();
    for (mode, path) in [(CardMode::User, cfg.paths.user_cards()), (CardMode::Item, cfg.paths.item_cards())] {
        let path = require(&path)?;
        let mut cards = Vec::new();
        for (line, parsed) in read_card_records(&path, cfg.rating_range)? {
            match parsed {
                Ok(card) => cards.push((line, card)),
                Err(e) => problems.push(format!("{}:{line}: {e}", path.display())),
            }
        }
        let only: Vec<FacetCard> = cards.iter().map(|(_, c)| c.clone()).collect();
        let report = validate_corpus(&only, mode, None);
        problems.extend(report.violations.iter().map(|v| format!("{}: {v:?}", path.display())));
        counts.push(format!("{} {mode} cards ({} facets, {} evidence)", report.cards, report.facets, report.evidence));
        inputs.push(path);
    }
    let (ratings_path, ratings) = load_ratings(cfg)?;
    inputs.push(ratings_path);
    for p in &problems {
        tracing::error!("{p}");
    }
    ensure!(problems.is_empty(), "validate: {} problem(s) found", problems.len());
    Ok(Outcome {
        summary: format!("validate: ok, {}, {} ratings", counts.join(", "), ratings.len()),
        inputs,
        ..Default::default()
    })
}

fn cmd_split(cfg: &mut RunConfig, a: SplitArgs) -> Result<Outcome> {
    cfg.split.ratio = a.ratio.unwrap_or(cfg.split.ratio);
    cfg.split.seed = a.seed.unwrap_or(cfg.split.seed);
    let (user_path, users) = load_cards(cfg, CardMode::User)?;
    let (item_path, items) = load_cards(cfg, CardMode::Item)?;
    let (ratings_path, ratings) = load_ratings(cfg)?;
    let (owner_path, owners) = load_ownership(cfg)?;
    let split = split_users(&eligible_users(&users, &ratings), cfg.split.ratio, cfg.split.seed)?;
    let (_, stats, report) = leakage_safe_items(&items, &split, &owners);
    let out = cfg.paths.out("split.json");
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    std::fs::write(&out, serde_json::to_string_pretty(&split)?)?;
    let mut inputs = vec![user_path, item_path, ratings_path];
    inputs.extend(owner_path);
    Ok(Outcome {
        summary: format!(
            "split: {} train / {} held-out users; {} held-out evidence sentence(s) to exclude; {} unresolved review owner(s)",
            split.train_users.len(),
            split.test_users.len(),
            stats.evidence_removed,
            report.unknown_ownership.len()
        ),
        inputs,
        outputs: vec![out],
        seeds: vec![cfg.split.seed],
        ..Default::default()
    })
}

fn cmd_bank(cfg: &mut RunConfig, a: BankArgs) -> Result<Outcome> {
    cfg.bank.k = a.k.unwrap_or(cfg.bank.k);
    cfg.bank.seed = a.seed.unwrap_or(cfg.bank.seed);
    cfg.bank.max_iters = a.max_iters.unwrap_or(cfg.bank.max_iters);
    ensure!(cfg.bank.k >= 2, "bank: K = {} is below the minimum of 2", cfg.bank.k);
    let (user_path, users) = load_cards(cfg, CardMode::User)?;
    let (item_path, items) = load_cards(cfg, CardMode::Item)?;
    let (store_path, store) = load_store(cfg)?;
    let phrases = facet_phrases(users.iter().chain(&items), &store)?;
    let build = build_bank(&phrases, cfg.bank)?;
    let (bank, labels) = label_bank(build.bank, &phrases)?;
    if !labels.empty_clusters.is_empty() {
        tracing::warn!("concepts {:?} have no member phrase", labels.empty_clusters);
    }
    let out = cfg.paths.out("bank.json");
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    bank.save(&out)?;
    let mut inputs = vec![user_path, item_path];
    inputs.extend(store_path);
    Ok(Outcome {
        summary: format!(
            "bank: K = {} over {} distinct phrases, {} iterations, inertia {:.6}",
            bank.k,
            build.phrases.len(),
            build.iterations,
            bank.inertia
        ),
        inputs,
        outputs: vec![out],
        seeds: vec![cfg.bank.seed],
        ..Default::default()
    })
}

fn cmd_activate(cfg: &mut RunConfig, a: ActivateArgs) -> Result<Outcome> {
    cfg.temperature = a.temperature.unwrap_or(cfg.temperature);
    let pooling = PoolingConfig::new(cfg.temperature)?;
    let (user_path, users) = load_cards(cfg, CardMode::User)?;
    let (item_path, items) = load_cards(cfg, CardMode::Item)?;
    let (split_path, split) = load_split(cfg)?;
    let (owner_path, owners) = load_ownership(cfg)?;
    let (bank_path, bank) = load_bank(cfg)?;
    let (store_path, store) = load_store(cfg)?;
    let (safe_items, stats, report) = leakage_safe_items(&items, &split, &owners);
    ensure!(report.violations.is_empty(), "held-out evidence survived exclusion: {:?}", report.violations[0]);
    if !report.unknown_ownership.is_empty() {
        tracing::warn!("{} item evidence sentence(s) have no known author", report.unknown_ownership.len());
    }
    let acts = ActivationSet::compute(&users, &safe_items, &store, &bank, pooling)?;
    let out = cfg.paths.out("activations.jsonl");
    acts.save(&out)?;
    let mut inputs = vec![user_path, item_path, split_path, bank_path];
    inputs.extend(owner_path);
    inputs.extend(store_path);
    Ok(Outcome {
        summary: format!(
            "activate: {} users, {} items at T = {}; excluded {} held-out evidence sentence(s)",
            acts.users.len(),
            acts.items.len(),
            cfg.temperature,
            stats.evidence_removed
        ),
        inputs,
        outputs: vec![out],
        ..Default::default()
    })
}

fn cmd_train(cfg: &mut RunConfig, a: TrainArgs) -> Result<Outcome> {
    apply_train(cfg, &a.train);
    cfg.train.seed = a.seed.unwrap_or(cfg.train.seed);
    cfg.validate()?;
    let (acts_path, acts) = load_activations(cfg)?;
    let (ratings_path, ratings) = load_ratings(cfg)?;
    let (split_path, split) = load_split(cfg)?;
    let (key, temperature) = (acts.key.clone(), acts.key.temperature);
    let prepared = pairs_from(acts, &ratings, &split);
    ensure!(!prepared.train.is_empty(), "no training pairs");
    let result = fit(&prepared.train, &cfg.train, cfg.ablation, cfg.rating_range)?;
    let mut model = result.model;
    model.bank_hash = key.bank_hash;
    model.temperature = temperature;
    let train_metrics = score_dataset(&model, &prepared.train)?;
    let (model_path, log_path) = (cfg.paths.out("model.json"), cfg.paths.out("train_log.csv"));
    model.save(&model_path)?;
    write_log(&log_path, &result.trace)?;
    let last = result.trace.last().expect("epochs >= 1");
    Ok(Outcome {
        summary: format!(
            "train: {} pairs, {} epochs, {} ablation, final loss {:.6}, train RMSE {:.4}",
            prepared.train.len(),
            cfg.train.epochs,
            cfg.ablation,
            last.total_loss,
            train_metrics.rmse
        ),
        inputs: vec![acts_path, ratings_path, split_path],
        outputs: vec![model_path, log_path],
        seeds: vec![cfg.train.seed],
        ..Default::default()
    })
}

fn cmd_evaluate(cfg: &mut RunConfig, a: EvaluateArgs) -> Result<Outcome> {
    apply_train(cfg, &a.train);
    if let Some(seeds) = a.seeds {
        cfg.seeds = seeds;
    }
    cfg.validate()?;
    let (acts_path, acts) = load_activations(cfg)?;
    let (ratings_path, ratings) = load_ratings(cfg)?;
    let (split_path, split) = load_split(cfg)?;
    let prepared = pairs_from(acts, &ratings, &split);
    let result = evaluate(&prepared.train, &prepared.test, &cfg.train, cfg.ablation, cfg.rating_range, &cfg.seeds)?;
    let out = cfg.paths.out("metrics.csv");
    write_metrics(&out, &result)?;
    Ok(Outcome {
        summary: format!(
            "evaluate: {} held-out pairs, {} run(s), {} ablation, MAE {:.4}, RMSE {:.4}",
            result.n_pairs,
            result.runs.len(),
            cfg.ablation,
            result.mae,
            result.rmse
        ),
        inputs: vec![acts_path, ratings_path, split_path],
        outputs: vec![out],
        seeds: cfg.seeds.clone(),
        ..Default::default()
    })
}

fn cmd_explain(cfg: &RunConfig, a: ExplainArgs) -> Result<Outcome> {
    ensure!(a.top >= 1, "--top must be at least 1");
    let (acts_path, acts) = load_activations(cfg)?;
    let (model_path, model) = load_model(cfg, &acts)?;
    let (bank_path, bank) = load_bank(cfg)?;
    acts.check_bank(&bank)?;
    let user = acts.users.get(&a.user).with_context(|| format!("unknown user `{}`", a.user))?;
    let item = acts.items.get(&a.item).with_context(|| format!("unknown item `{}`", a.item))?;
    let e = render(&model, &bank.labels, &a.user, user, &a.item, item, a.top)?;
    let json = serde_json::to_string_pretty(&e)?;
    let out = cfg.paths.out("explanation.json");
    std::fs::write(&out, &json)?;
    let stdout = match a.format {
        Format::Json => json,
        Format::Table => to_table(&e),
    };
    Ok(Outcome {
        summary: format!(
            "explain: {} x {} -> r_hat {:.4} (y_c {:.4}), residual {:.1e}",
            a.user, a.item, e.r_hat, e.y_c, e.reconstruction_residual
        ),
        stdout: Some(stdout),
        inputs: vec![acts_path, model_path, bank_path],
        outputs: vec![out],
        ..Default::default()
    })
}

fn cmd_whatif(cfg: &RunConfig, a: WhatifArgs) -> Result<Outcome> {
    let (acts_path, acts) = load_activations(cfg)?;
    let (model_path, model) = load_model(cfg, &acts)?;
    let user = acts.users.get(&a.user).with_context(|| format!("unknown user `{}`", a.user))?;
    let item = acts.items.get(&a.item).with_context(|| format!("unknown item `{}`", a.item))?;
    let a_t = model.map_user(&user.a_s)?;
    let edit = match a.side {
        Side::User => Edit::User { k: a.k, value: a.value },
        Side::Item => Edit::Item { k: a.k, value: a.value },
    };
    let w = whatif(&model, &a_t, &item.values, &a.item, edit)?;
    #[derive(Serialize)]
    struct Report<'a> {
        user_id: &'a str,
        item_id: &'a str,
        edit: Edit,
        y_c: f64,
        new_y_c: f64,
        delta: f64,
        r_hat: f64,
        new_r_hat: f64,
    }
    let range = model.head.rating_range;
    let report = Report {
        user_id: &a.user,
        item_id: &a.item,
        edit,
        y_c: w.y_c,
        new_y_c: w.new_y_c,
        delta: w.delta,
        r_hat: range.clamp(model.head.mu_t + w.y_c),
        new_r_hat: range.clamp(model.head.mu_t + w.new_y_c),
    };
    Ok(Outcome {
        summary: format!("whatif: {} x {} delta y_c {:+.6}", a.user, a.item, w.delta),
        stdout: Some(serde_json::to_string_pretty(&report)?),
        inputs: vec![acts_path, model_path],
        ..Default::default()
    })
}

fn cmd_diagnose(cfg: &mut RunConfig, a: DiagnoseArgs) -> Result<Outcome> {
    let d = &mut cfg.diagnostics;
    d.m_max = a.m_max.or(d.m_max);
    d.draws = a.draws.unwrap_or(d.draws);
    d.sample = a.sample.or(d.sample);
    d.seed = a.seed.unwrap_or(d.seed);
    let (acts_path, acts) = load_activations(cfg)?;
    let (model_path, model) = load_model(cfg, &acts)?;
    let (ratings_path, ratings) = load_ratings(cfg)?;
    let (split_path, split) = load_split(cfg)?;
    let d = cfg.diagnostics;
    let m_max = d.m_max.unwrap_or((model.k() / 4).max(1));
    let prepared = pairs_from(acts, &ratings, &split);
    let report = diagnose(&model, &prepared.test, m_max, d.seed, d.draws, d.sample)?;
    let out = cfg.paths.out("curves.csv");
    write_curves(&out, &report)?;
    let at = |kind: CurveKind, m: usize| report.mean.iter().find(|p| p.kind == kind && p.m == m).map_or(0.0, |p| p.value);
    Ok(Outcome {
        summary: format!(
            "diagnose: {} pairs, m <= {m_max}; at m = {m_max}: pos {:.4}, random {:.4}, sufficiency {:.4}, mass {:.4}",
            report.pairs.len(),
            at(CurveKind::Pos, m_max),
            at(CurveKind::Random, m_max),
            at(CurveKind::Sufficiency, m_max),
            at(CurveKind::Mass, m_max),
        ),
        inputs: vec![acts_path, model_path, ratings_path, split_path],
        outputs: vec![out],
        seeds: vec![d.seed],
        ..Default::default()
    })
}
