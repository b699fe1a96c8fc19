//! Facet-card corpora: parsing, validation, user-level cold-start splits and
//! item-side leakage checks.
//!
//! Cards arrive one JSON object per line:
//!
//! ```text
//! {"meta":{"mode":"user","entity_id":"A1","domain":"Movies"},
//!  "facets":[{"facet":"fast pacing","polarity":1,"support_count":3,
//!             "evidence":[{"review_id":"r1","rating":5,"unix_time":1400000000,
//!                          "sentence":"The pacing never lets up."}]}]}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use tracing::warn;

/// Maximum number of whitespace-separated words in a facet phrase.
pub const MAX_FACET_WORDS: usize = 4;

#[derive(Debug, Error)]
pub enum CardError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("missing key `{path}`")]
    MissingKey { path: String },
    #[error("`{path}`: expected {expected}")]
    WrongType { path: String, expected: &'static str },
    #[error("`{path}`: unknown mode `{value}`")]
    UnknownMode { path: String, value: String },
    #[error("`{path}`: polarity {polarity} is not allowed on a {mode} card")]
    PolarityModeMismatch { path: String, polarity: i64, mode: CardMode },
    #[error("`{path}`: facet phrase has {words} words (at most {MAX_FACET_WORDS} allowed)")]
    FacetTooLong { path: String, words: usize },
    #[error("`{path}`: facet phrase is empty")]
    EmptyFacet { path: String },
    #[error("`{path}`: facet phrase `{facet}` is not lower-case")]
    FacetNotLowercase { path: String, facet: String },
    #[error("`{path}`: duplicate facet phrase `{facet}`")]
    DuplicateFacet { path: String, facet: String },
    #[error("`{path}`: facet list is empty")]
    EmptyFacets { path: String },
    #[error("`{path}`: evidence list is empty")]
    EmptyEvidence { path: String },
    #[error("`{path}`: evidence sentence is empty")]
    EmptySentence { path: String },
    #[error("`{path}`: rating {rating} outside [{lo}, {hi}]")]
    RatingOutOfRange { path: String, rating: f64, lo: f64, hi: f64 },
    #[error("{file}:{line}: {source}")]
    AtLine {
        file: String,
        line: usize,
        #[source]
        source: Box<CardError>,
    },
    #[error("{file}: duplicate entity `{entity_id}` (lines {first} and {second})")]
    DuplicateEntity { file: String, entity_id: String, first: usize, second: usize },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("no eligible users to split")]
    NoUsers,
}

/// Closed interval of valid ratings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for RatingRange {
    fn default() -> Self {
        Self { lo: 1.0, hi: 5.0 }
    }
}

impl RatingRange {
    pub fn contains(&self, r: f64) -> bool {
        r >= self.lo && r <= self.hi
    }

    pub fn clamp(&self, r: f64) -> f64 {
        r.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CardMode {
    User,
    Item,
}

impl fmt::Display for CardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CardMode::User => f.write_str("user"),
            CardMode::Item => f.write_str("item"),
        }
    }
}

/// One verbatim sentence backing a facet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub review_id: String,
    pub rating: f64,
    pub unix_time: i64,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    pub facet: String,
    pub polarity: i8,
    pub support_count: u32,
    pub evidence: Vec<Evidence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardMeta {
    pub mode: CardMode,
    pub entity_id: String,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetCard {
    pub meta: CardMeta,
    pub facets: Vec<Facet>,
}

impl FacetCard {
    pub fn entity_id(&self) -> &str {
        &self.meta.entity_id
    }

    pub fn mode(&self) -> CardMode {
        self.meta.mode
    }

    /// Iterates `(facet, evidence)` pairs in card order.
    pub fn evidence(&self) -> impl Iterator<Item = (&Facet, &Evidence)> {
        self.facets
            .iter()
            .flat_map(|f| f.evidence.iter().map(move |e| (f, e)))
    }

    /// Serializes to a single JSONL record.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("cards serialize")
    }

    /// Checks every type invariant of a card.
    pub fn validate(&self, range: RatingRange) -> Result<(), CardError> {
        if self.facets.is_empty() {
            return Err(CardError::EmptyFacets { path: "facets".into() });
        }
        let mut seen = HashSet::new();
        for (fi, facet) in self.facets.iter().enumerate() {
            let path = format!("facets[{fi}]");
            check_phrase(&facet.facet, &format!("{path}.facet"))?;
            if !seen.insert(facet.facet.as_str()) {
                return Err(CardError::DuplicateFacet {
                    path: format!("{path}.facet"),
                    facet: facet.facet.clone(),
                });
            }
            check_polarity(facet.polarity as i64, self.meta.mode, &format!("{path}.polarity"))?;
            if facet.evidence.is_empty() {
                return Err(CardError::EmptyEvidence { path: format!("{path}.evidence") });
            }
            for (ei, ev) in facet.evidence.iter().enumerate() {
                let epath = format!("{path}.evidence[{ei}]");
                if ev.sentence.trim().is_empty() {
                    return Err(CardError::EmptySentence { path: format!("{epath}.sentence") });
                }
                if !range.contains(ev.rating) {
                    return Err(CardError::RatingOutOfRange {
                        path: format!("{epath}.rating"),
                        rating: ev.rating,
                        lo: range.lo,
                        hi: range.hi,
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_phrase(phrase: &str, path: &str) -> Result<(), CardError> {
    let words = phrase.split_whitespace().count();
    if words == 0 {
        return Err(CardError::EmptyFacet { path: path.into() });
    }
    if words > MAX_FACET_WORDS {
        return Err(CardError::FacetTooLong { path: path.into(), words });
    }
    if phrase.to_lowercase() != phrase {
        return Err(CardError::FacetNotLowercase { path: path.into(), facet: phrase.into() });
    }
    Ok(())
}

fn check_polarity(polarity: i64, mode: CardMode, path: &str) -> Result<(), CardError> {
    let ok = match mode {
        CardMode::User => polarity == 1 || polarity == -1,
        CardMode::Item => polarity == 0,
    };
    if ok {
        Ok(())
    } else {
        Err(CardError::PolarityModeMismatch { path: path.into(), polarity, mode })
    }
}

/// Parses one card record with the default `[1, 5]` rating range.
pub fn parse_card(record: &str) -> Result<FacetCard, CardError> {
    parse_card_with(record, RatingRange::default())
}

pub fn parse_card_with(record: &str, range: RatingRange) -> Result<FacetCard, CardError> {
    let value: Value =
        serde_json::from_str(record).map_err(|e| CardError::Malformed(e.to_string()))?;
    let root = value
        .as_object()
        .ok_or(CardError::WrongType { path: "$".into(), expected: "object" })?;

    let meta = get_object(root, "meta", "meta")?;
    let mode = match get_str(meta, "mode", "meta.mode")? {
        "user" => CardMode::User,
        "item" => CardMode::Item,
        other => {
            return Err(CardError::UnknownMode { path: "meta.mode".into(), value: other.into() })
        }
    };
    let entity_id = get_str(meta, "entity_id", "meta.entity_id")?.to_string();
    let domain = get_str(meta, "domain", "meta.domain")?.to_string();

    let raw_facets = get_array(root, "facets", "facets")?;
    let mut facets = Vec::with_capacity(raw_facets.len());
    for (fi, raw) in raw_facets.iter().enumerate() {
        let path = format!("facets[{fi}]");
        let obj = raw
            .as_object()
            .ok_or_else(|| CardError::WrongType { path: path.clone(), expected: "object" })?;
        let phrase = get_str(obj, "facet", &format!("{path}.facet"))?.to_string();
        // Checked here as well so the error names the first offending field.
        check_phrase(&phrase, &format!("{path}.facet"))?;
        let polarity = get_i64(obj, "polarity", &format!("{path}.polarity"))?;
        check_polarity(polarity, mode, &format!("{path}.polarity"))?;
        let raw_count = get_i64(obj, "support_count", &format!("{path}.support_count"))?;
        let support_count = if raw_count < 1 {
            warn!(entity = %entity_id, facet = %phrase, raw_count, "support_count below 1, floored to 1");
            1
        } else {
            u32::try_from(raw_count).unwrap_or(u32::MAX)
        };
        let raw_evidence = get_array(obj, "evidence", &format!("{path}.evidence"))?;
        let mut evidence = Vec::with_capacity(raw_evidence.len());
        for (ei, raw_ev) in raw_evidence.iter().enumerate() {
            let epath = format!("{path}.evidence[{ei}]");
            let ev = raw_ev
                .as_object()
                .ok_or_else(|| CardError::WrongType { path: epath.clone(), expected: "object" })?;
            evidence.push(Evidence {
                review_id: get_id(ev, "review_id", &format!("{epath}.review_id"))?,
                rating: get_f64(ev, "rating", &format!("{epath}.rating"))?,
                unix_time: get_i64(ev, "unix_time", &format!("{epath}.unix_time"))?,
                sentence: get_str(ev, "sentence", &format!("{epath}.sentence"))?.to_string(),
            });
        }
        facets.push(Facet {
            facet: phrase,
            polarity: polarity as i8,
            support_count,
            evidence,
        });
    }

    let card = FacetCard { meta: CardMeta { mode, entity_id, domain }, facets };
    card.validate(range)?;
    Ok(card)
}

fn get<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, CardError> {
    obj.get(key).ok_or_else(|| CardError::MissingKey { path: path.into() })
}

fn get_object<'a>(
    obj: &'a Map<String, Value>,
    key: &str,
    path: &str,
) -> Result<&'a Map<String, Value>, CardError> {
    get(obj, key, path)?
        .as_object()
        .ok_or_else(|| CardError::WrongType { path: path.into(), expected: "object" })
}

fn get_array<'a>(
    obj: &'a Map<String, Value>,
    key: &str,
    path: &str,
) -> Result<&'a Vec<Value>, CardError> {
    get(obj, key, path)?
        .as_array()
        .ok_or_else(|| CardError::WrongType { path: path.into(), expected: "array" })
}

fn get_str<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a str, CardError> {
    get(obj, key, path)?
        .as_str()
        .ok_or_else(|| CardError::WrongType { path: path.into(), expected: "string" })
}

// Review ids are opaque; numeric ids are accepted and stringified.
fn get_id(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, CardError> {
    match get(obj, key, path)? {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(CardError::WrongType { path: path.into(), expected: "string" }),
    }
}

fn get_i64(obj: &Map<String, Value>, key: &str, path: &str) -> Result<i64, CardError> {
    let v = get(obj, key, path)?;
    if let Some(i) = v.as_i64() {
        return Ok(i);
    }
    match v.as_f64() {
        Some(f) if f.fract() == 0.0 && f.abs() < 9.0e15 => Ok(f as i64),
        _ => Err(CardError::WrongType { path: path.into(), expected: "integer" }),
    }
}

fn get_f64(obj: &Map<String, Value>, key: &str, path: &str) -> Result<f64, CardError> {
    get(obj, key, path)?
        .as_f64()
        .ok_or_else(|| CardError::WrongType { path: path.into(), expected: "number" })
}

/// Reads a JSONL card file. Blank lines are skipped; entity ids must be
/// unique within the file.
pub fn read_cards(path: &Path, range: RatingRange) -> Result<Vec<FacetCard>, CardError> {
    let file = path.display().to_string();
    let mut cards = Vec::new();
    let mut lines_by_entity: HashMap<String, usize> = HashMap::new();
    for (idx, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let card = parse_card_with(&line, range).map_err(|e| CardError::AtLine {
            file: file.clone(),
            line: idx + 1,
            source: Box::new(e),
        })?;
        if let Some(&first) = lines_by_entity.get(card.entity_id()) {
            return Err(CardError::DuplicateEntity {
                file,
                entity_id: card.meta.entity_id,
                first,
                second: idx + 1,
            });
        }
        lines_by_entity.insert(card.meta.entity_id.clone(), idx + 1);
        cards.push(card);
    }
    Ok(cards)
}

/// Line number paired with the parse outcome for that line.
pub type CardRecord = (usize, Result<FacetCard, CardError>);

/// Parses every non-blank line independently; used by validation, which
/// reports failures instead of stopping at the first one.
pub fn read_card_records(
    path: &Path,
    range: RatingRange,
) -> Result<Vec<CardRecord>, CardError> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((idx + 1, parse_card_with(&line, range)));
    }
    Ok(out)
}

pub fn write_cards(path: &Path, cards: &[FacetCard]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for card in cards {
        writeln!(out, "{}", card.to_json_line())?;
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Violation {
    DuplicateEntity { entity_id: String, first: usize, duplicate: usize },
    ModeMismatch { entity_id: String, expected: CardMode, found: CardMode },
    DomainMismatch { entity_id: String, expected: String, found: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub cards: usize,
    pub facets: usize,
    pub evidence: usize,
    pub violations: Vec<Violation>,
}

impl CorpusReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Summarizes a corpus and lists every corpus-level violation.
pub fn validate_corpus(
    cards: &[FacetCard],
    expected_mode: CardMode,
    expected_domain: Option<&str>,
) -> CorpusReport {
    let mut report = CorpusReport { cards: cards.len(), ..Default::default() };
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (idx, card) in cards.iter().enumerate() {
        report.facets += card.facets.len();
        report.evidence += card.facets.iter().map(|f| f.evidence.len()).sum::<usize>();
        let id = card.entity_id();
        if let Some(&first) = first_seen.get(id) {
            report.violations.push(Violation::DuplicateEntity {
                entity_id: id.to_string(),
                first,
                duplicate: idx,
            });
        } else {
            first_seen.insert(id, idx);
        }
        if card.mode() != expected_mode {
            report.violations.push(Violation::ModeMismatch {
                entity_id: id.to_string(),
                expected: expected_mode,
                found: card.mode(),
            });
        }
        if let Some(domain) = expected_domain {
            if card.meta.domain != domain {
                report.violations.push(Violation::DomainMismatch {
                    entity_id: id.to_string(),
                    expected: domain.to_string(),
                    found: card.meta.domain.clone(),
                });
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub unix_time: i64,
}

pub fn read_ratings(path: &Path, range: RatingRange) -> Result<Vec<RatingRecord>, CardError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (idx, row) in reader.deserialize::<RatingRecord>().enumerate() {
        let row = row?;
        if !range.contains(row.rating) {
            return Err(CardError::RatingOutOfRange {
                path: format!("{}:row {}", path.display(), idx + 1),
                rating: row.rating,
                lo: range.lo,
                hi: range.hi,
            });
        }
        out.push(row);
    }
    Ok(out)
}

pub fn write_ratings(path: &Path, ratings: &[RatingRecord]) -> Result<(), CardError> {
    let mut writer = csv::Writer::from_path(path)?;
    for r in ratings {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OwnerRow {
    review_id: String,
    user_id: String,
}

pub fn read_ownership(path: &Path) -> Result<BTreeMap<String, String>, CardError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<OwnerRow>() {
        let row = row?;
        out.insert(row.review_id, row.user_id);
    }
    Ok(out)
}

pub fn write_ownership(path: &Path, owners: &BTreeMap<String, String>) -> Result<(), CardError> {
    let mut writer = csv::Writer::from_path(path)?;
    for (review_id, user_id) in owners {
        writer.serialize(OwnerRow { review_id: review_id.clone(), user_id: user_id.clone() })?;
    }
    writer.flush()?;
    Ok(())
}

/// Users eligible for a transfer: a source card and at least one target rating.
/// Returned sorted and deduplicated.
pub fn eligible_users(user_cards: &[FacetCard], ratings: &[RatingRecord]) -> Vec<String> {
    let rated: HashSet<&str> = ratings.iter().map(|r| r.user_id.as_str()).collect();
    let set: BTreeSet<String> = user_cards
        .iter()
        .filter(|c| rated.contains(c.entity_id()))
        .map(|c| c.meta.entity_id.clone())
        .collect();
    set.into_iter().collect()
}

/// A user-level cold-start split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub ratio: f64,
    pub train_users: BTreeSet<String>,
    pub test_users: BTreeSet<String>,
}

/// Number of training users: `round_half_up(ratio * n)`.
pub fn train_size(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 0.5).floor().min(n as f64) as usize
}

/// Shuffles the canonical (sorted, deduplicated) user list with a seeded
/// generator and assigns the first `round(ratio * n)` users to training.
pub fn split_users(eligible: &[String], ratio: f64, seed: u64) -> Result<SplitSpec, SplitError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(SplitError::BadRatio(ratio));
    }
    let mut users: Vec<String> = eligible.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if users.is_empty() {
        return Err(SplitError::NoUsers);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    users.shuffle(&mut rng);
    let n_train = train_size(users.len(), ratio);
    let test_users = users.split_off(n_train).into_iter().collect();
    Ok(SplitSpec { seed, ratio, train_users: users.into_iter().collect(), test_users })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageHit {
    pub item_id: String,
    pub facet: String,
    pub review_id: String,
    /// Owner of the review; `None` when the ownership map does not cover it.
    pub user_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub violations: Vec<LeakageHit>,
    pub unknown_ownership: Vec<LeakageHit>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists item evidence authored by held-out users.
pub fn check_leakage(
    item_cards: &[FacetCard],
    test_users: &BTreeSet<String>,
    review_owner: &BTreeMap<String, String>,
) -> LeakageReport {
    let mut report = LeakageReport::default();
    for card in item_cards {
        for (facet, ev) in card.evidence() {
            let hit = |user_id: Option<String>| LeakageHit {
                item_id: card.meta.entity_id.clone(),
                facet: facet.facet.clone(),
                review_id: ev.review_id.clone(),
                user_id,
            };
            match review_owner.get(&ev.review_id) {
                Some(owner) if test_users.contains(owner) => {
                    report.violations.push(hit(Some(owner.clone())))
                }
                Some(_) => {}
                None => report.unknown_ownership.push(hit(None)),
            }
        }
    }
    report
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionStats {
    pub evidence_removed: usize,
    pub facets_removed: usize,
    pub cards_removed: usize,
}

/// Applies the exclusion rule: drops item evidence authored by `excluded`
/// users, then facets left without evidence, then cards left without facets.
pub fn exclude_reviews_by(
    item_cards: &[FacetCard],
    excluded: &BTreeSet<String>,
    review_owner: &BTreeMap<String, String>,
) -> (Vec<FacetCard>, ExclusionStats) {
    let mut stats = ExclusionStats::default();
    let mut out = Vec::with_capacity(item_cards.len());
    for card in item_cards {
        let mut facets = Vec::with_capacity(card.facets.len());
        for facet in &card.facets {
            let kept: Vec<Evidence> = facet
                .evidence
                .iter()
                .filter(|ev| {
                    let leaked = review_owner
                        .get(&ev.review_id)
                        .is_some_and(|owner| excluded.contains(owner));
                    stats.evidence_removed += leaked as usize;
                    !leaked
                })
                .cloned()
                .collect();
            if kept.is_empty() {
                stats.facets_removed += 1;
            } else {
                facets.push(Facet { evidence: kept, ..facet.clone() });
            }
        }
        if facets.is_empty() {
            stats.cards_removed += 1;
        } else {
            out.push(FacetCard { meta: card.meta.clone(), facets });
        }
    }
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn user_card_json(facet: &str, polarity: i64) -> String {
        format!(
            r#"{{"meta":{{"mode":"user","entity_id":"A1","domain":"Movies"}},"facets":[{{"facet":"{facet}","polarity":{polarity},"support_count":2,"evidence":[{{"review_id":"r1","rating":5,"unix_time":1400000000,"sentence":"Loved the fast pacing."}}]}}]}}"#
        )
    }

    fn item_card(id: &str, review_ids: &[&str]) -> FacetCard {
        FacetCard {
            meta: CardMeta { mode: CardMode::Item, entity_id: id.into(), domain: "Music".into() },
            facets: vec![Facet {
                facet: "live energy".into(),
                polarity: 0,
                support_count: review_ids.len() as u32,
                evidence: review_ids
                    .iter()
                    .map(|r| Evidence {
                        review_id: r.to_string(),
                        rating: 4.0,
                        unix_time: 1,
                        sentence: "The live drums give the songs amazing energy.".into(),
                    })
                    .collect(),
            }],
        }
    }

    #[test]
    fn parses_user_card() {
        let card = parse_card(&user_card_json("fast pacing", 1)).unwrap();
        assert_eq!(card.mode(), CardMode::User);
        assert_eq!(card.facets.len(), 1);
        assert_eq!(card.facets[0].polarity, 1);
        assert_eq!(card.facets[0].evidence[0].sentence, "Loved the fast pacing.");
    }

    #[test]
    fn item_card_with_positive_polarity_is_rejected() {
        let text = user_card_json("live energy", 1).replace("\"user\"", "\"item\"");
        let err = parse_card(&text).unwrap_err();
        match err {
            CardError::PolarityModeMismatch { path, polarity, mode } => {
                assert_eq!(path, "facets[0].polarity");
                assert_eq!(polarity, 1);
                assert_eq!(mode, CardMode::Item);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn user_card_with_zero_polarity_is_rejected() {
        let err = parse_card(&user_card_json("fast pacing", 0)).unwrap_err();
        assert!(matches!(err, CardError::PolarityModeMismatch { .. }));
    }

    #[test]
    fn five_word_facet_is_too_long() {
        let err = parse_card(&user_card_json("extremely long facet phrase here", 1)).unwrap_err();
        assert!(matches!(err, CardError::FacetTooLong { words: 5, .. }), "{err:?}");
    }

    #[test]
    fn uppercase_facet_is_rejected() {
        let err = parse_card(&user_card_json("Fast pacing", 1)).unwrap_err();
        assert!(matches!(err, CardError::FacetNotLowercase { .. }));
    }

    #[test]
    fn missing_key_reports_path() {
        let text = user_card_json("fast pacing", 1).replace("\"sentence\"", "\"text\"");
        match parse_card(&text).unwrap_err() {
            CardError::MissingKey { path } => assert_eq!(path, "facets[0].evidence[0].sentence"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_evidence_is_rejected() {
        let text = r#"{"meta":{"mode":"user","entity_id":"A","domain":"Books"},"facets":[{"facet":"slow plot","polarity":-1,"support_count":1,"evidence":[]}]}"#;
        assert!(matches!(parse_card(text).unwrap_err(), CardError::EmptyEvidence { .. }));
    }

    #[test]
    fn malformed_record() {
        assert!(matches!(parse_card("{not json").unwrap_err(), CardError::Malformed(_)));
    }

    #[test]
    fn duplicate_facets_rejected() {
        let mut card = parse_card(&user_card_json("fast pacing", 1)).unwrap();
        card.facets.push(card.facets[0].clone());
        assert!(matches!(
            card.validate(RatingRange::default()),
            Err(CardError::DuplicateFacet { .. })
        ));
    }

    #[test]
    fn support_count_zero_is_floored() {
        let text = user_card_json("fast pacing", 1).replace("\"support_count\":2", "\"support_count\":0");
        let card = parse_card(&text).unwrap();
        assert_eq!(card.facets[0].support_count, 1);
    }

    #[test]
    fn corpus_report_counts_and_flags() {
        let cards = vec![item_card("i1", &["a"]), item_card("i2", &["b", "c"])];
        let report = validate_corpus(&cards, CardMode::Item, Some("Music"));
        assert_eq!((report.cards, report.facets, report.evidence), (2, 2, 3));
        assert!(report.is_clean());

        let dup = vec![item_card("i1", &["a"]), item_card("i1", &["b"])];
        let report = validate_corpus(&dup, CardMode::Item, None);
        assert!(matches!(report.violations[0], Violation::DuplicateEntity { .. }));

        let user = parse_card(&user_card_json("fast pacing", 1)).unwrap();
        let report = validate_corpus(&[user], CardMode::Item, None);
        assert!(matches!(report.violations[0], Violation::ModeMismatch { .. }));
    }

    #[test]
    fn split_examples() {
        let users: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let split = split_users(&users, 0.8, 7).unwrap();
        assert_eq!((split.train_users.len(), split.test_users.len()), (8, 2));
        assert_eq!(split, split_users(&users, 0.8, 7).unwrap());

        let one = split_users(&["solo".to_string()], 0.8, 7).unwrap();
        assert_eq!((one.train_users.len(), one.test_users.len()), (1, 0));

        assert_eq!(split_users(&users, 1.0, 0), Err(SplitError::BadRatio(1.0)));
        assert_eq!(split_users(&users, 0.0, 0), Err(SplitError::BadRatio(0.0)));
        assert_eq!(split_users(&[], 0.5, 0), Err(SplitError::NoUsers));
    }

    #[test]
    fn split_rounds_half_up() {
        assert_eq!(train_size(5, 0.5), 3);
        assert_eq!(train_size(3, 0.5), 2);
        assert_eq!(train_size(10, 0.8), 8);
    }

    #[test]
    fn leakage_examples() {
        let owners: BTreeMap<String, String> =
            [("r_train", "u1"), ("r_test", "u2")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let test: BTreeSet<String> = ["u2".to_string()].into();

        let clean = check_leakage(&[item_card("i1", &["r_train"])], &test, &owners);
        assert!(clean.is_clean() && clean.unknown_ownership.is_empty());

        let leaky = check_leakage(&[item_card("i1", &["r_train", "r_test"])], &test, &owners);
        assert_eq!(leaky.violations.len(), 1);
        assert_eq!(leaky.violations[0].review_id, "r_test");

        let unknown = check_leakage(&[item_card("i1", &["r_missing"])], &test, &owners);
        assert!(unknown.is_clean());
        assert_eq!(unknown.unknown_ownership.len(), 1);
    }

    #[test]
    fn exclusion_removes_test_evidence() {
        let owners: BTreeMap<String, String> =
            [("a", "u1"), ("b", "u2")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let test: BTreeSet<String> = ["u2".to_string()].into();
        let cards = vec![item_card("i1", &["a", "b"]), item_card("i2", &["b"])];
        let (kept, stats) = exclude_reviews_by(&cards, &test, &owners);
        assert_eq!(kept.len(), 1);
        assert_eq!(stats, ExclusionStats { evidence_removed: 2, facets_removed: 1, cards_removed: 1 });
        assert!(check_leakage(&kept, &test, &owners).is_clean());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..200, ratio in 0.01f64..0.99, seed in any::<u64>()) {
            let users: Vec<String> = (0..n).map(|i| format!("user{i:04}")).collect();
            let split = split_users(&users, ratio, seed).unwrap();
            prop_assert!(split.train_users.is_disjoint(&split.test_users));
            prop_assert_eq!(split.train_users.len() + split.test_users.len(), n);
            prop_assert_eq!(split.train_users.len(), train_size(n, ratio));
            let all: BTreeSet<String> = split.train_users.union(&split.test_users).cloned().collect();
            prop_assert_eq!(all, users.into_iter().collect::<BTreeSet<_>>());
        }

        #[test]
        fn card_roundtrip(
            phrases in proptest::collection::btree_set("[a-z]{1,8}( [a-z]{1,8}){0,3}", 1..5),
            rating in 1.0f64..=5.0,
            time in any::<i32>(),
            sentence in "[A-Za-z ,.!']{0,40}[A-Za-z]",
        ) {
            let card = FacetCard {
                meta: CardMeta { mode: CardMode::User, entity_id: "u".into(), domain: "Books".into() },
                facets: phrases.into_iter().enumerate().map(|(i, p)| Facet {
                    facet: p,
                    polarity: if i % 2 == 0 { 1 } else { -1 },
                    support_count: i as u32 + 1,
                    evidence: vec![Evidence {
                        review_id: format!("r{i}"), rating, unix_time: time as i64, sentence: sentence.clone(),
                    }],
                }).collect(),
            };
            let reparsed = parse_card(&card.to_json_line()).unwrap();
            prop_assert_eq!(&reparsed, &card);
            prop_assert_eq!(parse_card(&reparsed.to_json_line()).unwrap(), card);
        }
    }
}
