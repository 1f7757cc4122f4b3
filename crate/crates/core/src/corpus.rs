//! Dataset ingestion: HotpotQA dev, NQ-open, exclusion lists and label files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{ConsistencyLabel, FactualityLabel, QaItem, QaSource};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("record `{id}` is missing field `{field}`")]
    MissingField { id: String, field: &'static str },
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, message: impl ToString) -> CorpusError {
    CorpusError::Parse {
        path: path.to_owned(),
        line,
        message: message.to_string(),
    }
}

fn check_unique(items: &[QaItem]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for it in items {
        if it.id.is_empty() {
            return Err(CorpusError::MissingField {
                id: "<empty>".into(),
                field: "id",
            });
        }
        if !seen.insert(it.id.as_str()) {
            return Err(CorpusError::DuplicateId(it.id.clone()));
        }
    }
    Ok(())
}

fn str_field(rec: &Value, field: &'static str, id: &str) -> Result<String, CorpusError> {
    match rec.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        _ => Err(CorpusError::MissingField { id: id.to_owned(), field }),
    }
}

/// Loads the upstream HotpotQA dev JSON array (`_id`, `question`, `answer`).
pub fn load_hotpotqa(path: &Path) -> Result<Vec<QaItem>, CorpusError> {
    let records: Vec<Value> = serde_json::from_str(&read(path)?).map_err(|e| parse_err(path, e.line(), e))?;
    let mut items = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let id = match rec.get("_id") {
            Some(Value::String(s)) => s.clone(),
            _ => {
                return Err(CorpusError::MissingField {
                    id: format!("record #{i}"),
                    field: "_id",
                })
            }
        };
        let question = str_field(rec, "question", &id)?;
        let answer = str_field(rec, "answer", &id)?;
        items.push(QaItem::new(id, question, vec![answer], QaSource::HotpotQA));
    }
    check_unique(&items)?;
    Ok(items)
}

#[derive(Deserialize)]
struct NqRecord {
    #[serde(default)]
    id: Option<Value>,
    question: String,
    answer: Vec<String>,
}

/// Loads NQ-open JSONL (`question`, `answer` list, optional `id`). Lines
/// without an id get `nq-<line index>`. Also returns the number of blank
/// lines skipped.
pub fn load_nq_open_counted(path: &Path) -> Result<(Vec<QaItem>, usize), CorpusError> {
    let text = read(path)?;
    let mut items = Vec::new();
    let mut blank = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            blank += 1;
            continue;
        }
        let rec: NqRecord = serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e))?;
        let id = match rec.id {
            Some(Value::String(s)) => s,
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("nq-{}", i - blank),
        };
        items.push(QaItem::new(id, rec.question, rec.answer, QaSource::NqOpen));
    }
    if blank > 0 {
        log::warn!("{}: skipped {blank} blank line(s)", path.display());
    }
    check_unique(&items)?;
    Ok((items, blank))
}

pub fn load_nq_open(path: &Path) -> Result<Vec<QaItem>, CorpusError> {
    load_nq_open_counted(path).map(|(items, _)| items)
}

/// Canonical QaItem JSONL, as written by `items_to_jsonl`.
pub fn load_items_jsonl(path: &Path) -> Result<Vec<QaItem>, CorpusError> {
    let text = read(path)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e))?);
    }
    check_unique(&items)?;
    Ok(items)
}

pub fn items_to_jsonl(items: &[QaItem]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("QaItem serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Hotpotqa,
    NqOpen,
    Items,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<QaItem>, CorpusError> {
    match format {
        CorpusFormat::Hotpotqa => load_hotpotqa(path),
        CorpusFormat::NqOpen => load_nq_open(path),
        CorpusFormat::Items => load_items_jsonl(path),
    }
}

/// One id per line; blank lines and `#` comments are ignored.
pub fn read_id_list(path: &Path) -> Result<Vec<String>, CorpusError> {
    Ok(read(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub items: Vec<QaItem>,
    pub excluded: usize,
    pub unknown_ids: Vec<String>,
}

pub fn apply_exclusions(items: Vec<QaItem>, exclusion_ids: &[String]) -> Exclusion {
    let mut wanted: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for id in exclusion_ids {
        if seen.insert(id.as_str()) {
            wanted.push(id);
        }
    }
    let present: HashSet<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let unknown_ids: Vec<String> = wanted
        .iter()
        .filter(|id| !present.contains(*id))
        .map(|id| id.to_string())
        .collect();
    for id in &unknown_ids {
        log::warn!("exclusion id `{id}` matches no item");
    }
    let before = items.len();
    let kept: Vec<QaItem> = items.into_iter().filter(|i| !seen.contains(i.id.as_str())).collect();
    Exclusion {
        excluded: before - kept.len(),
        items: kept,
        unknown_ids,
    }
}

fn factuality_of(v: &Value) -> Option<FactualityLabel> {
    match v {
        Value::Bool(true) => Some(FactualityLabel::Factual),
        Value::Bool(false) => Some(FactualityLabel::NonFactual),
        Value::String(s) => match s.to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "factual" | "true" => Some(FactualityLabel::Factual),
            "nonfactual" | "false" | "hallucinated" => Some(FactualityLabel::NonFactual),
            _ => None,
        },
        _ => None,
    }
}

fn consistency_of(v: &Value) -> Option<ConsistencyLabel> {
    match v {
        Value::Bool(true) => Some(ConsistencyLabel::Consistent),
        Value::Bool(false) => Some(ConsistencyLabel::NonConsistent),
        Value::String(s) => match s.to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "consistent" | "true" => Some(ConsistencyLabel::Consistent),
            "nonconsistent" | "inconsistent" | "false" => Some(ConsistencyLabel::NonConsistent),
            _ => None,
        },
        _ => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct LabelRecord {
    factuality: Option<FactualityLabel>,
    consistency: BTreeMap<String, ConsistencyLabel>,
    response_factuality: BTreeMap<String, FactualityLabel>,
}

fn label_map<T>(
    rec: &Value,
    field: &str,
    conv: fn(&Value) -> Option<T>,
    path: &Path,
    line: usize,
) -> Result<BTreeMap<String, T>, CorpusError> {
    match rec.get(field) {
        None | Some(Value::Null) => Ok(BTreeMap::new()),
        Some(Value::Object(m)) => m
            .iter()
            .map(|(k, v)| {
                conv(v)
                    .map(|l| (k.clone(), l))
                    .ok_or_else(|| parse_err(path, line, format!("bad `{field}` value for `{k}`: {v}")))
            })
            .collect(),
        Some(other) => Err(parse_err(path, line, format!("`{field}` must be an object, got {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMerge {
    pub items: Vec<QaItem>,
    pub unknown_ids: Vec<String>,
    pub labeled: usize,
}

/// Attaches labels from JSONL records
/// `{id, factuality, consistency: {expression_id: bool}, response_factuality?}`.
/// Factuality may be a bool (true = factual) or a label string. Identical
/// duplicate records are accepted; conflicting ones are a parse error.
pub fn merge_labels(mut items: Vec<QaItem>, labels_path: &Path) -> Result<LabelMerge, CorpusError> {
    let text = read(labels_path)?;
    let mut records: BTreeMap<String, (usize, LabelRecord)> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Value = serde_json::from_str(line).map_err(|e| parse_err(labels_path, ln, e))?;
        let id = match rec.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(parse_err(labels_path, ln, "label record has no `id`")),
        };
        let factuality = match rec.get("factuality") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                factuality_of(v).ok_or_else(|| parse_err(labels_path, ln, format!("bad factuality value {v}")))?,
            ),
        };
        let parsed = LabelRecord {
            factuality,
            consistency: label_map(&rec, "consistency", consistency_of, labels_path, ln)?,
            response_factuality: label_map(&rec, "response_factuality", factuality_of, labels_path, ln)?,
        };
        match records.get(&id) {
            Some((first, prev)) if *prev != parsed => {
                return Err(parse_err(
                    labels_path,
                    ln,
                    format!("conflicting labels for `{id}` (first at line {first})"),
                ))
            }
            Some(_) => {}
            None => {
                order.push(id.clone());
                records.insert(id, (ln, parsed));
            }
        }
    }

    let index: HashMap<String, usize> = items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
    let mut unknown_ids = Vec::new();
    let mut labeled = 0;
    for id in order {
        let (_, rec) = &records[&id];
        let Some(&idx) = index.get(&id) else {
            log::warn!("label for unknown id `{id}`");
            unknown_ids.push(id);
            continue;
        };
        let item = &mut items[idx];
        if rec.factuality.is_some() {
            item.factuality_label = rec.factuality;
        }
        if !rec.consistency.is_empty() {
            item.consistency_label
                .get_or_insert_with(BTreeMap::new)
                .extend(rec.consistency.clone());
        }
        if !rec.response_factuality.is_empty() {
            item.response_factuality
                .get_or_insert_with(BTreeMap::new)
                .extend(rec.response_factuality.clone());
        }
        labeled += 1;
    }
    Ok(LabelMerge {
        items,
        unknown_ids,
        labeled,
    })
}

/// Seeded subset of `size` items, kept in corpus order.
pub fn sample_subset(items: Vec<QaItem>, seed: u64, size: usize) -> Vec<QaItem> {
    if size >= items.len() {
        return items;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, items.len(), size).into_vec();
    chosen.sort_unstable();
    let mut keep = vec![false; items.len()];
    for i in chosen {
        keep[i] = true;
    }
    items.into_iter().zip(keep).filter(|(_, k)| *k).map(|(it, _)| it).collect()
}
