//! Dataset loading, k-shot sampling, and out-of-scope filtering.
//!
//! A dataset lives in a directory holding `train.csv`/`test.csv` (header
//! `sentence,label`, RFC 4180 quoting) or `train.jsonl`/`test.jsonl`
//! (one `{"text": ..., "intent": ...}` object per line). Splits are
//! immutable after loading; sampling and filtering return new values.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// One labeled example. Ids are assigned in file order at load time and
/// stay stable through sampling, so they double as tie-breakers downstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: usize,
    pub text: String,
    pub intent: String,
}

/// An immutable train/test split plus the train-side intent inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub name: String,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub intents: BTreeSet<String>,
}

/// Controls k-shot sampling and which labels are dropped from the test set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub shots_per_intent: usize,
    pub seed: u64,
    pub oos_labels: BTreeSet<String>,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            shots_per_intent: 10,
            seed: 0,
            oos_labels: BTreeSet::from(["NO_NODES_DETECTED".to_string()]),
        }
    }
}

/// Input file format for a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl DataFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Jsonl => "jsonl",
        }
    }
}

impl std::str::FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "jsonl" => Ok(DataFormat::Jsonl),
            other => Err(format!("unknown dataset format `{other}` (expected csv or jsonl)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("dataset has no usable rows: {0}")]
    EmptyDataset(String),
    #[error("missing header with `sentence` and `label` columns in {0}")]
    BadHeader(String),
    #[error("dataset path {0} must be a directory containing train.{1} and test.{1}")]
    NotADirectory(String, &'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SplitDataset {
    /// Look up a train utterance by id. Train ids are ascending by
    /// construction, so this is a binary search.
    pub fn train_by_id(&self, id: usize) -> Option<&Utterance> {
        self.train
            .binary_search_by_key(&id, |u| u.id)
            .ok()
            .map(|pos| &self.train[pos])
    }

    /// Test intents that have no train examples at all (excluded OOS labels
    /// aside, these can only ever score as retrieval misses).
    pub fn test_only_intents(&self) -> BTreeSet<String> {
        self.test
            .iter()
            .map(|u| u.intent.clone())
            .filter(|i| !self.intents.contains(i))
            .collect()
    }

    fn recompute_intents(train: &[Utterance]) -> BTreeSet<String> {
        train.iter().map(|u| u.intent.clone()).collect()
    }
}

/// Load a train/test split from a directory.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<SplitDataset, CorpusError> {
    let ext = format.extension();
    if !path.is_dir() {
        return Err(CorpusError::NotADirectory(path.display().to_string(), ext));
    }
    let train_path = path.join(format!("train.{ext}"));
    let test_path = path.join(format!("test.{ext}"));
    let train = load_utterances(&train_path, format)?;
    let test = load_utterances(&test_path, format)?;
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let intents = SplitDataset::recompute_intents(&train);
    Ok(SplitDataset {
        name,
        train,
        test,
        intents,
    })
}

/// Load one split file. Ids are assigned 0..n-1 in file order; duplicate
/// rows are kept.
pub fn load_utterances(path: &Path, format: DataFormat) -> Result<Vec<Utterance>, CorpusError> {
    let content = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let rows = match format {
        DataFormat::Csv => parse_csv(&content, path)?,
        DataFormat::Jsonl => parse_jsonl(&content)?,
    };
    if rows.is_empty() {
        return Err(CorpusError::EmptyDataset(path.display().to_string()));
    }
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(id, (text, intent))| Utterance { id, text, intent })
        .collect())
}

fn parse_csv(content: &str, path: &Path) -> Result<Vec<(String, String)>, CorpusError> {
    if content.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(content.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::BadHeader(format!("{}: {e}", path.display())))?;
    let text_col = headers.iter().position(|h| h.trim() == "sentence");
    let label_col = headers.iter().position(|h| h.trim() == "label");
    let (text_col, label_col) = match (text_col, label_col) {
        (Some(t), Some(l)) => (t, l),
        _ => return Err(CorpusError::BadHeader(path.display().to_string())),
    };

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(0);
            CorpusError::MalformedRow {
                line,
                reason: e.to_string(),
            }
        })?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(0);
        let text = record.get(text_col).unwrap_or("").trim();
        let intent = record.get(label_col).unwrap_or("").trim();
        if text.is_empty() {
            return Err(CorpusError::MalformedRow {
                line,
                reason: "empty sentence field".to_string(),
            });
        }
        if intent.is_empty() {
            return Err(CorpusError::MalformedRow {
                line,
                reason: "empty label field".to_string(),
            });
        }
        rows.push((text.to_string(), intent.to_string()));
    }
    Ok(rows)
}

fn parse_jsonl(content: &str) -> Result<Vec<(String, String)>, CorpusError> {
    #[derive(Deserialize)]
    struct Row {
        text: Option<String>,
        intent: Option<String>,
    }

    let mut rows = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(raw).map_err(|e| CorpusError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        let text = row.text.as_deref().unwrap_or("").trim();
        let intent = row.intent.as_deref().unwrap_or("").trim();
        if text.is_empty() || intent.is_empty() {
            return Err(CorpusError::MalformedRow {
                line,
                reason: "missing or empty `text`/`intent` key".to_string(),
            });
        }
        rows.push((text.to_string(), intent.to_string()));
    }
    Ok(rows)
}

/// Per intent, keep at most `shots_per_intent` train examples, chosen by a
/// seeded shuffle of that intent's rows. File order (and ids) of the kept
/// rows is preserved. Deterministic given the same dataset and spec.
pub fn kshot_sample(ds: &SplitDataset, spec: &SamplingSpec) -> SplitDataset {
    let mut by_intent: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (pos, u) in ds.train.iter().enumerate() {
        by_intent.entry(&u.intent).or_default().push(pos);
    }

    let mut keep = vec![false; ds.train.len()];
    for (intent, positions) in &by_intent {
        if positions.len() <= spec.shots_per_intent {
            for &p in positions {
                keep[p] = true;
            }
            continue;
        }
        let mut shuffled = positions.clone();
        let mut rng = intent_rng(spec.seed, intent);
        shuffled.shuffle(&mut rng);
        for &p in shuffled.iter().take(spec.shots_per_intent) {
            keep[p] = true;
        }
    }

    let train: Vec<Utterance> = ds
        .train
        .iter()
        .enumerate()
        .filter(|(pos, _)| keep[*pos])
        .map(|(_, u)| u.clone())
        .collect();
    let intents = SplitDataset::recompute_intents(&train);
    SplitDataset {
        name: ds.name.clone(),
        train,
        test: ds.test.clone(),
        intents,
    }
}

/// Drop test utterances whose intent is in `spec.oos_labels`. Train is
/// untouched.
pub fn exclude_oos(ds: &SplitDataset, spec: &SamplingSpec) -> SplitDataset {
    let test: Vec<Utterance> = ds
        .test
        .iter()
        .filter(|u| !spec.oos_labels.contains(&u.intent))
        .cloned()
        .collect();
    SplitDataset {
        name: ds.name.clone(),
        train: ds.train.clone(),
        test,
        intents: ds.intents.clone(),
    }
}

/// Convenience composition: load, sample, filter.
pub fn load_and_prepare(
    path: &Path,
    format: DataFormat,
    spec: &SamplingSpec,
) -> Result<SplitDataset, CorpusError> {
    let ds = load_dataset(path, format)?;
    let ds = kshot_sample(&ds, spec);
    Ok(exclude_oos(&ds, spec))
}

// Stable cross-platform per-intent stream: ChaCha keyed off a SHA-256 of
// (seed, intent) so every intent shuffles independently.
fn intent_rng(seed: u64, intent: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(intent.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 8];
    key.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(key))
}
