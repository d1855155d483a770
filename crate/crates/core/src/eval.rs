//! Metrics, reports, and the refined-label lint.
//!
//! Accuracies are exact rationals (correct / n) and all percent formatting
//! goes through integer centi-percent arithmetic, so printed values and
//! deltas never drift from the underlying counts.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::Prediction;
use crate::config::RunConfig;
use crate::corpus::{SplitDataset, Utterance};
use crate::embed::{cosine, EmbedError, EmbeddingProvider, RetrievalSet};
use crate::refine::{validate_refined_name, LabelMapping};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query {0} has no prediction")]
    MissingPrediction(usize),
    #[error("compared reports must share dataset and k")]
    MismatchedRuns,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// One run's result summary. Deterministic for a resolved config: volatile
/// observability counters (retries, cache hits) deliberately stay out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub mode: String,
    pub model_refiner: String,
    pub model_classifier: String,
    pub k: usize,
    /// Exactly n_correct / n_queries.
    pub accuracy: f64,
    pub n_queries: usize,
    pub n_correct: usize,
    pub n_failed_parse: usize,
    pub n_refinement_failed: usize,
    pub recall_at_k: f64,
    /// Queries whose gold intent has no train examples (always recall misses).
    pub n_gold_missing_from_train: usize,
    pub avg_intents_per_retrieval: f64,
    pub timestamp: String,
    /// The fully resolved configuration that produced this report.
    pub config: RunConfig,
}

/// Accuracy over the gold split; every gold query must have a prediction.
pub fn accuracy(preds: &[Prediction], gold: &[Utterance]) -> Result<f64, EvalError> {
    let (correct, n) = count_correct(preds, gold)?;
    if n == 0 {
        return Ok(0.0);
    }
    Ok(correct as f64 / n as f64)
}

/// The underlying exact counts behind `accuracy`.
pub fn count_correct(preds: &[Prediction], gold: &[Utterance]) -> Result<(usize, usize), EvalError> {
    let by_id: HashMap<usize, &Prediction> = preds.iter().map(|p| (p.query_id, p)).collect();
    let mut correct = 0usize;
    for query in gold {
        let pred = by_id
            .get(&query.id)
            .ok_or(EvalError::MissingPrediction(query.id))?;
        if pred.predicted_original.as_deref() == Some(query.intent.as_str()) {
            correct += 1;
        }
    }
    Ok((correct, gold.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: f64,
    pub n_hits: usize,
    pub n_queries: usize,
    /// Queries whose gold intent is absent from the train split; counted as
    /// misses and surfaced so they can be reported separately.
    pub n_gold_missing: usize,
}

/// Fraction of queries whose gold intent labels at least one neighbor.
pub fn recall_at_k(retrievals: &[RetrievalSet], train: &SplitDataset) -> RecallReport {
    let mut hits = 0usize;
    let mut missing = 0usize;
    for rs in retrievals {
        let gold = &rs.query.intent;
        if !train.intents.contains(gold) {
            missing += 1;
            continue;
        }
        let hit = rs.neighbors.iter().any(|n| {
            train
                .train_by_id(n.utterance_id)
                .is_some_and(|u| &u.intent == gold)
        });
        if hit {
            hits += 1;
        }
    }
    let n = retrievals.len();
    RecallReport {
        recall: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        n_hits: hits,
        n_queries: n,
        n_gold_missing: missing,
    }
}

/// Mean number of distinct intents among each query's neighbors.
pub fn avg_intents_per_retrieval(retrievals: &[RetrievalSet], train: &SplitDataset) -> f64 {
    assert!(!retrievals.is_empty(), "needs at least one retrieval");
    let total: usize = retrievals
        .iter()
        .map(|rs| {
            rs.neighbors
                .iter()
                .filter_map(|n| train.train_by_id(n.utterance_id).map(|u| u.intent.as_str()))
                .collect::<BTreeSet<_>>()
                .len()
        })
        .sum();
    total as f64 / retrievals.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSetKind {
    Original,
    Refined,
}

/// Pairwise cosine similarity over a label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub label_set_kind: LabelSetKind,
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    /// Mean over the strict upper triangle (unordered pairs).
    pub avg_pairwise: f64,
}

/// Embed every label and compute the full pairwise cosine matrix.
pub fn label_similarity_matrix(
    labels: &[String],
    kind: LabelSetKind,
    provider: &dyn EmbeddingProvider,
) -> Result<SimilarityReport, EvalError> {
    assert!(labels.len() >= 2, "similarity needs at least two labels");
    let texts: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
    let vectors = provider.embed(&texts)?;

    let n = labels.len();
    let mut matrix = vec![vec![0.0f64; n]; n];
    let mut sum = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..n {
        matrix[i][i] = cosine(&vectors[i], &vectors[i])?;
        for j in (i + 1)..n {
            let sim = cosine(&vectors[i], &vectors[j])?;
            matrix[i][j] = sim;
            matrix[j][i] = sim;
            sum += sim;
            pairs += 1;
        }
    }
    Ok(SimilarityReport {
        label_set_kind: kind,
        labels: labels.to_vec(),
        matrix,
        avg_pairwise: sum / pairs as f64,
    })
}

/// Round-half-up centi-percent (hundredths of a percent) from exact counts.
pub fn centi_pct_from_counts(correct: usize, n: usize) -> i64 {
    if n == 0 {
        return 0;
    }
    ((20_000 * correct as u128 + n as u128) / (2 * n as u128)) as i64
}

/// Centi-percent from a percentage like 85.88.
pub fn centi_pct_from_percentage(pct: f64) -> i64 {
    (pct * 100.0).round() as i64
}

/// Render a centi-percent value as `x.xx` (or `-x.xx`).
pub fn format_centi_pct(cp: i64) -> String {
    if cp < 0 {
        return format!("-{}", format_centi_pct(-cp));
    }
    format!("{}.{:02}", cp / 100, cp % 100)
}

/// Signed delta between two percentages, e.g. `+2.07` for (85.88, 87.95).
pub fn format_delta_pct(baseline_pct: f64, other_pct: f64) -> String {
    let delta = centi_pct_from_percentage(other_pct) - centi_pct_from_percentage(baseline_pct);
    format_signed_centi(delta)
}

fn format_signed_centi(delta_cp: i64) -> String {
    if delta_cp < 0 {
        format!("-{}", format_centi_pct(-delta_cp))
    } else {
        format!("+{}", format_centi_pct(delta_cp))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: String,
    /// Accuracy in percent, centi-exact, e.g. "85.88".
    pub accuracy_pct: String,
    /// Signed delta vs the baseline row, e.g. "(+2.07)"; empty for baseline.
    pub delta: String,
}

/// Mode-by-mode accuracy table with deltas against the Raw baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub dataset: String,
    pub k: usize,
    pub rows: Vec<ComparisonRow>,
}

/// Compare runs that share dataset and k. The baseline is the first report
/// in `raw` mode, or the first report if none is.
pub fn compare_modes(reports: &[EvaluationReport]) -> Result<ComparisonTable, EvalError> {
    let first = reports.first().ok_or(EvalError::MismatchedRuns)?;
    if reports
        .iter()
        .any(|r| r.dataset != first.dataset || r.k != first.k)
    {
        return Err(EvalError::MismatchedRuns);
    }
    let baseline = reports.iter().find(|r| r.mode == "raw").unwrap_or(first);
    let baseline_cp = centi_pct_from_counts(baseline.n_correct, baseline.n_queries);

    let rows = reports
        .iter()
        .map(|r| {
            let cp = centi_pct_from_counts(r.n_correct, r.n_queries);
            let delta = if std::ptr::eq(r, baseline) {
                String::new()
            } else {
                format!("({})", format_signed_centi(cp - baseline_cp))
            };
            ComparisonRow {
                mode: r.mode.clone(),
                accuracy_pct: format_centi_pct(cp),
                delta,
            }
        })
        .collect();
    Ok(ComparisonTable {
        dataset: first.dataset.clone(),
        k: first.k,
        rows,
    })
}

impl std::fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mode_width = self
            .rows
            .iter()
            .map(|r| r.mode.len())
            .chain(["mode".len()])
            .max()
            .unwrap_or(4);
        writeln!(f, "dataset: {}  k: {}", self.dataset, self.k)?;
        writeln!(f, "{:<mode_width$}  {:>8}  delta", "mode", "accuracy")?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<mode_width$}  {:>8}  {}",
                row.mode, row.accuracy_pct, row.delta
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LintKind {
    /// Refined name is a normalized copy of a source utterance.
    VerbatimQuery,
    /// Refined name is too long or starts with a query-like stem.
    Verbose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LintFinding {
    pub original: String,
    pub refined: String,
    pub kind: LintKind,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct LintOptions {
    /// Names longer than this many underscore-separated words are verbose.
    pub max_words: usize,
    /// First words that mark a name as query-like.
    pub stems: BTreeSet<String>,
}

impl Default for LintOptions {
    fn default() -> Self {
        Self {
            max_words: 6,
            stems: ["how", "what", "i", "can", "please"]
                .into_iter()
                .map(str::to_string)
                .collect(),
        }
    }
}

/// Flag suspicious refined names: verbatim query copies and over-verbose
/// names. Identity entries are never flagged; at most one finding per entry
/// (verbatim wins over verbose).
pub fn lint_refined_labels(
    mapping: &LabelMapping,
    source_texts: &BTreeMap<String, Vec<String>>,
    options: &LintOptions,
) -> Vec<LintFinding> {
    let mut findings = Vec::new();
    for (original, refined) in &mapping.entries {
        if original == refined {
            continue;
        }
        let verbatim_source = source_texts.get(original).and_then(|texts| {
            texts
                .iter()
                .find(|t| validate_refined_name(t).ok().as_deref() == Some(refined.as_str()))
        });
        if let Some(source) = verbatim_source {
            findings.push(LintFinding {
                original: original.clone(),
                refined: refined.clone(),
                kind: LintKind::VerbatimQuery,
                detail: format!("copies the utterance {source:?}"),
            });
            continue;
        }
        let words: Vec<&str> = refined.split('_').filter(|w| !w.is_empty()).collect();
        if words.len() > options.max_words {
            findings.push(LintFinding {
                original: original.clone(),
                refined: refined.clone(),
                kind: LintKind::Verbose,
                detail: format!("{} words exceeds the limit of {}", words.len(), options.max_words),
            });
        } else if words.first().is_some_and(|w| options.stems.contains(*w)) {
            findings.push(LintFinding {
                original: original.clone(),
                refined: refined.clone(),
                kind: LintKind::Verbose,
                detail: format!("starts with the query-like stem {:?}", words[0]),
            });
        }
    }
    findings
}
