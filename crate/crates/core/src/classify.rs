//! Classification prompts, prediction parsing, and back-mapping.
//!
//! Examples appear least-to-most similar so the strongest evidence sits
//! closest to the query. Refined mode rewrites the example labels through a
//! [`LabelMapping`] and maps the model's answer back into the original label
//! space for scoring; parsing is defensive (exact, then normalized, then
//! unique-substring) because models rarely answer with a bare label.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SplitDataset, Utterance};
use crate::embed::{group_by_intent, EmbedError, Neighbor, RetrievalSet, VectorIndex};
use crate::gateway::{ChatParams, Gateway};
use crate::refine::{refine_dynamic, LabelMapping, MappingScope, RefinementMode, validate_refined_name};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("label {0:?} matches no refined or original name")]
    UnknownLabel(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Which prompt template a prediction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Raw,
    Cot,
    Refined,
}

/// How the raw model output was matched to a candidate label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMethod {
    Exact,
    Normalized,
    Fuzzy,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: usize,
    pub raw_output: String,
    /// The label as parsed from the prompt's label space (refined mode only).
    pub predicted_refined: Option<String>,
    /// The prediction in the original label space; absent iff parsing failed.
    pub predicted_original: Option<String>,
    pub match_method: MatchMethod,
    pub mode: PromptMode,
}

/// How labels are presented to the classifier for one run.
#[derive(Debug, Clone)]
pub enum LabelStrategy<'a> {
    Raw,
    Cot,
    /// Per-query refinement in the given mode (dynamic or generic).
    RefinedDynamic(RefinementMode),
    /// A mapping computed once up front (static refinement or a loaded file).
    RefinedStatic(&'a LabelMapping),
}

impl LabelStrategy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            LabelStrategy::Raw => "raw",
            LabelStrategy::Cot => "cot",
            LabelStrategy::RefinedDynamic(RefinementMode::GenericDynamic) => "refined-generic",
            LabelStrategy::RefinedDynamic(_) => "refined-dynamic",
            LabelStrategy::RefinedStatic(_) => "refined-static",
        }
    }

    pub fn prompt_mode(&self) -> PromptMode {
        match self {
            LabelStrategy::Raw => PromptMode::Raw,
            LabelStrategy::Cot => PromptMode::Cot,
            _ => PromptMode::Refined,
        }
    }
}

const PREAMBLE_COMMON: &str = "You are an AI assistant specialized in intent classification. Your task is to determine\n\
the single most likely intent of a given query based on the examples provided.\n";

const PREAMBLE_DIRECT: &str = "Provide only the name of the most probable intent, without any additional text or explanation.\n";

const PREAMBLE_COT: &str = "For each query:\n\
1. Analyze the key elements and meaning\n\
2. Provide an explanation of your reasoning\n\
3. Extract the most likely intent\n";

fn render_examples(
    rs: &RetrievalSet,
    train: &SplitDataset,
    label_for: impl Fn(&str) -> String,
) -> Result<String, ClassifyError> {
    let mut out = String::new();
    // neighbors are sorted most-similar first; reverse for least-to-most
    for neighbor in rs.neighbors.iter().rev() {
        let u = train
            .train_by_id(neighbor.utterance_id)
            .ok_or(EmbedError::UnknownId(neighbor.utterance_id))?;
        out.push_str(&format!(
            "Text: \"{}\"\nIntent: {}\n\n",
            u.text,
            label_for(&u.intent)
        ));
    }
    Ok(out)
}

/// Render the direct classification prompt. Labels pass through `mapping`,
/// so an identity mapping yields the Raw-mode prompt.
pub fn build_classification_prompt(
    rs: &RetrievalSet,
    mapping: &LabelMapping,
    train: &SplitDataset,
) -> Result<String, ClassifyError> {
    assert!(!rs.neighbors.is_empty(), "prompt needs retrieved examples");
    let mut out = format!("{PREAMBLE_COMMON}{PREAMBLE_DIRECT}\n");
    out.push_str(&render_examples(rs, train, |intent| mapping.apply(intent))?);
    out.push_str(&format!(
        "Query: \"{}\"\nThe top 1 most likely intent is:",
        rs.query.text
    ));
    Ok(out)
}

/// Render the chain-of-thought prompt; examples keep their original labels.
pub fn build_cot_prompt(rs: &RetrievalSet, train: &SplitDataset) -> Result<String, ClassifyError> {
    assert!(!rs.neighbors.is_empty(), "prompt needs retrieved examples");
    let mut out = format!("{PREAMBLE_COMMON}{PREAMBLE_COT}\n");
    out.push_str(&render_examples(rs, train, |intent| intent.to_string())?);
    out.push_str(&format!(
        "Query: \"{}\"\nProvide your explanation and intent:",
        rs.query.text
    ));
    Ok(out)
}

/// Re-extract the `Text:`/`Intent:` pairs from a rendered prompt, in order.
/// Used to machine-check prompt structure against the retrieval that
/// produced it.
pub fn parse_prompt_examples(prompt: &str) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    let mut pending_text: Option<String> = None;
    for line in prompt.lines() {
        if let Some(text) = line.strip_prefix("Text: ") {
            pending_text = Some(text.trim_matches('"').to_string());
        } else if let Some(intent) = line.strip_prefix("Intent: ") {
            if let Some(text) = pending_text.take() {
                pairs.push((text, intent.to_string()));
            }
        }
    }
    pairs
}

fn normalize_for_match(s: &str) -> Option<String> {
    validate_refined_name(s).ok()
}

/// Match raw model output against the candidate labels.
///
/// Tries, in order: exact match of the trimmed output; equality after
/// normalizing both sides; a unique candidate in a substring relation with
/// the output. Ambiguity at the substring stage fails rather than guessing.
pub fn parse_prediction(raw: &str, candidates: &BTreeSet<String>) -> (Option<String>, MatchMethod) {
    assert!(!candidates.is_empty(), "candidate set must be non-empty");
    let trimmed = raw.trim();
    if candidates.contains(trimmed) {
        return (Some(trimmed.to_string()), MatchMethod::Exact);
    }

    if let Some(norm_out) = normalize_for_match(trimmed) {
        let matches: Vec<&String> = candidates
            .iter()
            .filter(|c| normalize_for_match(c).as_deref() == Some(norm_out.as_str()))
            .collect();
        if matches.len() == 1 {
            return (Some(matches[0].clone()), MatchMethod::Normalized);
        }
    }

    let out_lower = trimmed.to_lowercase();
    if !out_lower.is_empty() {
        let matches: Vec<&String> = candidates
            .iter()
            .filter(|c| {
                let c_lower = c.to_lowercase();
                out_lower.contains(&c_lower) || c_lower.contains(&out_lower)
            })
            .collect();
        if matches.len() == 1 {
            return (Some(matches[0].clone()), MatchMethod::Fuzzy);
        }
    }

    (None, MatchMethod::Failed)
}

/// Parse a chain-of-thought response: the fragment after the last line
/// beginning `Intent:` (case-insensitive), else the last non-empty line.
pub fn parse_cot_prediction(
    raw: &str,
    candidates: &BTreeSet<String>,
) -> (Option<String>, MatchMethod) {
    let marker = raw
        .lines()
        .rev()
        .find_map(|line| {
            let trimmed = line.trim();
            if trimmed.len() >= 7 && trimmed[..7].eq_ignore_ascii_case("intent:") {
                Some(trimmed[7..].trim().to_string())
            } else {
                None
            }
        })
        .or_else(|| {
            raw.lines()
                .rev()
                .map(str::trim)
                .find(|l| !l.is_empty())
                .map(str::to_string)
        })
        .unwrap_or_default();
    parse_prediction(&marker, candidates)
}

/// Invert a predicted label into the original space through the mapping.
pub fn map_back(predicted: &str, mapping: &LabelMapping) -> Result<String, ClassifyError> {
    mapping
        .map_back(predicted)
        .ok_or_else(|| ClassifyError::UnknownLabel(predicted.to_string()))
}

/// Everything recorded about one query, deterministic for a fixed config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub query_id: usize,
    pub query_text: String,
    pub gold_intent: String,
    pub mode: String,
    pub k: usize,
    pub model_refiner: String,
    pub model_classifier: String,
    pub retrieval: Vec<Neighbor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping: Option<LabelMapping>,
    pub refinement_failed: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refine_prompt_digests: Vec<String>,
    pub classify_prompt_digest: String,
    pub raw_output: String,
    pub predicted_refined: Option<String>,
    pub predicted_original: Option<String>,
    pub match_method: MatchMethod,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub prediction: Prediction,
    pub audit: AuditRecord,
    pub retrieval: RetrievalSet,
}

/// Per-query settings shared across one run.
#[derive(Debug, Clone)]
pub struct ClassifyRequest<'a> {
    pub k: usize,
    pub strategy: LabelStrategy<'a>,
    pub refiner: &'a ChatParams,
    pub classifier: &'a ChatParams,
}

/// Run the full per-query pipeline: retrieve, optionally refine, prompt,
/// parse, and map back. Gateway failures yield a failed prediction rather
/// than an error so one query can never abort the run.
pub fn classify_query(
    query: &Utterance,
    req: &ClassifyRequest<'_>,
    index: &VectorIndex,
    train: &SplitDataset,
    gateway: &Gateway,
) -> Result<QueryResult, ClassifyError> {
    let rs = index.retrieve_topk(query, req.k)?;
    let groups = group_by_intent(&rs, train)?;
    let prompt_mode = req.strategy.prompt_mode();

    // label mapping + refinement bookkeeping
    let (mapping, refinement_failed, refine_digests, refine_error) = match &req.strategy {
        LabelStrategy::Raw | LabelStrategy::Cot => (
            LabelMapping::identity(
                MappingScope::PerQuery { query_id: query.id },
                groups.intents(),
            ),
            false,
            Vec::new(),
            None,
        ),
        LabelStrategy::RefinedDynamic(mode) => {
            let outcome = refine_dynamic(&groups, gateway, req.refiner, *mode, query.id);
            (
                outcome.mapping,
                outcome.refinement_failed,
                outcome.prompt_digests,
                outcome.failure,
            )
        }
        LabelStrategy::RefinedStatic(mapping) => ((*mapping).clone(), false, Vec::new(), None),
    };

    let prompt = match prompt_mode {
        PromptMode::Cot => build_cot_prompt(&rs, train)?,
        _ => build_classification_prompt(&rs, &mapping, train)?,
    };
    let request = req.classifier.request(&prompt);
    let classify_prompt_digest = request.prompt_digest();

    let candidates: BTreeSet<String> = match prompt_mode {
        PromptMode::Refined => groups.intents().iter().map(|i| mapping.apply(i)).collect(),
        _ => groups.intents().into_iter().collect(),
    };

    let (raw_output, parse_result, error) = match gateway.complete_cached(&request) {
        Ok(response) => {
            let parsed = match prompt_mode {
                PromptMode::Cot => parse_cot_prediction(&response.content, &candidates),
                _ => parse_prediction(&response.content, &candidates),
            };
            (response.content, parsed, refine_error)
        }
        Err(err) => {
            log::warn!("classification call for query {} failed: {err}", query.id);
            let combined = match refine_error {
                Some(refine) => format!("{refine}; classification call failed: {err}"),
                None => format!("classification call failed: {err}"),
            };
            (String::new(), (None, MatchMethod::Failed), Some(combined))
        }
    };

    let (predicted_refined, predicted_original) = match (&parse_result.0, prompt_mode) {
        (Some(label), PromptMode::Refined) => {
            // parse only returns candidates, which are the mapping's image
            // over the retrieved intents, so back-mapping cannot miss
            let original = map_back(label, &mapping)?;
            (Some(label.clone()), Some(original))
        }
        (Some(label), _) => (None, Some(label.clone())),
        (None, _) => (None, None),
    };

    let correct = predicted_original.as_deref() == Some(query.intent.as_str());
    let prediction = Prediction {
        query_id: query.id,
        raw_output: raw_output.clone(),
        predicted_refined: predicted_refined.clone(),
        predicted_original: predicted_original.clone(),
        match_method: parse_result.1,
        mode: prompt_mode,
    };
    let audit = AuditRecord {
        query_id: query.id,
        query_text: query.text.clone(),
        gold_intent: query.intent.clone(),
        mode: req.strategy.name().to_string(),
        k: req.k,
        model_refiner: req.refiner.model.clone(),
        model_classifier: req.classifier.model.clone(),
        retrieval: rs.neighbors.clone(),
        mapping: match prompt_mode {
            PromptMode::Refined => Some(mapping),
            _ => None,
        },
        refinement_failed,
        refine_prompt_digests: refine_digests,
        classify_prompt_digest,
        raw_output,
        predicted_refined,
        predicted_original,
        match_method: parse_result.1,
        correct,
        error,
    };
    Ok(QueryResult {
        prediction,
        audit,
        retrieval: rs,
    })
}
