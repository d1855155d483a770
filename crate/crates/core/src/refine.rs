//! Label refinement: rewrite ambiguous intent names guided by examples.
//!
//! Given a query's retrieved examples grouped by intent, a renaming prompt
//! asks the chat backend to keep each intent name or propose a clearer one.
//! The response is parsed into a [`LabelMapping`], names are normalized to
//! `[a-z0-9_]`, and collisions are resolved so the mapping stays invertible.
//! Any failure degrades to an identity mapping — one bad generation must
//! never abort an evaluation run.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SplitDataset;
use crate::embed::{IntentGroup, IntentGroupSet};
use crate::gateway::{ChatParams, Gateway};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("no intent mapping lines found in response: {0:?}")]
    UnparseableResponse(String),
    #[error("refined name {0:?} normalizes to an empty string")]
    InvalidName(String),
}

/// What a mapping was built for: one query's retrieval, or the whole split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingScope {
    PerQuery { query_id: usize },
    Static,
}

/// How labels are refined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementMode {
    /// Per-query renaming that shows the model the original names.
    Dynamic,
    /// One renaming pass over the whole train split, reused by every query.
    Static,
    /// Per-query renaming with originals hidden behind Intent_1..Intent_n.
    GenericDynamic,
}

impl RefinementMode {
    pub fn preserve_original_names(self) -> bool {
        !matches!(self, RefinementMode::GenericDynamic)
    }
}

impl std::str::FromStr for RefinementMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamic" => Ok(RefinementMode::Dynamic),
            "static" => Ok(RefinementMode::Static),
            "generic_dynamic" | "generic-dynamic" => Ok(RefinementMode::GenericDynamic),
            other => Err(format!("unknown refinement mode {other:?}")),
        }
    }
}

/// Map from original intent names to refined ones.
///
/// In anonymized mode the entry keys are the generic identifiers shown to
/// the model, and `generic_table` records which original each stands for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub scope: MappingScope,
    pub anonymized: bool,
    pub entries: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generic_table: Option<BTreeMap<String, String>>,
}

impl LabelMapping {
    /// Mapping that leaves every label unchanged.
    pub fn identity<I, S>(scope: MappingScope, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries = labels
            .into_iter()
            .map(|l| {
                let l = l.into();
                (l.clone(), l)
            })
            .collect();
        Self {
            scope,
            anonymized: false,
            entries,
            generic_table: None,
        }
    }

    /// Refined name for an original label; unknown labels pass through.
    pub fn apply(&self, label: &str) -> String {
        if self.anonymized {
            if let Some(table) = &self.generic_table {
                if let Some((generic, _)) = table.iter().find(|(_, orig)| orig.as_str() == label) {
                    if let Some(refined) = self.entries.get(generic) {
                        return refined.clone();
                    }
                }
            }
        }
        self.entries
            .get(label)
            .cloned()
            .unwrap_or_else(|| label.to_string())
    }

    /// Invert a predicted label back into the original space.
    ///
    /// Checks, in order: a refined name (reverse entry lookup), a generic
    /// identifier, then a passthrough original. `None` means the label
    /// matches nothing the mapping knows about.
    pub fn map_back(&self, predicted: &str) -> Option<String> {
        if self.anonymized {
            let table = self.generic_table.as_ref()?;
            if let Some((generic, _)) = self
                .entries
                .iter()
                .find(|(_, refined)| refined.as_str() == predicted)
            {
                if let Some(original) = table.get(generic) {
                    return Some(original.clone());
                }
            }
            if let Some(original) = table.get(predicted) {
                return Some(original.clone());
            }
            if table.values().any(|orig| orig == predicted) {
                return Some(predicted.to_string());
            }
            return None;
        }
        if let Some((original, _)) = self
            .entries
            .iter()
            .find(|(_, refined)| refined.as_str() == predicted)
        {
            return Some(original.clone());
        }
        if self.entries.contains_key(predicted) {
            return Some(predicted.to_string());
        }
        None
    }

    /// The refined label set, i.e. what classification prompts display.
    pub fn image(&self) -> BTreeSet<String> {
        self.entries.values().cloned().collect()
    }

    pub fn is_injective(&self) -> bool {
        self.image().len() == self.entries.len()
    }

    /// True when every given label has an entry.
    pub fn is_total_over<'a, I: IntoIterator<Item = &'a str>>(&self, labels: I) -> bool {
        labels.into_iter().all(|l| {
            if self.anonymized {
                self.generic_table
                    .as_ref()
                    .is_some_and(|t| t.values().any(|orig| orig == l))
            } else {
                self.entries.contains_key(l)
            }
        })
    }
}

/// Result of one refinement attempt. Never an error: failures degrade to an
/// identity mapping with the reason recorded.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub mapping: LabelMapping,
    pub refinement_failed: bool,
    /// Why refinement fell back to identity, when it did.
    pub failure: Option<String>,
    pub prompt_digests: Vec<String>,
    pub raw_responses: Vec<String>,
}

const RULES_BLOCK: &str = "Rules for intent mapping:\n\
1. If the current intent name accurately represents its examples, map it to itself\n\
2. If the intent name needs improvement, create a new descriptive name that better represents the examples\n\
3. For new names:\n\
\x20\x20\x20- Use lowercase letters only\n\
\x20\x20\x20- Use underscores between words\n";

/// Generic identifier for the 1-based group position.
pub fn generic_id(position: usize) -> String {
    format!("Intent_{position}")
}

/// Render the renaming prompt for a set of intent groups.
///
/// In generic mode every original name is replaced by `Intent_<n>` in group
/// order, so nothing about the original naming reaches the model.
pub fn build_renaming_prompt(groups: &IntentGroupSet, mode: RefinementMode) -> String {
    assert!(!groups.groups.is_empty(), "renaming prompt needs groups");
    let display_name = |i: usize, group: &IntentGroup| {
        if mode.preserve_original_names() {
            group.intent.clone()
        } else {
            generic_id(i + 1)
        }
    };

    let mut out = String::from("Examples by intent:\n");
    for (i, group) in groups.groups.iter().enumerate() {
        out.push_str(&format!("Intent {}: {}\n", i + 1, display_name(i, group)));
        for member in &group.members {
            out.push_str(&format!("- {}\n", member.text));
        }
        out.push('\n');
    }
    out.push_str(RULES_BLOCK);
    out.push_str("\nINTENT MAPPINGS:\n");
    for (i, group) in groups.groups.iter().enumerate() {
        out.push_str(&format!("{} ->\n", display_name(i, group)));
    }
    out.pop();
    out
}

/// Parse `<old> -> <new>` lines out of a renaming response.
///
/// Unknown old-names are ignored with a warning; expected names that never
/// appear (or appear with an empty right side) fall back to identity with a
/// warning. Errors only when the response contains no mapping-shaped line.
pub fn parse_mappings(
    response: &str,
    expected: &[String],
) -> Result<BTreeMap<String, String>, RefineError> {
    assert!(!expected.is_empty(), "expected names must be non-empty");
    let known: BTreeSet<&str> = expected.iter().map(|s| s.as_str()).collect();
    let mut parsed: BTreeMap<String, String> = BTreeMap::new();
    let mut mapping_lines = 0usize;
    for line in response.lines() {
        let Some((old, new)) = line.split_once("->") else {
            continue;
        };
        let old = old.trim();
        let new = new.trim();
        if old.is_empty() {
            continue;
        }
        mapping_lines += 1;
        if !known.contains(old) {
            log::warn!("ignoring mapping for unknown intent {old:?}");
            continue;
        }
        if new.is_empty() {
            // echoed stub: the model made no decision for this intent
            continue;
        }
        parsed.insert(old.to_string(), new.to_string());
    }
    if mapping_lines == 0 {
        let snippet: String = response.chars().take(120).collect();
        return Err(RefineError::UnparseableResponse(snippet));
    }
    for name in expected {
        if !parsed.contains_key(name) {
            log::warn!("no mapping returned for {name:?}; keeping original");
            parsed.insert(name.clone(), name.clone());
        }
    }
    Ok(parsed)
}

/// Normalize a proposed name to `[a-z0-9_]+`.
pub fn validate_refined_name(name: &str) -> Result<String, RefineError> {
    let mut out = String::new();
    for ch in name.trim().to_lowercase().chars() {
        match ch {
            ' ' | '-' => out.push('_'),
            'a'..='z' | '0'..='9' | '_' => out.push(ch),
            _ => {}
        }
    }
    let mut collapsed = String::with_capacity(out.len());
    for ch in out.chars() {
        if ch == '_' && collapsed.ends_with('_') {
            continue;
        }
        collapsed.push(ch);
    }
    let trimmed = collapsed.trim_matches('_');
    if trimmed.is_empty() {
        return Err(RefineError::InvalidName(name.to_string()));
    }
    Ok(trimmed.to_string())
}

/// Normalize every proposed name, keeping identity entries verbatim so that
/// a mapping that changes nothing really changes nothing. A proposal that
/// normalizes to nothing falls back to identity with a warning.
pub fn validate_entries(entries: BTreeMap<String, String>) -> BTreeMap<String, String> {
    entries
        .into_iter()
        .map(|(old, proposed)| {
            if proposed == old {
                return (old.clone(), old);
            }
            match validate_refined_name(&proposed) {
                Ok(normalized) => (old, normalized),
                Err(_) => {
                    log::warn!("proposed name {proposed:?} for {old:?} is invalid; keeping original");
                    (old.clone(), old)
                }
            }
        })
        .collect()
}

/// Make a mapping injective.
///
/// When several originals claim one refined name, the winner is the original
/// that already owns the name (identity entry) if there is one, otherwise
/// the lexicographically earliest original; every other claimant reverts to
/// identity. Reverting can create new collisions (a reverted original's own
/// name may itself be claimed), so the rule iterates to a fixpoint. Each
/// round converts at least one non-identity entry to identity, so it
/// terminates — in the worst case at the all-identity mapping, which is
/// injective because originals are distinct.
pub fn resolve_collisions(mut entries: BTreeMap<String, String>) -> BTreeMap<String, String> {
    loop {
        let mut by_refined: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (old, new) in &entries {
            by_refined.entry(new.as_str()).or_default().push(old.as_str());
        }
        let mut reverts: Vec<String> = Vec::new();
        for (refined, originals) in &by_refined {
            if originals.len() < 2 {
                continue;
            }
            // BTreeMap iteration already sorted the claimants
            let winner = originals
                .iter()
                .find(|o| *o == refined)
                .copied()
                .unwrap_or(originals[0]);
            for original in originals {
                if *original != winner {
                    reverts.push(original.to_string());
                }
            }
        }
        if reverts.is_empty() {
            return entries;
        }
        for original in reverts {
            log::warn!("refined name collision: reverting {original:?} to identity");
            entries.insert(original.clone(), original);
        }
    }
}

fn identity_outcome(
    scope: MappingScope,
    originals: &[String],
    reason: String,
    prompt_digests: Vec<String>,
    raw_responses: Vec<String>,
) -> RefineOutcome {
    RefineOutcome {
        mapping: LabelMapping::identity(scope, originals.iter().cloned()),
        refinement_failed: true,
        failure: Some(reason),
        prompt_digests,
        raw_responses,
    }
}

/// Refine the labels of one query's intent groups.
///
/// Infallible by design: gateway errors and unparseable responses degrade to
/// an identity mapping over the original names (classification then behaves
/// exactly like Raw mode for this query) with `refinement_failed` set.
pub fn refine_dynamic(
    groups: &IntentGroupSet,
    gateway: &Gateway,
    params: &ChatParams,
    mode: RefinementMode,
    query_id: usize,
) -> RefineOutcome {
    let scope = MappingScope::PerQuery { query_id };
    let originals: Vec<String> = groups.intents();
    let anonymized = !mode.preserve_original_names();

    let display_names: Vec<String> = if anonymized {
        (1..=originals.len()).map(generic_id).collect()
    } else {
        originals.clone()
    };
    let generic_table: Option<BTreeMap<String, String>> = anonymized.then(|| {
        display_names
            .iter()
            .cloned()
            .zip(originals.iter().cloned())
            .collect()
    });

    let prompt = build_renaming_prompt(groups, mode);
    let request = params.request(&prompt);
    let digest = request.prompt_digest();

    let response = match gateway.complete_cached(&request) {
        Ok(response) => response,
        Err(err) => {
            return identity_outcome(
                scope,
                &originals,
                format!("renaming call failed: {err}"),
                vec![digest],
                vec![],
            )
        }
    };
    let entries = match parse_mappings(&response.content, &display_names) {
        Ok(entries) => entries,
        Err(err) => {
            return identity_outcome(
                scope,
                &originals,
                err.to_string(),
                vec![digest],
                vec![response.content],
            )
        }
    };
    let entries = resolve_collisions(validate_entries(entries));
    RefineOutcome {
        mapping: LabelMapping {
            scope,
            anonymized,
            entries,
            generic_table,
        },
        refinement_failed: false,
        failure: None,
        prompt_digests: vec![digest],
        raw_responses: vec![response.content],
    }
}

pub const DEFAULT_STATIC_BATCH: usize = 10;

/// Refine the whole train split's labels once, in batches of at most
/// `batch_size` intents per prompt, merging and resolving globally.
///
/// A failed batch keeps its original names; other batches' refinements
/// survive, and the outcome is marked failed with the reason.
pub fn refine_static(
    train: &SplitDataset,
    gateway: &Gateway,
    params: &ChatParams,
    batch_size: usize,
) -> RefineOutcome {
    assert!(batch_size >= 1, "batch size must be at least 1");
    assert!(!train.train.is_empty(), "static refinement needs train rows");

    let intents: Vec<String> = train.intents.iter().cloned().collect();
    let mut merged: BTreeMap<String, String> = BTreeMap::new();
    let mut prompt_digests = Vec::new();
    let mut raw_responses = Vec::new();
    let mut failures: Vec<String> = Vec::new();

    for batch in intents.chunks(batch_size) {
        let groups = IntentGroupSet {
            groups: batch
                .iter()
                .map(|intent| IntentGroup {
                    intent: intent.clone(),
                    members: train
                        .train
                        .iter()
                        .filter(|u| &u.intent == intent)
                        .cloned()
                        .collect(),
                    best_similarity: 0.0,
                })
                .collect(),
        };
        let batch_names: Vec<String> = batch.to_vec();
        let prompt = build_renaming_prompt(&groups, RefinementMode::Static);
        let request = params.request(&prompt);
        prompt_digests.push(request.prompt_digest());

        match gateway
            .complete_cached(&request)
            .map_err(|err| format!("renaming call failed: {err}"))
            .and_then(|response| {
                let parsed = parse_mappings(&response.content, &batch_names)
                    .map_err(|err| err.to_string());
                raw_responses.push(response.content);
                parsed
            }) {
            Ok(entries) => merged.extend(validate_entries(entries)),
            Err(reason) => {
                failures.push(reason);
                merged.extend(batch_names.iter().map(|n| (n.clone(), n.clone())));
            }
        }
    }

    let entries = resolve_collisions(merged);
    RefineOutcome {
        mapping: LabelMapping {
            scope: MappingScope::Static,
            anonymized: false,
            entries,
            generic_table: None,
        },
        refinement_failed: !failures.is_empty(),
        failure: (!failures.is_empty()).then(|| failures.join("; ")),
        prompt_digests,
        raw_responses,
    }
}

/// Render a mapping in the same stub format the prompt requests, one
/// `<old> -> <new>` line per entry in key order.
pub fn render_mapping_lines(entries: &BTreeMap<String, String>) -> String {
    entries
        .iter()
        .map(|(old, new)| format!("{old} -> {new}"))
        .collect::<Vec<_>>()
        .join("\n")
}
