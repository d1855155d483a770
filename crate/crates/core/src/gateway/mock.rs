//! Scripted chat backend for offline runs and tests.
//!
//! Resolution order per request: exact prompt-digest match, then regex rules
//! in declaration order against the prompt text, then (if enabled) an echo
//! fallback that answers renaming prompts with identity mappings and
//! classification prompts with the most similar example's label. Every
//! request is recorded for later inspection.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::Deserialize;

use super::{ChatBackend, ChatRequest, GatewayError};

#[derive(Debug, Deserialize)]
struct ScriptRule {
    pattern: String,
    response: String,
}

#[derive(Debug, Default, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    exact: HashMap<String, String>,
    #[serde(default)]
    rules: Vec<ScriptRule>,
    #[serde(default)]
    echo_fallback: bool,
}

pub struct MockOracle {
    exact: HashMap<String, String>,
    rules: Vec<(Regex, String)>,
    echo_fallback: bool,
    requests: Mutex<Vec<ChatRequest>>,
}

impl Default for MockOracle {
    fn default() -> Self {
        Self::new()
    }
}

impl MockOracle {
    pub fn new() -> Self {
        Self {
            exact: HashMap::new(),
            rules: Vec::new(),
            echo_fallback: false,
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Pin a response to a specific prompt digest (see
    /// [`ChatRequest::prompt_digest`]).
    pub fn with_exact(mut self, digest: &str, response: &str) -> Self {
        self.exact.insert(digest.to_string(), response.to_string());
        self
    }

    /// Convenience: pin a response to the digest of a known prompt text.
    pub fn with_exact_prompt(self, prompt: &str, response: &str) -> Self {
        let digest = ChatRequest::user("", prompt, 0.0, None).prompt_digest();
        self.with_exact(&digest, response)
    }

    /// Add a regex rule matched against the full prompt text.
    pub fn with_rule(mut self, pattern: &str, response: &str) -> Result<Self, GatewayError> {
        let regex = Regex::new(pattern)
            .map_err(|err| GatewayError::Protocol(format!("bad mock rule pattern: {err}")))?;
        self.rules.push((regex, response.to_string()));
        Ok(self)
    }

    pub fn with_echo_fallback(mut self) -> Self {
        self.echo_fallback = true;
        self
    }

    pub fn from_script_str(script: &str) -> Result<Self, GatewayError> {
        let parsed: ScriptFile = serde_json::from_str(script)
            .map_err(|err| GatewayError::Protocol(format!("bad mock script: {err}")))?;
        let mut oracle = Self::new();
        oracle.exact = parsed.exact;
        oracle.echo_fallback = parsed.echo_fallback;
        for rule in parsed.rules {
            oracle = oracle.with_rule(&rule.pattern, &rule.response)?;
        }
        Ok(oracle)
    }

    pub fn from_script_file(path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path).map_err(|err| {
            GatewayError::Protocol(format!("cannot read mock script {}: {err}", path.display()))
        })?;
        Self::from_script_str(&raw)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("mock lock").clone()
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().expect("mock lock").len()
    }

    fn echo(&self, prompt: &str) -> Option<String> {
        if !self.echo_fallback {
            return None;
        }
        if let Some(idx) = prompt.find("INTENT MAPPINGS:") {
            // identity mapping for every "<name> ->" stub after the marker
            let mappings: Vec<String> = prompt[idx..]
                .lines()
                .skip(1)
                .filter_map(|line| {
                    let line = line.trim();
                    line.strip_suffix("->")
                        .map(|name| name.trim())
                        .filter(|name| !name.is_empty())
                        .map(|name| format!("{name} -> {name}"))
                })
                .collect();
            if !mappings.is_empty() {
                return Some(mappings.join("\n"));
            }
        }
        // classification prompt: examples run least-to-most similar, so the
        // last labeled example is the nearest neighbor
        prompt
            .lines()
            .rev()
            .find_map(|line| line.trim().strip_prefix("Intent: "))
            .map(|label| label.trim().to_string())
    }
}

impl ChatBackend for MockOracle {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.requests
            .lock()
            .expect("mock lock")
            .push(request.clone());
        let digest = request.prompt_digest();
        if let Some(response) = self.exact.get(&digest) {
            return Ok(response.clone());
        }
        let prompt = request.prompt_text();
        for (regex, response) in &self.rules {
            if regex.is_match(&prompt) {
                return Ok(response.clone());
            }
        }
        if let Some(response) = self.echo(&prompt) {
            return Ok(response);
        }
        Err(GatewayError::Protocol(format!(
            "no scripted response for prompt digest {digest}"
        )))
    }

    fn name(&self) -> String {
        "mock".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(prompt: &str) -> ChatRequest {
        ChatRequest::user("m", prompt, 0.0, None)
    }

    #[test]
    fn exact_digest_wins_over_rules() {
        let oracle = MockOracle::new()
            .with_exact_prompt("the prompt", "pinned")
            .with_rule("prompt", "from rule")
            .unwrap();
        assert_eq!(oracle.complete(&request("the prompt")).unwrap(), "pinned");
        assert_eq!(
            oracle.complete(&request("another prompt")).unwrap(),
            "from rule"
        );
    }

    #[test]
    fn rules_match_in_declaration_order() {
        let oracle = MockOracle::new()
            .with_rule("balance", "check_balance")
            .unwrap()
            .with_rule(".", "catch_all")
            .unwrap();
        assert_eq!(
            oracle.complete(&request("what is my balance")).unwrap(),
            "check_balance"
        );
        assert_eq!(oracle.complete(&request("zzz")).unwrap(), "catch_all");
    }

    #[test]
    fn unmatched_prompt_is_a_protocol_error() {
        let oracle = MockOracle::new();
        assert!(matches!(
            oracle.complete(&request("anything")),
            Err(GatewayError::Protocol(_))
        ));
    }

    #[test]
    fn echo_answers_renaming_prompts_with_identity() {
        let prompt = "Examples by intent:\n\nIntent 1: verify_pan\n- Verify my PAN card\n\nINTENT MAPPINGS:\nverify_pan ->\ncard_issue ->";
        let oracle = MockOracle::new().with_echo_fallback();
        assert_eq!(
            oracle.complete(&request(prompt)).unwrap(),
            "verify_pan -> verify_pan\ncard_issue -> card_issue"
        );
    }

    #[test]
    fn echo_answers_classification_with_nearest_label() {
        let prompt = "Text: \"far example\"\nIntent: far_intent\n\nText: \"near example\"\nIntent: near_intent\n\nQuery: \"q\"\nThe top 1 most likely intent is:";
        let oracle = MockOracle::new().with_echo_fallback();
        assert_eq!(oracle.complete(&request(prompt)).unwrap(), "near_intent");
    }

    #[test]
    fn script_files_configure_all_three_layers() {
        let script = r#"{
            "exact": {"0000": "never hit"},
            "rules": [{"pattern": "refund", "response": "get_refund"}],
            "echo_fallback": true
        }"#;
        let oracle = MockOracle::from_script_str(script).unwrap();
        assert_eq!(
            oracle.complete(&request("I want a refund")).unwrap(),
            "get_refund"
        );
        // falls through to echo
        assert_eq!(
            oracle
                .complete(&request("Text: \"x\"\nIntent: pay_bill\n\nQuery: \"q\""))
                .unwrap(),
            "pay_bill"
        );
    }

    #[test]
    fn bad_script_patterns_are_rejected() {
        let script = r#"{"rules": [{"pattern": "(", "response": "x"}]}"#;
        assert!(MockOracle::from_script_str(script).is_err());
    }

    #[test]
    fn requests_are_recorded_in_order() {
        let oracle = MockOracle::new().with_rule(".", "ok").unwrap();
        oracle.complete(&request("one")).unwrap();
        oracle.complete(&request("two")).unwrap();
        let recorded = oracle.requests();
        assert_eq!(recorded.len(), 2);
        assert_eq!(recorded[0].prompt_text(), "one");
        assert_eq!(recorded[1].prompt_text(), "two");
        assert_eq!(oracle.request_count(), 2);
    }
}
