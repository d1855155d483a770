//! Run configuration: one struct that fully determines a run.
//!
//! A resolved config (including the pinned timestamp) plus fixed fixtures
//! and a warmed cache yields byte-identical reports and audit trails, which
//! is the reproducibility contract the CLI exposes.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DataFormat;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// The five evaluation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "cot")]
    Cot,
    #[serde(rename = "refined-dynamic")]
    RefinedDynamic,
    #[serde(rename = "refined-static")]
    RefinedStatic,
    #[serde(rename = "refined-generic")]
    RefinedGeneric,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Raw => "raw",
            RunMode::Cot => "cot",
            RunMode::RefinedDynamic => "refined-dynamic",
            RunMode::RefinedStatic => "refined-static",
            RunMode::RefinedGeneric => "refined-generic",
        }
    }

    pub fn uses_refinement(self) -> bool {
        matches!(
            self,
            RunMode::RefinedDynamic | RunMode::RefinedStatic | RunMode::RefinedGeneric
        )
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RunMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(RunMode::Raw),
            "cot" => Ok(RunMode::Cot),
            "refined-dynamic" | "refined_dynamic" => Ok(RunMode::RefinedDynamic),
            "refined-static" | "refined_static" => Ok(RunMode::RefinedStatic),
            "refined-generic" | "refined_generic" => Ok(RunMode::RefinedGeneric),
            other => Err(ConfigError::Invalid(format!(
                "unknown mode {other:?}; expected raw, cot, refined-dynamic, refined-static, or refined-generic"
            ))),
        }
    }
}

/// Fully resolved run settings. Serialized into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Directory holding `train.<ext>` and `test.<ext>`.
    pub dataset: String,
    pub format: DataFormat,
    pub mode: RunMode,
    pub k: usize,
    pub shots: usize,
    pub seed: u64,
    pub refiner_model: String,
    pub classifier_model: String,
    /// Embedding provider: `hash[:dim=..][:seed=..]`, `store:<path>`, or an
    /// HTTP endpoint URL (optionally `<url>#<model>`).
    pub embed_spec: String,
    /// Chat backend: `mock`, `mock:echo`, `mock:script=<path>`, or an HTTP
    /// endpoint URL.
    pub endpoint_spec: String,
    pub cache_dir: Option<String>,
    pub out: Option<String>,
    pub concurrency: usize,
    pub oos_labels: BTreeSet<String>,
    pub static_batch_size: usize,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub max_retries: u32,
    pub retry_base_ms: u64,
    /// Pre-computed static mapping to reuse instead of refining.
    pub mapping_file: Option<String>,
    /// Pinned into the report; resolved from the clock when absent so that
    /// identical resolved configs reproduce identical reports.
    pub timestamp: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: String::new(),
            format: DataFormat::Csv,
            mode: RunMode::Raw,
            k: 20,
            shots: 10,
            seed: 7,
            refiner_model: "default".into(),
            classifier_model: "default".into(),
            embed_spec: "hash".into(),
            endpoint_spec: "mock:echo".into(),
            cache_dir: None,
            out: None,
            concurrency: 4,
            oos_labels: BTreeSet::from(["NO_NODES_DETECTED".to_string()]),
            static_batch_size: 10,
            temperature: 0.0,
            max_tokens: None,
            max_retries: 3,
            retry_base_ms: 200,
            mapping_file: None,
            timestamp: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dataset.is_empty() {
            return Err(ConfigError::Invalid("dataset path is required".into()));
        }
        if self.k < 1 {
            return Err(ConfigError::Invalid("k must be at least 1".into()));
        }
        if self.shots < 1 {
            return Err(ConfigError::Invalid("shots must be at least 1".into()));
        }
        if self.concurrency < 1 {
            return Err(ConfigError::Invalid("concurrency must be at least 1".into()));
        }
        if self.static_batch_size < 1 {
            return Err(ConfigError::Invalid(
                "static batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Fill the timestamp from the clock if it was not pinned.
    pub fn resolve_timestamp(&mut self) {
        if self.timestamp.is_none() {
            self.timestamp = Some(iso8601_now());
        }
    }
}

/// Current UTC time as `YYYY-MM-DDThh:mm:ssZ`, from the system clock.
fn iso8601_now() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    iso8601_from_epoch(secs)
}

/// Civil-date conversion (Howard Hinnant's days algorithm).
fn iso8601_from_epoch(secs: u64) -> String {
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    let (hh, mm, ss) = (rem / 3600, (rem % 3600) / 60, rem % 60);

    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };

    format!("{y:04}-{m:02}-{d:02}T{hh:02}:{mm:02}:{ss:02}Z")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::str::FromStr;

    #[test]
    fn defaults_match_the_documented_protocol() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.k, 20);
        assert_eq!(cfg.shots, 10);
        assert_eq!(cfg.concurrency, 4);
        assert_eq!(cfg.static_batch_size, 10);
        assert_eq!(cfg.temperature, 0.0);
        assert!(cfg.oos_labels.contains("NO_NODES_DETECTED"));
    }

    #[test]
    fn modes_parse_and_display() {
        for s in ["raw", "cot", "refined-dynamic", "refined-static", "refined-generic"] {
            let mode = RunMode::from_str(s).unwrap();
            assert_eq!(mode.to_string(), s);
        }
        assert_eq!(
            RunMode::from_str("refined_dynamic").unwrap(),
            RunMode::RefinedDynamic
        );
        assert!(RunMode::from_str("bogus").is_err());
    }

    #[test]
    fn partial_json_fills_in_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"dataset": "fixtures/demo", "mode": "refined-dynamic", "k": 5}"#)
                .unwrap();
        assert_eq!(cfg.dataset, "fixtures/demo");
        assert_eq!(cfg.mode, RunMode::RefinedDynamic);
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.shots, 10);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_rejects_degenerate_values() {
        let mut cfg = RunConfig {
            dataset: "d".into(),
            ..RunConfig::default()
        };
        cfg.validate().unwrap();
        cfg.k = 0;
        assert!(cfg.validate().is_err());
        cfg.k = 1;
        cfg.shots = 0;
        assert!(cfg.validate().is_err());
        cfg.shots = 1;
        cfg.dataset.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_roundtrips_through_json() {
        let mut cfg = RunConfig {
            dataset: "fixtures/demo".into(),
            mode: RunMode::RefinedGeneric,
            timestamp: Some("2024-01-02T03:04:05Z".into()),
            ..RunConfig::default()
        };
        cfg.resolve_timestamp();
        assert_eq!(cfg.timestamp.as_deref(), Some("2024-01-02T03:04:05Z"));
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn epoch_conversion_handles_known_dates() {
        assert_eq!(iso8601_from_epoch(0), "1970-01-01T00:00:00Z");
        // leap-year day: 2024-02-29 12:00:00 UTC
        assert_eq!(iso8601_from_epoch(1_709_208_000), "2024-02-29T12:00:00Z");
        assert_eq!(iso8601_from_epoch(1_724_612_345), "2024-08-25T18:59:05Z");
    }
}
