//! End-to-end orchestration: config in, report and audit trail out.
//!
//! A [`Pipeline`] is built once per dataset (corpus load, index build, cache
//! open, static refinement when requested) and can then run any number of
//! evaluations — a k-sweep reuses the same memoized embeddings and response
//! cache across all sweep points. Per-query work fans out across threads up
//! to the configured concurrency and merges deterministically by query id.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::classify::{
    classify_query, AuditRecord, ClassifyRequest, LabelStrategy, MatchMethod, Prediction,
};
use crate::config::{ConfigError, RunConfig, RunMode};
use crate::corpus::{load_and_prepare, CorpusError, SamplingSpec, SplitDataset};
use crate::embed::{
    build_index, EmbedError, EmbeddingProvider, HashEmbedder, MemoProvider, PrecomputedStore,
    RemoteEmbedder, RetrievalSet, VectorIndex,
};
use crate::eval::{
    avg_intents_per_retrieval, count_correct, label_similarity_matrix, lint_refined_labels,
    recall_at_k, EvaluationReport, LabelSetKind, LintFinding, LintOptions, SimilarityReport,
};
use crate::gateway::{
    ChatBackend, ChatParams, Gateway, GatewayStats, HttpBackend, MockOracle, ResponseCache,
    RetryPolicy,
};
use crate::refine::{refine_static, LabelMapping, RefinementMode};

/// Environment variable holding the chat backend API key.
pub const ENV_API_KEY: &str = "RELABEL_API_KEY";
/// Environment variable holding the embedding backend API key (falls back
/// to [`ENV_API_KEY`]).
pub const ENV_EMBED_API_KEY: &str = "RELABEL_EMBED_API_KEY";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("cannot read mapping file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse mapping file: {0}")]
    MappingParse(#[from] serde_json::Error),
    #[error("backend error: {0}")]
    Backend(String),
}

/// Build an embedding provider from its config spec.
///
/// Specs: `hash` (optionally `hash:dim=64,seed=0`), `store:<path>`, or an
/// HTTP endpoint URL (optionally `<url>#<model>`). API keys come only from
/// the environment, never the config, so they cannot leak into reports.
pub fn provider_from_spec(spec: &str) -> Result<Arc<dyn EmbeddingProvider>, PipelineError> {
    let inner: Arc<dyn EmbeddingProvider> = if spec == "hash" || spec.starts_with("hash:") {
        let mut dim = 64usize;
        let mut seed = 0u64;
        if let Some(args) = spec.strip_prefix("hash:") {
            for part in args.split(',').filter(|p| !p.is_empty()) {
                match part.split_once('=') {
                    Some(("dim", v)) => {
                        dim = v.parse().map_err(|_| {
                            ConfigError::Invalid(format!("bad hash dim {v:?}"))
                        })?
                    }
                    Some(("seed", v)) => {
                        seed = v.parse().map_err(|_| {
                            ConfigError::Invalid(format!("bad hash seed {v:?}"))
                        })?
                    }
                    _ => {
                        return Err(ConfigError::Invalid(format!(
                            "bad hash embedder option {part:?}"
                        ))
                        .into())
                    }
                }
            }
        }
        Arc::new(HashEmbedder::new(dim, seed))
    } else if let Some(path) = spec.strip_prefix("store:") {
        Arc::new(PrecomputedStore::load(Path::new(path))?)
    } else if spec.starts_with("http://") || spec.starts_with("https://") {
        let (endpoint, model) = match spec.rsplit_once('#') {
            Some((url, model)) if !model.is_empty() => (url, model),
            _ => (spec, "default"),
        };
        let api_key = std::env::var(ENV_EMBED_API_KEY)
            .or_else(|_| std::env::var(ENV_API_KEY))
            .ok();
        Arc::new(RemoteEmbedder::new(endpoint, model, api_key)?)
    } else {
        return Err(ConfigError::Invalid(format!("unknown embedding spec {spec:?}")).into());
    };
    Ok(Arc::new(MemoProvider::new(inner)))
}

/// Build a chat backend from its config spec.
///
/// Specs: `mock` (empty script: every call fails), `mock:echo`,
/// `mock:script=<path>`, or an HTTP endpoint URL.
pub fn backend_from_spec(spec: &str) -> Result<Arc<dyn ChatBackend>, PipelineError> {
    if spec == "mock" {
        return Ok(Arc::new(MockOracle::new()));
    }
    if spec == "mock:echo" {
        return Ok(Arc::new(MockOracle::new().with_echo_fallback()));
    }
    if let Some(path) = spec.strip_prefix("mock:script=") {
        let oracle = MockOracle::from_script_file(Path::new(path))
            .map_err(|err| PipelineError::Backend(err.to_string()))?;
        return Ok(Arc::new(oracle));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        let api_key = std::env::var(ENV_API_KEY).ok();
        let backend = HttpBackend::new(spec, api_key)
            .map_err(|err| PipelineError::Backend(err.to_string()))?;
        return Ok(Arc::new(backend));
    }
    Err(ConfigError::Invalid(format!("unknown endpoint spec {spec:?}")).into())
}

/// Everything one evaluation run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: EvaluationReport,
    /// One JSON object per query, ordered by query id.
    pub audit_jsonl: String,
    pub predictions: Vec<Prediction>,
    pub retrievals: Vec<RetrievalSet>,
    pub static_mapping: Option<LabelMapping>,
}

/// Label-space analysis artifacts (similarity reports and lint findings).
#[derive(Debug, Clone)]
pub struct AnalyzeArtifacts {
    pub original: SimilarityReport,
    pub refined: Option<SimilarityReport>,
    pub lint: Vec<LintFinding>,
}

pub struct Pipeline {
    config: RunConfig,
    dataset: SplitDataset,
    index: VectorIndex,
    gateway: Gateway,
    refiner: ChatParams,
    classifier: ChatParams,
    static_mapping: Option<LabelMapping>,
    static_refinement_failed: bool,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("dataset", &self.dataset.name)
            .field("mode", &self.config.mode)
            .field("train_rows", &self.dataset.train.len())
            .field("test_rows", &self.dataset.test.len())
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Load the dataset, build the index, open the cache, and (for static
    /// mode) compute or load the static mapping.
    pub fn build(mut config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        config.resolve_timestamp();

        let sampling = SamplingSpec {
            shots_per_intent: config.shots,
            seed: config.seed,
            oos_labels: config.oos_labels.clone(),
        };
        let dataset = load_and_prepare(Path::new(&config.dataset), config.format, &sampling)?;

        let provider = provider_from_spec(&config.embed_spec)?;
        let index = build_index(&dataset.train, provider)?;

        let cache = match &config.cache_dir {
            Some(dir) => ResponseCache::open(Path::new(dir))?,
            None => ResponseCache::ephemeral(),
        };
        let backend = backend_from_spec(&config.endpoint_spec)?;
        let gateway = Gateway::new(backend, cache)
            .with_retry_policy(RetryPolicy {
                max_retries: config.max_retries,
                base_delay_ms: config.retry_base_ms,
            })
            .with_concurrency(config.concurrency);

        let refiner = ChatParams {
            model: config.refiner_model.clone(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        };
        let classifier = ChatParams {
            model: config.classifier_model.clone(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        };

        let (static_mapping, static_refinement_failed) = if config.mode == RunMode::RefinedStatic {
            match &config.mapping_file {
                Some(path) => {
                    let raw = std::fs::read_to_string(path)?;
                    (Some(serde_json::from_str::<LabelMapping>(&raw)?), false)
                }
                None => {
                    let outcome =
                        refine_static(&dataset, &gateway, &refiner, config.static_batch_size);
                    if let Some(reason) = &outcome.failure {
                        log::warn!("static refinement degraded: {reason}");
                    }
                    (Some(outcome.mapping), outcome.refinement_failed)
                }
            }
        } else {
            (None, false)
        };

        Ok(Self {
            config,
            dataset,
            index,
            gateway,
            refiner,
            classifier,
            static_mapping,
            static_refinement_failed,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dataset(&self) -> &SplitDataset {
        &self.dataset
    }

    pub fn gateway_stats(&self) -> GatewayStats {
        self.gateway.stats()
    }

    pub fn cache(&self) -> &ResponseCache {
        self.gateway.cache()
    }

    pub fn static_mapping(&self) -> Option<&LabelMapping> {
        self.static_mapping.as_ref()
    }

    fn strategy(&self) -> LabelStrategy<'_> {
        match self.config.mode {
            RunMode::Raw => LabelStrategy::Raw,
            RunMode::Cot => LabelStrategy::Cot,
            RunMode::RefinedDynamic => LabelStrategy::RefinedDynamic(RefinementMode::Dynamic),
            RunMode::RefinedGeneric => {
                LabelStrategy::RefinedDynamic(RefinementMode::GenericDynamic)
            }
            RunMode::RefinedStatic => LabelStrategy::RefinedStatic(
                self.static_mapping
                    .as_ref()
                    .expect("static mapping prepared at build time"),
            ),
        }
    }

    /// Run the evaluation at the configured k.
    pub fn run(&self) -> Result<RunArtifacts, PipelineError> {
        self.run_with_k(self.config.k)
    }

    /// Run the evaluation at an explicit k (used by sweeps).
    pub fn run_with_k(&self, k: usize) -> Result<RunArtifacts, PipelineError> {
        let queries = &self.dataset.test;
        let strategy = self.strategy();
        let request = ClassifyRequest {
            k,
            strategy,
            refiner: &self.refiner,
            classifier: &self.classifier,
        };

        let cursor = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Result<crate::classify::QueryResult, String>)>> =
            Mutex::new(Vec::with_capacity(queries.len()));
        let workers = self.config.concurrency.min(queries.len().max(1));

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = cursor.fetch_add(1, Ordering::Relaxed);
                    if idx >= queries.len() {
                        break;
                    }
                    let query = &queries[idx];
                    let outcome = classify_query(
                        query,
                        &request,
                        &self.index,
                        &self.dataset,
                        &self.gateway,
                    )
                    .map_err(|err| err.to_string());
                    results.lock().expect("results lock").push((idx, outcome));
                });
            }
        });

        let mut results = results.into_inner().expect("results lock");
        results.sort_by_key(|(idx, _)| *idx);

        let mut predictions = Vec::with_capacity(queries.len());
        let mut retrievals = Vec::with_capacity(queries.len());
        let mut audits: Vec<AuditRecord> = Vec::with_capacity(queries.len());
        let mut hard_errors = 0usize;
        for (idx, outcome) in results {
            let query = &queries[idx];
            match outcome {
                Ok(result) => {
                    predictions.push(result.prediction);
                    retrievals.push(result.retrieval);
                    audits.push(result.audit);
                }
                Err(message) => {
                    // keep the run going: a hard per-query failure becomes a
                    // failed prediction with the error on record
                    hard_errors += 1;
                    log::error!("query {} failed: {message}", query.id);
                    predictions.push(Prediction {
                        query_id: query.id,
                        raw_output: String::new(),
                        predicted_refined: None,
                        predicted_original: None,
                        match_method: MatchMethod::Failed,
                        mode: self.strategy().prompt_mode(),
                    });
                    audits.push(AuditRecord {
                        query_id: query.id,
                        query_text: query.text.clone(),
                        gold_intent: query.intent.clone(),
                        mode: self.strategy().name().to_string(),
                        k,
                        model_refiner: self.refiner.model.clone(),
                        model_classifier: self.classifier.model.clone(),
                        retrieval: Vec::new(),
                        mapping: None,
                        refinement_failed: false,
                        refine_prompt_digests: Vec::new(),
                        classify_prompt_digest: String::new(),
                        raw_output: String::new(),
                        predicted_refined: None,
                        predicted_original: None,
                        match_method: MatchMethod::Failed,
                        correct: false,
                        error: Some(message),
                    });
                }
            }
        }
        if !queries.is_empty() && hard_errors == queries.len() {
            return Err(PipelineError::Backend(format!(
                "all {} queries failed; see the audit trail",
                queries.len()
            )));
        }

        let (n_correct, n_queries) = count_correct(&predictions, queries)
            .map_err(|err| PipelineError::Backend(err.to_string()))?;
        let accuracy = if n_queries == 0 {
            0.0
        } else {
            n_correct as f64 / n_queries as f64
        };
        let recall = recall_at_k(&retrievals, &self.dataset);
        let avg_intents = if retrievals.is_empty() {
            0.0
        } else {
            avg_intents_per_retrieval(&retrievals, &self.dataset)
        };
        let n_failed_parse = predictions
            .iter()
            .filter(|p| p.match_method == MatchMethod::Failed)
            .count();
        let n_refinement_failed = if self.config.mode == RunMode::RefinedStatic {
            if self.static_refinement_failed {
                n_queries
            } else {
                0
            }
        } else {
            audits.iter().filter(|a| a.refinement_failed).count()
        };

        let mut config = self.config.clone();
        config.k = k;
        let report = EvaluationReport {
            dataset: self.dataset.name.clone(),
            mode: self.config.mode.to_string(),
            model_refiner: self.config.refiner_model.clone(),
            model_classifier: self.config.classifier_model.clone(),
            k,
            accuracy,
            n_queries,
            n_correct,
            n_failed_parse,
            n_refinement_failed,
            recall_at_k: recall.recall,
            n_gold_missing_from_train: recall.n_gold_missing,
            avg_intents_per_retrieval: avg_intents,
            timestamp: config.timestamp.clone().unwrap_or_default(),
            config,
        };

        let mut audit_jsonl = String::new();
        for audit in &audits {
            audit_jsonl.push_str(&serde_json::to_string(audit).expect("audit serializes"));
            audit_jsonl.push('\n');
        }

        Ok(RunArtifacts {
            report,
            audit_jsonl,
            predictions,
            retrievals,
            static_mapping: self.static_mapping.clone(),
        })
    }

    /// One full run per k, sharing the index, memoized embeddings, and the
    /// response cache across all sweep points.
    pub fn sweep_k(&self, ks: &[usize]) -> Result<Vec<RunArtifacts>, PipelineError> {
        assert!(!ks.is_empty(), "sweep needs at least one k");
        assert!(ks.iter().all(|&k| k >= 1), "every k must be at least 1");
        ks.iter().map(|&k| self.run_with_k(k)).collect()
    }

    /// Similarity reports over the original (and optionally refined) label
    /// space, plus lint findings for the mapping.
    pub fn analyze(&self, mapping: Option<&LabelMapping>) -> Result<AnalyzeArtifacts, PipelineError> {
        let original_labels: Vec<String> = self.dataset.intents.iter().cloned().collect();
        if original_labels.len() < 2 {
            return Err(PipelineError::Backend(
                "similarity analysis needs at least two intents".into(),
            ));
        }
        let provider = self.index.provider();
        let original =
            label_similarity_matrix(&original_labels, LabelSetKind::Original, provider)
                .map_err(|err| PipelineError::Backend(err.to_string()))?;

        let (refined, lint) = match mapping {
            Some(mapping) => {
                let refined_labels: Vec<String> = original_labels
                    .iter()
                    .map(|l| mapping.apply(l))
                    .collect();
                let report = if refined_labels.len() >= 2 {
                    Some(
                        label_similarity_matrix(&refined_labels, LabelSetKind::Refined, provider)
                            .map_err(|err| PipelineError::Backend(err.to_string()))?,
                    )
                } else {
                    None
                };
                let source_texts: BTreeMap<String, Vec<String>> = self
                    .dataset
                    .intents
                    .iter()
                    .map(|intent| {
                        (
                            intent.clone(),
                            self.dataset
                                .train
                                .iter()
                                .filter(|u| &u.intent == intent)
                                .map(|u| u.text.clone())
                                .collect(),
                        )
                    })
                    .collect();
                let lint = lint_refined_labels(mapping, &source_texts, &LintOptions::default());
                (report, lint)
            }
            None => (None, Vec::new()),
        };

        Ok(AnalyzeArtifacts {
            original,
            refined,
            lint,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_demo_dataset(dir: &Path) {
        // intents use disjoint vocabularies so nearest-neighbor retrieval
        // under the hashing embedder is unambiguous
        let train = "\
sentence,label
Book a flight to Paris,book_flight
I need a flight booking,book_flight
Flight reservation please,book_flight
Cancel my order,cancel_order
Order cancellation request,cancel_order
I want to cancel the order,cancel_order
Track my package,track_package
Where is my package,track_package
Package tracking status,track_package
";
        let test = "\
sentence,label
Booking a flight reservation,book_flight
Cancel the order immediately,cancel_order
Package tracking update,track_package
random gibberish zzz,NO_NODES_DETECTED
";
        std::fs::write(dir.join("train.csv"), train).unwrap();
        std::fs::write(dir.join("test.csv"), test).unwrap();
    }

    fn demo_config(dir: &Path) -> RunConfig {
        RunConfig {
            dataset: dir.display().to_string(),
            mode: RunMode::Raw,
            k: 3,
            shots: 10,
            endpoint_spec: "mock:echo".into(),
            timestamp: Some("2024-01-01T00:00:00Z".into()),
            ..RunConfig::default()
        }
    }

    #[test]
    fn provider_specs_parse() {
        assert!(provider_from_spec("hash").is_ok());
        assert!(provider_from_spec("hash:dim=32,seed=5").is_ok());
        assert!(provider_from_spec("hash:bogus=1").is_err());
        assert!(provider_from_spec("nonsense").is_err());
        assert!(provider_from_spec("store:/no/such/file").is_err());
    }

    #[test]
    fn backend_specs_parse() {
        assert!(backend_from_spec("mock").is_ok());
        assert!(backend_from_spec("mock:echo").is_ok());
        assert!(backend_from_spec("mock:script=/no/such/file").is_err());
        assert!(backend_from_spec("telnet://x").is_err());
    }

    #[test]
    fn raw_run_produces_a_complete_report() {
        let dir = tempfile::tempdir().unwrap();
        write_demo_dataset(dir.path());
        let pipeline = Pipeline::build(demo_config(dir.path())).unwrap();
        let artifacts = pipeline.run().unwrap();
        let report = &artifacts.report;
        // OOS query excluded: 3 test queries remain
        assert_eq!(report.n_queries, 3);
        assert_eq!(report.mode, "raw");
        assert_eq!(report.k, 3);
        assert_eq!(report.accuracy, report.n_correct as f64 / 3.0);
        assert_eq!(report.timestamp, "2024-01-01T00:00:00Z");
        assert_eq!(artifacts.audit_jsonl.lines().count(), 3);
        // echo oracle answers the most similar neighbor's label, which for
        // this tiny dataset is always the gold intent
        assert_eq!(report.n_correct, 3);
        assert_eq!(report.recall_at_k, 1.0);
    }

    #[test]
    fn refined_dynamic_run_records_mappings() {
        let dir = tempfile::tempdir().unwrap();
        write_demo_dataset(dir.path());
        let mut config = demo_config(dir.path());
        config.mode = RunMode::RefinedDynamic;
        let pipeline = Pipeline::build(config).unwrap();
        let artifacts = pipeline.run().unwrap();
        assert_eq!(artifacts.report.n_refinement_failed, 0);
        for line in artifacts.audit_jsonl.lines() {
            let audit: AuditRecord = serde_json::from_str(line).unwrap();
            assert!(audit.mapping.is_some());
            assert_eq!(audit.mode, "refined-dynamic");
        }
    }

    #[test]
    fn static_mode_refines_once_and_reuses_the_mapping() {
        let dir = tempfile::tempdir().unwrap();
        write_demo_dataset(dir.path());
        let mut config = demo_config(dir.path());
        config.mode = RunMode::RefinedStatic;
        let pipeline = Pipeline::build(config).unwrap();
        // echo oracle: identity mapping over all 3 intents
        let mapping = pipeline.static_mapping().unwrap();
        assert_eq!(mapping.entries.len(), 3);
        let stats_before = pipeline.gateway_stats();
        let artifacts = pipeline.run().unwrap();
        assert_eq!(artifacts.report.n_refinement_failed, 0);
        // classification calls only; no further renaming calls
        let stats_after = pipeline.gateway_stats();
        assert_eq!(
            stats_after.backend_calls - stats_before.backend_calls,
            3,
            "one classification call per query"
        );
    }

    #[test]
    fn static_mapping_loads_from_file() {
        let dir = tempfile::tempdir().unwrap();
        write_demo_dataset(dir.path());
        let mapping = LabelMapping::identity(
            crate::refine::MappingScope::Static,
            ["book_flight", "cancel_order", "track_package"],
        );
        let mapping_path = dir.path().join("mapping.json");
        let mut f = std::fs::File::create(&mapping_path).unwrap();
        write!(f, "{}", serde_json::to_string(&mapping).unwrap()).unwrap();

        let mut config = demo_config(dir.path());
        config.mode = RunMode::RefinedStatic;
        config.mapping_file = Some(mapping_path.display().to_string());
        let pipeline = Pipeline::build(config).unwrap();
        assert_eq!(pipeline.static_mapping().unwrap(), &mapping);
        // loading from file performs no renaming calls
        assert_eq!(pipeline.gateway_stats().backend_calls, 0);
    }

    #[test]
    fn sweep_shares_caches_across_ks() {
        let dir = tempfile::tempdir().unwrap();
        write_demo_dataset(dir.path());
        let pipeline = Pipeline::build(demo_config(dir.path())).unwrap();
        let artifacts = pipeline.sweep_k(&[1, 3]).unwrap();
        assert_eq!(artifacts.len(), 2);
        assert_eq!(artifacts[0].report.k, 1);
        assert_eq!(artifacts[1].report.k, 3);
        assert_eq!(artifacts[0].report.config.k, 1);
        // k=1 prompts contain exactly one example
        assert_eq!(artifacts[0].retrievals[0].neighbors.len(), 1);

        // repeating a sweep point is fully served by the response cache
        let calls_before = pipeline.gateway_stats().backend_calls;
        let again = pipeline.run_with_k(1).unwrap();
        assert_eq!(pipeline.gateway_stats().backend_calls, calls_before);
        assert_eq!(again.report, artifacts[0].report);
    }

    #[test]
    fn all_queries_failing_is_a_backend_error() {
        let dir = tempfile::tempdir().unwrap();
        write_demo_dataset(dir.path());
        let mut config = demo_config(dir.path());
        // a missing precomputed store entry fails every retrieval
        let store_path = dir.path().join("empty_store.jsonl");
        std::fs::write(&store_path, "").unwrap();
        config.embed_spec = format!("store:{}", store_path.display());
        let err = Pipeline::build(config).unwrap_err();
        // the index build itself fails: no embeddings for train texts
        assert!(matches!(err, PipelineError::Embed(_)));
    }

    #[test]
    fn gateway_failures_surface_as_failed_predictions_not_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_demo_dataset(dir.path());
        let mut config = demo_config(dir.path());
        config.endpoint_spec = "mock".into(); // empty script: every call fails
        config.max_retries = 0;
        let pipeline = Pipeline::build(config).unwrap();
        let artifacts = pipeline.run().unwrap();
        assert_eq!(artifacts.report.n_failed_parse, 3);
        assert_eq!(artifacts.report.n_correct, 0);
        assert_eq!(artifacts.report.accuracy, 0.0);
    }

    #[test]
    fn warmed_cache_reruns_are_byte_identical_with_zero_calls() {
        let dir = tempfile::tempdir().unwrap();
        write_demo_dataset(dir.path());
        let cache_dir = dir.path().join("cache");
        let mut config = demo_config(dir.path());
        config.mode = RunMode::RefinedDynamic;
        config.cache_dir = Some(cache_dir.display().to_string());

        let first = {
            let pipeline = Pipeline::build(config.clone()).unwrap();
            let artifacts = pipeline.run().unwrap();
            assert!(pipeline.gateway_stats().backend_calls > 0);
            artifacts
        };
        let pipeline = Pipeline::build(config).unwrap();
        let second = pipeline.run().unwrap();
        assert_eq!(pipeline.gateway_stats().backend_calls, 0);
        assert_eq!(
            serde_json::to_string(&second.report).unwrap(),
            serde_json::to_string(&first.report).unwrap()
        );
        assert_eq!(second.audit_jsonl, first.audit_jsonl);
    }

    #[test]
    fn analyze_reports_similarity_and_lint() {
        let dir = tempfile::tempdir().unwrap();
        write_demo_dataset(dir.path());
        let pipeline = Pipeline::build(demo_config(dir.path())).unwrap();

        let plain = pipeline.analyze(None).unwrap();
        assert_eq!(plain.original.labels.len(), 3);
        assert!(plain.refined.is_none());
        assert!(plain.lint.is_empty());

        let mut mapping = LabelMapping::identity(
            crate::refine::MappingScope::Static,
            ["book_flight", "cancel_order", "track_package"],
        );
        mapping
            .entries
            .insert("track_package".into(), "where_is_my_package".into());
        let refined = pipeline.analyze(Some(&mapping)).unwrap();
        assert!(refined.refined.is_some());
        // "Where is my package" is a train utterance for track_package
        assert_eq!(refined.lint.len(), 1);
        assert_eq!(refined.lint[0].refined, "where_is_my_package");
    }
}
