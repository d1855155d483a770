//! Embedding provider implementations.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbedError, EmbeddingProvider, EmbeddingVector};

/// Deterministic mock embedder: seeded feature hashing of word tokens into
/// a fixed dimension, L2-normalized. Texts sharing tokens get positive
/// similarity, which is enough for desk-scale retrieval tests. A pure
/// function of the input text.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut acc = vec![0.0f64; self.dim];
        for token in tokenize(text) {
            let mut hasher = Sha256::new();
            hasher.update(self.seed.to_le_bytes());
            hasher.update(token.as_bytes());
            let digest = hasher.finalize();
            let mut raw = [0u8; 8];
            raw.copy_from_slice(&digest[..8]);
            let bucket = (u64::from_le_bytes(raw) % self.dim as u64) as usize;
            acc[bucket] += 1.0;
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::InvalidVector(text.to_string()));
        }
        for v in &mut acc {
            *v /= norm;
        }
        EmbeddingVector::new(acc)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(64, 0)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }

    fn describe(&self) -> String {
        format!("hash(dim={}, seed={})", self.dim, self.seed)
    }
}

// Lowercase alphanumeric runs; falls back to whitespace tokens for texts
// with no alphanumeric characters so only blank text yields a zero vector.
fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens: Vec<String> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect();
    if tokens.is_empty() {
        tokens = lower.split_whitespace().map(|t| t.to_string()).collect();
    }
    tokens
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreRecord {
    text_sha256: String,
    vector: Vec<f64>,
}

/// File-backed store of precomputed embeddings, keyed by the SHA-256 of
/// the text. Lookups for texts absent from the file fail with
/// `MissingEmbedding`.
pub struct PrecomputedStore {
    vectors: HashMap<String, EmbeddingVector>,
    source: String,
}

impl PrecomputedStore {
    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| EmbedError::ProviderUnavailable(format!("{}: {e}", path.display())))?;
        let mut vectors = HashMap::new();
        for (idx, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: StoreRecord = serde_json::from_str(line).map_err(|e| {
                EmbedError::ProviderUnavailable(format!(
                    "{} line {}: {e}",
                    path.display(),
                    idx + 1
                ))
            })?;
            vectors.insert(record.text_sha256, EmbeddingVector::new(record.vector)?);
        }
        Ok(Self {
            vectors,
            source: path.display().to_string(),
        })
    }

    /// Write a store file; the inverse of `load`, handy for building
    /// fixtures from another provider's output.
    pub fn write_jsonl(
        path: &Path,
        entries: impl IntoIterator<Item = (String, EmbeddingVector)>,
    ) -> std::io::Result<()> {
        use std::io::Write;
        let mut out = std::fs::File::create(path)?;
        for (text, vector) in entries {
            let record = StoreRecord {
                text_sha256: text_sha256(&text),
                vector: vector.values().to_vec(),
            };
            writeln!(out, "{}", serde_json::to_string(&record).unwrap())?;
        }
        Ok(())
    }
}

pub fn text_sha256(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl EmbeddingProvider for PrecomputedStore {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                self.vectors
                    .get(&text_sha256(t))
                    .cloned()
                    .ok_or_else(|| EmbedError::MissingEmbedding(t.to_string()))
            })
            .collect()
    }

    fn describe(&self) -> String {
        format!("store({}, {} vectors)", self.source, self.vectors.len())
    }
}

/// OpenAI-compatible embedding client: POST {"input": [...], "model": ...}
/// returning {"data": [{"embedding": [...]}]}.
pub struct RemoteEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    batch_size: usize,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    input: &'a [&'a str],
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        Ok(Self {
            url: embeddings_url(endpoint),
            model: model.to_string(),
            api_key,
            client,
            batch_size: 128,
        })
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut request = self.client.post(&self.url).json(&EmbeddingRequest {
            input: texts,
            model: &self.model,
        });
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(EmbedError::ProviderUnavailable(format!(
                "embedding endpoint returned {status}"
            )));
        }
        let body: EmbeddingResponse = response
            .json()
            .map_err(|e| EmbedError::ProviderUnavailable(format!("bad embedding body: {e}")))?;
        if body.data.len() != texts.len() {
            return Err(EmbedError::ProviderUnavailable(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                body.data.len()
            )));
        }
        let mut vectors = Vec::with_capacity(body.data.len());
        let mut dim = None;
        for (datum, text) in body.data.into_iter().zip(texts) {
            let got = datum.embedding.len();
            match dim {
                None => dim = Some(got),
                Some(expected) if expected != got => {
                    return Err(EmbedError::ProviderUnavailable(format!(
                        "inconsistent embedding dimensions: {expected} vs {got}"
                    )));
                }
                _ => {}
            }
            vectors.push(EmbeddingVector::new(datum.embedding).map_err(|_| {
                EmbedError::ProviderUnavailable(format!("zero/non-finite embedding for {text:?}"))
            })?);
        }
        Ok(vectors)
    }
}

fn embeddings_url(endpoint: &str) -> String {
    if endpoint.contains("/embeddings") {
        endpoint.to_string()
    } else {
        format!("{}/v1/embeddings", endpoint.trim_end_matches('/'))
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut vectors = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            vectors.extend(self.embed_batch(chunk)?);
        }
        Ok(vectors)
    }

    fn describe(&self) -> String {
        format!("remote({}, model={})", self.url, self.model)
    }
}

/// Memoizing wrapper: each distinct text is embedded at most once per
/// process, so query vectors are shared across modes and sweep points.
pub struct MemoProvider {
    inner: Arc<dyn EmbeddingProvider>,
    memo: Mutex<HashMap<String, EmbeddingVector>>,
}

impl MemoProvider {
    pub fn new(inner: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            inner,
            memo: Mutex::new(HashMap::new()),
        }
    }
}

impl EmbeddingProvider for MemoProvider {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut missing: Vec<&str> = Vec::new();
        {
            let memo = self.memo.lock().unwrap();
            for text in texts {
                if !memo.contains_key(*text) && !missing.contains(text) {
                    missing.push(text);
                }
            }
        }
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing)?;
            let mut memo = self.memo.lock().unwrap();
            for (text, vector) in missing.iter().zip(fresh) {
                memo.insert(text.to_string(), vector);
            }
        }
        let memo = self.memo.lock().unwrap();
        Ok(texts
            .iter()
            .map(|t| memo.get(*t).expect("memo filled above").clone())
            .collect())
    }

    fn describe(&self) -> String {
        format!("memo({})", self.inner.describe())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::cosine;

    #[test]
    fn hash_embedder_is_deterministic() {
        let embedder = HashEmbedder::default();
        let a = embedder.embed(&["Verify my PAN card"]).unwrap();
        let b = embedder.embed(&["Verify my PAN card"]).unwrap();
        assert_eq!(a, b, "same text must embed bit-identically");
    }

    #[test]
    fn hash_embedder_shared_tokens_positive_similarity() {
        let embedder = HashEmbedder::default();
        let vs = embedder
            .embed(&["verify pan card", "pan card details"])
            .unwrap();
        let sim = cosine(&vs[0], &vs[1]).unwrap();
        assert!(sim > 0.0, "shared tokens should give positive similarity, got {sim}");
    }

    #[test]
    fn hash_embedder_unit_norm() {
        let embedder = HashEmbedder::default();
        let vs = embedder.embed(&["one two three four"]).unwrap();
        assert!((vs[0].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hash_embedder_handles_symbol_only_text() {
        let embedder = HashEmbedder::default();
        let vs = embedder.embed(&["???"]).unwrap();
        assert_eq!(vs.len(), 1);
    }

    #[test]
    fn store_roundtrip_and_missing_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let embedder = HashEmbedder::default();
        let vector = embedder.embed(&["known text"]).unwrap().remove(0);
        PrecomputedStore::write_jsonl(&path, [("known text".to_string(), vector.clone())])
            .unwrap();

        let store = PrecomputedStore::load(&path).unwrap();
        assert_eq!(store.embed(&["known text"]).unwrap()[0], vector);
        match store.embed(&["unknown text"]) {
            Err(EmbedError::MissingEmbedding(t)) => assert_eq!(t, "unknown text"),
            other => panic!("expected MissingEmbedding, got {other:?}"),
        }
    }

    #[test]
    fn memo_provider_calls_inner_once_per_text() {
        use std::sync::atomic::{AtomicUsize, Ordering};

        struct Counting(AtomicUsize, HashEmbedder);
        impl EmbeddingProvider for Counting {
            fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
                self.0.fetch_add(texts.len(), Ordering::SeqCst);
                self.1.embed(texts)
            }
            fn describe(&self) -> String {
                "counting".into()
            }
        }

        let counting = Arc::new(Counting(AtomicUsize::new(0), HashEmbedder::default()));
        let memo = MemoProvider::new(counting.clone() as Arc<dyn EmbeddingProvider>);
        memo.embed(&["a", "b", "a"]).unwrap();
        memo.embed(&["b", "c"]).unwrap();
        assert_eq!(counting.0.load(Ordering::SeqCst), 3, "a, b, c each embedded once");
    }
}
