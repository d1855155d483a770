//! Chat-completion gateway: one entry point in front of any backend.
//!
//! The gateway owns the concerns every caller would otherwise duplicate:
//! response caching keyed by the full request, bounded retry with
//! exponential backoff on transient failures, a concurrency cap on in-flight
//! calls, and cheap atomic counters for observability.

mod cache;
mod http;
mod mock;

pub use cache::{CacheStats, ResponseCache};
pub use http::HttpBackend;
pub use mock::MockOracle;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend timed out")]
    Timeout,
    #[error("backend rate limited the request")]
    RateLimited,
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl GatewayError {
    /// Transient failures worth retrying; protocol errors are permanent.
    pub fn is_retryable(&self) -> bool {
        !matches!(self, GatewayError::Protocol(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// A chat-completion request in the common wire shape.
///
/// Field order matters: the cache key hashes the serialized form, so the
/// struct definition is the canonical ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

/// Content-addressed identity of a request: SHA-256 over its canonical JSON.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey(pub String);

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl ChatRequest {
    /// Single-user-message request, the shape every prompt here uses.
    pub fn user(model: &str, prompt: &str, temperature: f64, max_tokens: Option<u32>) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: prompt.to_string(),
            }],
            temperature,
            max_tokens,
        }
    }

    /// All message contents joined with newlines, for digesting and matching.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// SHA-256 hex of `prompt_text`; scripted mocks key on this.
    pub fn prompt_digest(&self) -> String {
        hex::encode(Sha256::digest(self.prompt_text().as_bytes()))
    }

    pub fn cache_key(&self) -> CacheKey {
        let canonical = serde_json::to_string(self).expect("chat request serializes");
        CacheKey(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub content: String,
    /// True when served from the response cache without touching the backend.
    pub cached: bool,
    pub backend: String,
}

/// Generation settings reused across every call to one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

impl ChatParams {
    pub fn new(model: &str) -> Self {
        Self {
            model: model.to_string(),
            temperature: 0.0,
            max_tokens: None,
        }
    }

    pub fn request(&self, prompt: &str) -> ChatRequest {
        ChatRequest::user(&self.model, prompt, self.temperature, self.max_tokens)
    }
}

/// Anything that can answer a chat request: HTTP servers, scripted mocks.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError>;
    fn name(&self) -> String;
}

/// Exponential backoff: attempt `n` (0-based) sleeps `base * 2^n` before
/// retrying, up to `max_retries` retries after the first attempt.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 200,
        }
    }
}

impl RetryPolicy {
    pub fn delay_for_attempt(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << attempt.min(16)))
    }
}

/// Counting semaphore bounding in-flight backend calls.
#[derive(Clone)]
pub struct Semaphore {
    inner: Arc<SemaphoreInner>,
}

struct SemaphoreInner {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        assert!(permits >= 1, "semaphore needs at least one permit");
        Self {
            inner: Arc::new(SemaphoreInner {
                permits: Mutex::new(permits),
                available: Condvar::new(),
            }),
        }
    }

    pub fn acquire(&self) -> SemaphorePermit {
        let mut permits = self.inner.permits.lock().expect("semaphore lock");
        while *permits == 0 {
            permits = self.inner.available.wait(permits).expect("semaphore wait");
        }
        *permits -= 1;
        SemaphorePermit {
            sem: Semaphore {
                inner: Arc::clone(&self.inner),
            },
        }
    }
}

pub struct SemaphorePermit {
    sem: Semaphore,
}

impl Drop for SemaphorePermit {
    fn drop(&mut self) {
        let mut permits = self.sem.inner.permits.lock().expect("semaphore lock");
        *permits += 1;
        self.sem.inner.available.notify_one();
    }
}

/// Snapshot of the gateway counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    /// Backend attempts, including every retry. Zero on a fully warm cache.
    pub backend_calls: u64,
    pub retries: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub request_chars: u64,
    pub response_chars: u64,
}

#[derive(Default)]
struct Counters {
    backend_calls: AtomicU64,
    retries: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    request_chars: AtomicU64,
    response_chars: AtomicU64,
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cache: ResponseCache,
    retry: RetryPolicy,
    semaphore: Semaphore,
    counters: Arc<Counters>,
}

pub const DEFAULT_CONCURRENCY: usize = 4;

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cache: ResponseCache) -> Self {
        Self {
            backend,
            cache,
            retry: RetryPolicy::default(),
            semaphore: Semaphore::new(DEFAULT_CONCURRENCY),
            counters: Arc::new(Counters::default()),
        }
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, permits: usize) -> Self {
        self.semaphore = Semaphore::new(permits);
        self
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn backend_name(&self) -> String {
        self.backend.name()
    }

    /// Call the backend directly, retrying transient failures.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let _permit = self.semaphore.acquire();
        let prompt_chars = request.prompt_text().chars().count() as u64;
        let mut attempt: u32 = 0;
        loop {
            self.counters.backend_calls.fetch_add(1, Ordering::Relaxed);
            self.counters
                .request_chars
                .fetch_add(prompt_chars, Ordering::Relaxed);
            match self.backend.complete(request) {
                Ok(content) => {
                    self.counters
                        .response_chars
                        .fetch_add(content.chars().count() as u64, Ordering::Relaxed);
                    return Ok(ChatResponse {
                        content,
                        cached: false,
                        backend: self.backend.name(),
                    });
                }
                Err(err) if err.is_retryable() && attempt < self.retry.max_retries => {
                    log::warn!(
                        "backend call failed (attempt {}): {err}; retrying",
                        attempt + 1
                    );
                    self.counters.retries.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(self.retry.delay_for_attempt(attempt));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }

    /// Serve from the response cache when possible, else call and record.
    pub fn complete_cached(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = request.cache_key();
        if let Some(content) = self.cache.get(&key) {
            self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(ChatResponse {
                content,
                cached: true,
                backend: self.backend.name(),
            });
        }
        self.counters.cache_misses.fetch_add(1, Ordering::Relaxed);
        let response = self.complete(request)?;
        if let Err(err) = self.cache.put(&key, request, &response.content) {
            log::warn!("failed to persist cache entry {key}: {err}");
        }
        Ok(response)
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.counters.backend_calls.load(Ordering::Relaxed),
            retries: self.counters.retries.load(Ordering::Relaxed),
            cache_hits: self.counters.cache_hits.load(Ordering::Relaxed),
            cache_misses: self.counters.cache_misses.load(Ordering::Relaxed),
            request_chars: self.counters.request_chars.load(Ordering::Relaxed),
            response_chars: self.counters.response_chars.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    /// Fails with the scripted errors, then succeeds.
    struct Flaky {
        failures: Mutex<Vec<GatewayError>>,
        response: String,
    }

    impl Flaky {
        fn new(failures: Vec<GatewayError>, response: &str) -> Self {
            Self {
                failures: Mutex::new(failures),
                response: response.to_string(),
            }
        }
    }

    impl ChatBackend for Flaky {
        fn complete(&self, _request: &ChatRequest) -> Result<String, GatewayError> {
            let mut failures = self.failures.lock().unwrap();
            if failures.is_empty() {
                Ok(self.response.clone())
            } else {
                Err(failures.remove(0))
            }
        }
        fn name(&self) -> String {
            "flaky".into()
        }
    }

    fn request(prompt: &str) -> ChatRequest {
        ChatRequest::user("test-model", prompt, 0.0, Some(64))
    }

    #[test]
    fn cache_key_is_stable_and_sensitive() {
        let a = request("classify this");
        let b = request("classify this");
        assert_eq!(a.cache_key(), b.cache_key());

        let mut c = request("classify this");
        c.temperature = 0.5;
        assert_ne!(a.cache_key(), c.cache_key());

        let mut d = request("classify this");
        d.model = "other-model".into();
        assert_ne!(a.cache_key(), d.cache_key());

        let e = request("classify that");
        assert_ne!(a.cache_key(), e.cache_key());
    }

    #[test]
    fn prompt_digest_hashes_joined_contents() {
        let mut req = request("first");
        req.messages.push(ChatMessage {
            role: Role::User,
            content: "second".into(),
        });
        assert_eq!(req.prompt_text(), "first\nsecond");
        let expected = hex::encode(Sha256::digest("first\nsecond".as_bytes()));
        assert_eq!(req.prompt_digest(), expected);
    }

    #[test]
    fn retries_transient_failures_then_succeeds() {
        let backend = Flaky::new(
            vec![GatewayError::RateLimited, GatewayError::Timeout],
            "final answer",
        );
        let gateway = Gateway::new(Arc::new(backend), ResponseCache::ephemeral())
            .with_retry_policy(RetryPolicy {
                max_retries: 3,
                base_delay_ms: 1,
            });
        let response = gateway.complete(&request("q")).unwrap();
        assert_eq!(response.content, "final answer");
        assert!(!response.cached);
        let stats = gateway.stats();
        assert_eq!(stats.backend_calls, 3);
        assert_eq!(stats.retries, 2);
    }

    #[test]
    fn protocol_errors_do_not_retry() {
        let backend = Flaky::new(vec![GatewayError::Protocol("bad".into())], "unused");
        let gateway = Gateway::new(Arc::new(backend), ResponseCache::ephemeral())
            .with_retry_policy(RetryPolicy {
                max_retries: 3,
                base_delay_ms: 1,
            });
        assert!(matches!(
            gateway.complete(&request("q")),
            Err(GatewayError::Protocol(_))
        ));
        assert_eq!(gateway.stats().backend_calls, 1);
        assert_eq!(gateway.stats().retries, 0);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let backend = Flaky::new(
            vec![
                GatewayError::Timeout,
                GatewayError::Timeout,
                GatewayError::Timeout,
            ],
            "never reached",
        );
        let gateway = Gateway::new(Arc::new(backend), ResponseCache::ephemeral())
            .with_retry_policy(RetryPolicy {
                max_retries: 2,
                base_delay_ms: 1,
            });
        assert!(matches!(
            gateway.complete(&request("q")),
            Err(GatewayError::Timeout)
        ));
        // 1 initial + 2 retries
        assert_eq!(gateway.stats().backend_calls, 3);
        assert_eq!(gateway.stats().retries, 2);
    }

    #[test]
    fn cached_completion_skips_the_backend() {
        let backend = Flaky::new(vec![], "answer");
        let gateway = Gateway::new(Arc::new(backend), ResponseCache::ephemeral());
        let first = gateway.complete_cached(&request("q")).unwrap();
        assert!(!first.cached);
        let second = gateway.complete_cached(&request("q")).unwrap();
        assert!(second.cached);
        assert_eq!(second.content, "answer");
        let stats = gateway.stats();
        assert_eq!(stats.backend_calls, 1);
        assert_eq!(stats.cache_hits, 1);
        assert_eq!(stats.cache_misses, 1);
    }

    #[test]
    fn semaphore_caps_concurrent_backend_calls() {
        struct Gauge {
            in_flight: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatBackend for Gauge {
            fn complete(&self, _request: &ChatRequest) -> Result<String, GatewayError> {
                let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(10));
                self.in_flight.fetch_sub(1, Ordering::SeqCst);
                Ok("ok".into())
            }
            fn name(&self) -> String {
                "gauge".into()
            }
        }

        let gauge = Arc::new(Gauge {
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gateway = Arc::new(
            Gateway::new(gauge.clone() as Arc<dyn ChatBackend>, ResponseCache::ephemeral())
                .with_concurrency(2),
        );

        std::thread::scope(|scope| {
            for i in 0..8 {
                let gateway = Arc::clone(&gateway);
                scope.spawn(move || {
                    gateway.complete(&request(&format!("q{i}"))).unwrap();
                });
            }
        });
        assert!(gauge.peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(gateway.stats().backend_calls, 8);
    }

    #[test]
    fn backoff_delay_doubles_per_attempt() {
        let policy = RetryPolicy {
            max_retries: 5,
            base_delay_ms: 100,
        };
        assert_eq!(policy.delay_for_attempt(0), Duration::from_millis(100));
        assert_eq!(policy.delay_for_attempt(1), Duration::from_millis(200));
        assert_eq!(policy.delay_for_attempt(2), Duration::from_millis(400));
        assert_eq!(policy.delay_for_attempt(3), Duration::from_millis(800));
    }
}
