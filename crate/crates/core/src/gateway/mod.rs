//! Chat-completion gateway.
//!
//! One `complete` entry point over interchangeable backends (live HTTP,
//! on-disk replay, scripted mock). The gateway owns the read-through replay
//! cache, the retry loop, the in-flight limiter, request pacing and the run
//! log. Backends only perform a single exchange.

mod cache;
mod http;
mod mock;

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ReplayCache;
pub use http::{HttpBackend, HttpConfig};
pub use mock::{KindMarkers, MockBackend, MockFallback, MockRule, MockScript};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("no credential: environment variable {0} is not set")]
    AuthMissing(String),
    #[error("credential rejected (HTTP {0})")]
    AuthRejected(u16),
    #[error("rate limited")]
    RateLimited,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    BadResponse(String),
    #[error("replay cache has no entry for {0}")]
    CacheMiss(String),
    #[error("mock script has no rule for this prompt ({0})")]
    MockUnscripted(String),
    #[error("cache i/o: {0}")]
    Cache(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::RateLimited | GatewayError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Replay,
    Mock,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Http => "http",
            BackendKind::Replay => "replay",
            BackendKind::Mock => "mock",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub prompt: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Distinguishes deliberate re-asks of the same prompt (e.g. after an
    /// unparseable answer) so each gets its own cache entry. Zero for the
    /// first ask, which leaves the digest a function of prompt, model and
    /// temperature only.
    pub variant: u32,
}

impl LlmRequest {
    pub fn new(prompt: impl Into<String>, model: impl Into<String>, temperature: f64) -> Self {
        Self {
            prompt: prompt.into(),
            model: model.into(),
            temperature,
            max_output_tokens: 4096,
            variant: 0,
        }
    }

    /// SHA-256 over a length-prefixed encoding of the identifying fields.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"llm-request/v1\n");
        for (tag, value) in [("prompt", self.prompt.as_bytes()), ("model", self.model.as_bytes())] {
            h.update(format!("{tag}:{}:", value.len()).as_bytes());
            h.update(value);
            h.update(b"\n");
        }
        h.update(format!("temperature:{:016x}\n", self.temperature.to_bits()).as_bytes());
        if self.variant > 0 {
            h.update(format!("variant:{}\n", self.variant).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// What a backend returns for one exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmResponse {
    /// Exactly what the backend returned.
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub backend: BackendKind,
    pub attempt: u32,
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn send(&self, request: &LlmRequest) -> Result<Completion, GatewayError>;
}

/// Serves completions from a replay cache only.
pub struct ReplayBackend {
    cache: ReplayCache,
}

impl ReplayBackend {
    pub fn new(cache: ReplayCache) -> Self {
        Self { cache }
    }
}

impl ChatBackend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn send(&self, request: &LlmRequest) -> Result<Completion, GatewayError> {
        let digest = request.digest();
        self.cache
            .get(&digest)?
            .map(Completion::text)
            .ok_or(GatewayError::CacheMiss(digest))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub jitter_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 1000,
            jitter_ms: 250,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `next` (2-based): base * 2^(next-2) plus jitter.
    fn delay(&self, next: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << (next.saturating_sub(2)).min(16));
        let jitter = if self.jitter_ms > 0 {
            rand::thread_rng().gen_range(0..=self.jitter_ms)
        } else {
            0
        };
        Duration::from_millis(exp.saturating_add(jitter))
    }
}

/// Counters describing what the gateway actually did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GatewayStats {
    pub http_calls: u64,
    pub mock_calls: u64,
    pub replay_hits: u64,
    pub cache_writes: u64,
    pub errors: u64,
    pub max_in_flight_observed: usize,
}

impl fmt::Display for GatewayStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "http_calls={} mock_calls={} replay_hits={} cache_writes={} errors={} max_in_flight={}",
            self.http_calls,
            self.mock_calls,
            self.replay_hits,
            self.cache_writes,
            self.errors,
            self.max_in_flight_observed
        )
    }
}

#[derive(Default)]
struct Counters {
    http_calls: AtomicU64,
    mock_calls: AtomicU64,
    replay_hits: AtomicU64,
    cache_writes: AtomicU64,
    errors: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

struct InFlightLimiter {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.max {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        InFlightGuard { limiter: self }
    }
}

struct InFlightGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.limiter.used.lock().unwrap() -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Spaces request starts at least `interval` apart.
struct Pacer {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl Pacer {
    fn wait_turn(&self) -> Duration {
        let mut next = self.next.lock().unwrap();
        let now = Instant::now();
        let start = match *next {
            Some(t) if t > now => t,
            _ => now,
        };
        *next = Some(start + self.interval);
        start - now
    }
}

#[derive(Serialize)]
struct LogRecord<'a> {
    digest: &'a str,
    model: &'a str,
    backend: BackendKind,
    attempt: u32,
    latency_ms: u64,
    outcome: &'a str,
    prompt_head: &'a str,
}

const PROMPT_HEAD_CHARS: usize = 160;

#[derive(Debug, Clone)]
pub struct GatewayOptions {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub requests_per_minute: Option<u32>,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            requests_per_minute: None,
        }
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    cache: Option<ReplayCache>,
    retry: RetryPolicy,
    limiter: InFlightLimiter,
    pacer: Option<Pacer>,
    counters: Counters,
    log: Option<Mutex<File>>,
    sleeper: Sleeper,
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>, options: GatewayOptions) -> Self {
        let pacer = options
            .requests_per_minute
            .filter(|rpm| *rpm > 0)
            .map(|rpm| Pacer {
                interval: Duration::from_secs_f64(60.0 / f64::from(rpm)),
                next: Mutex::new(None),
            });
        Self {
            backend,
            cache: None,
            retry: options.retry,
            limiter: InFlightLimiter {
                max: options.max_in_flight.max(1),
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
            pacer,
            counters: Counters::default(),
            log: None,
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    /// Serve repeated requests from `cache` and store fresh completions in it.
    pub fn with_cache(mut self, cache: ReplayCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Append one JSON line per exchange to `path`.
    pub fn with_run_log(mut self, path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.max
    }

    pub fn stats(&self) -> GatewayStats {
        let c = &self.counters;
        GatewayStats {
            http_calls: c.http_calls.load(Ordering::SeqCst),
            mock_calls: c.mock_calls.load(Ordering::SeqCst),
            replay_hits: c.replay_hits.load(Ordering::SeqCst),
            cache_writes: c.cache_writes.load(Ordering::SeqCst),
            errors: c.errors.load(Ordering::SeqCst),
            max_in_flight_observed: c.max_in_flight.load(Ordering::SeqCst),
        }
    }

    /// Cache lookup, then the backend under the gateway's retry policy.
    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        if self.backend.kind() != BackendKind::Replay {
            if let Some(cache) = &self.cache {
                let digest = request.digest();
                if let Some(text) = cache.get(&digest)? {
                    self.counters.replay_hits.fetch_add(1, Ordering::SeqCst);
                    self.write_log(request, &digest, BackendKind::Replay, 1, 0, "cache_hit");
                    return Ok(LlmResponse {
                        text,
                        prompt_tokens: 0,
                        completion_tokens: 0,
                        latency_ms: 0,
                        backend: BackendKind::Replay,
                        attempt: 1,
                    });
                }
            }
        }
        let response = self.with_retry(request, &self.retry)?;
        if response.backend != BackendKind::Replay {
            if let Some(cache) = &self.cache {
                cache.put(&request.digest(), &response.text)?;
                self.counters.cache_writes.fetch_add(1, Ordering::SeqCst);
            }
        }
        Ok(response)
    }

    /// Calls the backend, retrying rate-limit and transport failures with
    /// exponential backoff. Does not consult the cache.
    pub fn with_retry(
        &self,
        request: &LlmRequest,
        policy: &RetryPolicy,
    ) -> Result<LlmResponse, GatewayError> {
        let max_attempts = policy.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.send_once(request, attempt) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retryable() && attempt < max_attempts => {
                    attempt += 1;
                    (self.sleeper)(policy.delay(attempt));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn send_once(&self, request: &LlmRequest, attempt: u32) -> Result<LlmResponse, GatewayError> {
        let kind = self.backend.kind();
        let _slot = self.limiter.acquire();
        if let Some(pacer) = &self.pacer {
            let wait = pacer.wait_turn();
            if !wait.is_zero() {
                (self.sleeper)(wait);
            }
        }
        let now_in_flight = self.counters.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.counters
            .max_in_flight
            .fetch_max(now_in_flight, Ordering::SeqCst);
        match kind {
            BackendKind::Http => &self.counters.http_calls,
            BackendKind::Mock => &self.counters.mock_calls,
            BackendKind::Replay => &self.counters.replay_hits,
        }
        .fetch_add(1, Ordering::SeqCst);

        let started = Instant::now();
        let result = self.backend.send(request);
        let latency_ms = started.elapsed().as_millis() as u64;
        self.counters.in_flight.fetch_sub(1, Ordering::SeqCst);

        let digest = request.digest();
        match result {
            Ok(c) => {
                self.write_log(request, &digest, kind, attempt, latency_ms, "ok");
                Ok(LlmResponse {
                    text: c.text,
                    prompt_tokens: c.prompt_tokens,
                    completion_tokens: c.completion_tokens,
                    latency_ms,
                    backend: kind,
                    attempt,
                })
            }
            Err(e) => {
                self.counters.errors.fetch_add(1, Ordering::SeqCst);
                self.write_log(request, &digest, kind, attempt, latency_ms, &e.to_string());
                Err(e)
            }
        }
    }

    fn write_log(
        &self,
        request: &LlmRequest,
        digest: &str,
        backend: BackendKind,
        attempt: u32,
        latency_ms: u64,
        outcome: &str,
    ) {
        let Some(log) = &self.log else { return };
        let head_end = request
            .prompt
            .char_indices()
            .nth(PROMPT_HEAD_CHARS)
            .map(|(i, _)| i)
            .unwrap_or(request.prompt.len());
        let record = LogRecord {
            digest,
            model: &request.model,
            backend,
            attempt,
            latency_ms,
            outcome,
            prompt_head: &request.prompt[..head_end],
        };
        let mut line = serde_json::to_string(&record).expect("log record serializes");
        line.push('\n');
        // The run log is an audit aid; a failed write must not fail the exchange.
        let _ = log.lock().unwrap().write_all(line.as_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    struct Flaky {
        failures: u32,
        error: GatewayError,
        calls: AtomicU32,
    }

    impl ChatBackend for Flaky {
        fn kind(&self) -> BackendKind {
            BackendKind::Http
        }

        fn send(&self, _: &LlmRequest) -> Result<Completion, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(self.error.clone())
            } else {
                Ok(Completion::text("IS_MALICIOUS: no"))
            }
        }
    }

    fn flaky(failures: u32, error: GatewayError) -> Gateway {
        Gateway::new(
            Box::new(Flaky {
                failures,
                error,
                calls: AtomicU32::new(0),
            }),
            GatewayOptions {
                max_in_flight: 2,
                retry: RetryPolicy {
                    max_attempts: 3,
                    base_delay_ms: 10,
                    jitter_ms: 5,
                },
                requests_per_minute: None,
            },
        )
        .with_sleeper(|_| {})
    }

    fn req() -> LlmRequest {
        LlmRequest::new("prompt", "model-x", 0.0)
    }

    #[test]
    fn digest_is_stable_and_field_sensitive() {
        let a = req();
        assert_eq!(a.digest(), req().digest());
        assert_eq!(a.digest().len(), 64);
        // Frozen value (computed with Python hashlib over the same encoding).
        assert_eq!(
            a.digest(),
            "dc10351516be41bd1eedaf65c159abaa191ce1701f3fb23692ce9d2ac39a7a0b"
        );
        let mut b = req();
        b.temperature = 0.2;
        assert_ne!(a.digest(), b.digest());
        let mut c = req();
        c.model = "model-y".into();
        assert_ne!(a.digest(), c.digest());
        let mut d = req();
        d.max_output_tokens = 1;
        assert_eq!(a.digest(), d.digest());
        let mut e = req();
        e.variant = 1;
        assert_ne!(a.digest(), e.digest());
    }

    #[test]
    fn retries_until_success() {
        let g = flaky(2, GatewayError::RateLimited);
        let r = g.complete(&req()).unwrap();
        assert_eq!(r.attempt, 3);
        assert_eq!(g.stats().http_calls, 3);
        assert_eq!(g.stats().errors, 2);
    }

    #[test]
    fn no_retry_with_single_attempt() {
        let g = flaky(1, GatewayError::Transport("reset".into()));
        let policy = RetryPolicy {
            max_attempts: 1,
            base_delay_ms: 0,
            jitter_ms: 0,
        };
        assert_eq!(
            g.with_retry(&req(), &policy),
            Err(GatewayError::Transport("reset".into()))
        );
        assert_eq!(g.stats().http_calls, 1);
    }

    #[test]
    fn auth_errors_are_not_retried() {
        let g = flaky(5, GatewayError::AuthMissing("KEY".into()));
        assert_eq!(g.complete(&req()), Err(GatewayError::AuthMissing("KEY".into())));
        assert_eq!(g.stats().http_calls, 1);
    }

    #[test]
    fn exhausting_retries_returns_last_error() {
        let g = flaky(10, GatewayError::RateLimited);
        assert_eq!(g.complete(&req()), Err(GatewayError::RateLimited));
        assert_eq!(g.stats().http_calls, 3);
    }

    #[test]
    fn backoff_grows() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 100,
            jitter_ms: 0,
        };
        assert_eq!(p.delay(2), Duration::from_millis(100));
        assert_eq!(p.delay(3), Duration::from_millis(200));
        assert_eq!(p.delay(4), Duration::from_millis(400));
    }

    #[test]
    fn cache_read_through_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let g = flaky(0, GatewayError::RateLimited).with_cache(ReplayCache::new(dir.path()).unwrap());
        let first = g.complete(&req()).unwrap();
        assert_eq!(first.backend, BackendKind::Http);
        let second = g.complete(&req()).unwrap();
        assert_eq!((second.backend, second.attempt), (BackendKind::Replay, 1));
        assert_eq!(second.text, first.text);
        assert_eq!(g.stats().http_calls, 1);
        assert_eq!(g.stats().replay_hits, 1);

        let replay = Gateway::new(
            Box::new(ReplayBackend::new(ReplayCache::new(dir.path()).unwrap())),
            GatewayOptions::default(),
        );
        let r = replay.complete(&req()).unwrap();
        assert_eq!((r.text.as_str(), r.backend, r.attempt), ("IS_MALICIOUS: no", BackendKind::Replay, 1));
        let mut other = req();
        other.prompt = "unseen".into();
        assert!(matches!(replay.complete(&other), Err(GatewayError::CacheMiss(_))));
    }

    #[test]
    fn in_flight_bounded() {
        struct Slow;
        impl ChatBackend for Slow {
            fn kind(&self) -> BackendKind {
                BackendKind::Mock
            }
            fn send(&self, _: &LlmRequest) -> Result<Completion, GatewayError> {
                std::thread::sleep(Duration::from_millis(5));
                Ok(Completion::text("x"))
            }
        }
        let g = Gateway::new(
            Box::new(Slow),
            GatewayOptions {
                max_in_flight: 3,
                ..GatewayOptions::default()
            },
        );
        std::thread::scope(|s| {
            for i in 0..12 {
                let g = &g;
                s.spawn(move || g.complete(&LlmRequest::new(format!("p{i}"), "m", 0.0)).unwrap());
            }
        });
        let stats = g.stats();
        assert_eq!(stats.mock_calls, 12);
        assert!(stats.max_in_flight_observed <= 3);
        assert!(stats.max_in_flight_observed >= 1);
    }

    #[test]
    fn run_log_records_exchanges() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("logs/run.jsonl");
        let g = flaky(1, GatewayError::RateLimited).with_run_log(&log).unwrap();
        g.complete(&req()).unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        let lines: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["outcome"], "rate limited");
        assert_eq!(lines[1]["outcome"], "ok");
        assert_eq!(lines[1]["attempt"], 2);
        assert_eq!(lines[1]["digest"], req().digest());
        assert_eq!(lines[1]["prompt_head"], "prompt");
    }
}
