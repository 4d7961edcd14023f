//! Chat-completion access to remote providers and to a deterministic mock.
//!
//! Every provider is reached through [`ChatProvider`]. Remote providers speak
//! the common chat-completions wire format (`model`, `messages`,
//! `temperature` in; `choices[0].message.content` out). Credentials are read
//! from the environment variable named in the config at call time and are
//! never stored or logged.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("{provider}: authentication failed: {reason}")]
    Auth { provider: String, reason: String },
    #[error("{provider}: timed out after {attempts} attempts")]
    Timeout { provider: String, attempts: u32 },
    #[error("{provider}: rate limited after {attempts} attempts")]
    RateLimited { provider: String, attempts: u32 },
    #[error("{provider}: transport failure after {attempts} attempts: {message}")]
    Transport {
        provider: String,
        attempts: u32,
        message: String,
    },
    #[error("{provider}: HTTP {status}: {excerpt}")]
    Http {
        provider: String,
        status: u16,
        excerpt: String,
    },
    #[error("{provider}: malformed provider payload: {message}")]
    Malformed { provider: String, message: String },
    #[error("{provider}: no fixture for request {digest}")]
    NoFixture { provider: String, digest: String },
    #[error("mock fixture: {0}")]
    Fixture(String),
    #[error("chat request has no messages")]
    EmptyRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HttpChat,
    Mock,
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub name: String,
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Mock fixture file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
}

impl ProviderConfig {
    pub fn mock(name: &str, model_name: &str, temperature: f64) -> Self {
        ProviderConfig {
            name: name.into(),
            kind: ProviderKind::Mock,
            endpoint: None,
            model_name: model_name.into(),
            temperature,
            auth_env: None,
            timeout_ms: default_timeout_ms(),
            max_retries: 0,
            backoff_base_ms: 0,
            max_in_flight: default_max_in_flight(),
            fixture: None,
        }
    }

    pub fn http(name: &str, endpoint: &str, model_name: &str, temperature: f64, auth_env: &str) -> Self {
        ProviderConfig {
            name: name.into(),
            kind: ProviderKind::HttpChat,
            endpoint: Some(endpoint.into()),
            model_name: model_name.into(),
            temperature,
            auth_env: Some(auth_env.into()),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
            max_in_flight: default_max_in_flight(),
            fixture: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.name.trim().is_empty() {
            return Err(GatewayError::Config("provider name is empty".into()));
        }
        check_temperature(self.temperature)?;
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config(format!("{}: max_in_flight must be >= 1", self.name)));
        }
        match self.kind {
            ProviderKind::HttpChat => {
                if self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
                    return Err(GatewayError::Config(format!("{}: http_chat needs an endpoint", self.name)));
                }
                if self.auth_env.as_deref().is_none_or(|e| e.trim().is_empty()) {
                    return Err(GatewayError::Config(format!("{}: http_chat needs auth_env", self.name)));
                }
            }
            ProviderKind::Mock => {}
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn backoff_base(&self) -> Duration {
        Duration::from_millis(self.backoff_base_ms)
    }
}

fn check_temperature(t: f64) -> Result<(), GatewayError> {
    if !(0.0..=2.0).contains(&t) {
        return Err(GatewayError::Config(format!("temperature {t} outside [0, 2]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_override: Option<f64>,
    /// Free-form label carried into logs; not part of the digest.
    #[serde(default)]
    pub tag: String,
}

impl ChatRequest {
    pub fn single(prompt: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![ChatMessage::user(prompt)],
            temperature_override: None,
            tag: String::new(),
        }
    }

    pub fn with_temperature(mut self, t: Option<f64>) -> Self {
        self.temperature_override = t;
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    /// All message contents joined by blank lines.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub provider_name: String,
    pub latency: Duration,
    pub attempt_count: u32,
}

/// Effective sampling temperature for a request.
pub fn effective_temperature(p: &ProviderConfig, r: &ChatRequest) -> f64 {
    r.temperature_override.unwrap_or(p.temperature)
}

/// Hex SHA-256 over provider name, model, effective temperature and the
/// message list. Stable across processes; used as cache and fixture key.
pub fn request_digest(p: &ProviderConfig, r: &ChatRequest) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        provider: &'a str,
        model: &'a str,
        temperature: f64,
        messages: &'a [ChatMessage],
    }
    let canonical = Canonical {
        provider: &p.name,
        model: &p.model_name,
        temperature: effective_temperature(p, r),
        messages: &r.messages,
    };
    let bytes = serde_json::to_vec(&canonical).expect("request serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub trait ChatProvider: Send + Sync {
    fn config(&self) -> &ProviderConfig;

    fn complete(&self, r: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    fn name(&self) -> &str {
        &self.config().name
    }

    fn digest(&self, r: &ChatRequest) -> String {
        request_digest(self.config(), r)
    }
}

fn check_request(r: &ChatRequest) -> Result<(), GatewayError> {
    if r.messages.is_empty() {
        return Err(GatewayError::EmptyRequest);
    }
    if let Some(t) = r.temperature_override {
        check_temperature(t)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Mock provider

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    /// Regex matched against the whole conversation (see
    /// [`ChatRequest::transcript`]); `.` also matches newlines.
    pub pattern: String,
    pub response: String,
}

/// Mock fixture file: exact digests first, then rules in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
}

impl MockFixture {
    pub fn read(path: &Path) -> Result<MockFixture, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))
    }
}

/// Builds a mock provider config from a fixture file. Name, model and
/// temperature come from the fixture when present.
pub fn mock_from_fixture(path: &Path) -> Result<ProviderConfig, GatewayError> {
    let fx = MockFixture::read(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mock".into());
    let name = fx.name.clone().unwrap_or(stem);
    let model = fx.model_name.clone().unwrap_or_else(|| name.clone());
    let mut cfg = ProviderConfig::mock(&name, &model, fx.temperature.unwrap_or(0.0));
    cfg.fixture = Some(path.to_path_buf());
    cfg.validate()?;
    Ok(cfg)
}

/// Pure provider: the same request always yields the same response.
pub struct MockProvider {
    config: ProviderConfig,
    responses: BTreeMap<String, String>,
    rules: Vec<(Regex, String)>,
}

impl fmt::Debug for MockProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockProvider")
            .field("name", &self.config.name)
            .field("responses", &self.responses.len())
            .field("rules", &self.rules.len())
            .finish()
    }
}

impl MockProvider {
    pub fn new(config: ProviderConfig, fixture: MockFixture) -> Result<Self, GatewayError> {
        config.validate()?;
        let rules = fixture
            .rules
            .into_iter()
            .map(|r| {
                RegexBuilder::new(&r.pattern)
                    .dot_matches_new_line(true)
                    .build()
                    .map(|re| (re, r.response))
                    .map_err(|e| GatewayError::Fixture(format!("rule `{}`: {e}", r.pattern)))
            })
            .collect::<Result<_, _>>()?;
        Ok(MockProvider {
            config,
            responses: fixture.responses,
            rules,
        })
    }

    /// Loads the fixture named by `config.fixture`.
    pub fn from_config(config: ProviderConfig) -> Result<Self, GatewayError> {
        let path = config
            .fixture
            .clone()
            .ok_or_else(|| GatewayError::Config(format!("{}: mock provider needs a fixture", config.name)))?;
        let fixture = MockFixture::read(&path)?;
        MockProvider::new(config, fixture)
    }
}

impl ChatProvider for MockProvider {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn complete(&self, r: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        check_request(r)?;
        let digest = self.digest(r);
        let content = match self.responses.get(&digest) {
            Some(c) => c.clone(),
            None => {
                let text = r.transcript();
                self.rules
                    .iter()
                    .find(|(re, _)| re.is_match(&text))
                    .map(|(_, resp)| resp.clone())
                    .ok_or_else(|| GatewayError::NoFixture {
                        provider: self.config.name.clone(),
                        digest,
                    })?
            }
        };
        Ok(ChatResponse {
            content,
            provider_name: self.config.name.clone(),
            latency: Duration::ZERO,
            attempt_count: 1,
        })
    }
}

// ---------------------------------------------------------------------------
// HTTP provider

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Other(String),
}

/// One HTTP POST. Split out so retry policy can be tested without a network.
pub trait Transport: Send + Sync {
    fn post(
        &self,
        endpoint: &str,
        headers: &[(&str, &str)],
        body: &str,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post(
        &self,
        endpoint: &str,
        headers: &[(&str, &str)],
        body: &str,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(endpoint);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Other(other.to_string()),
        };
        let mut resp = req.send(body).map_err(map_err)?;
        let status = resp.status().as_u16();
        let mut text = String::new();
        resp.body_mut()
            .as_reader()
            .read_to_string(&mut text)
            .map_err(|e| TransportError::Other(e.to_string()))?;
        Ok(HttpReply { status, body: text })
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

/// Exact request body sent for `r`.
pub fn wire_payload(p: &ProviderConfig, r: &ChatRequest) -> String {
    serde_json::to_string(&WireRequest {
        model: &p.model_name,
        messages: &r.messages,
        temperature: effective_temperature(p, r),
    })
    .expect("wire request serializes")
}

fn extract_content(body: &str) -> Result<String, String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| e.to_string())?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_owned)
        .ok_or_else(|| "missing choices[0].message.content".to_string())
}

pub struct HttpChatProvider<T: Transport = UreqTransport> {
    config: ProviderConfig,
    transport: T,
}

impl<T: Transport> fmt::Debug for HttpChatProvider<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpChatProvider")
            .field("name", &self.config.name)
            .field("endpoint", &self.config.endpoint)
            .finish_non_exhaustive()
    }
}

impl HttpChatProvider<UreqTransport> {
    pub fn new(config: ProviderConfig) -> Result<Self, GatewayError> {
        HttpChatProvider::with_transport(config, UreqTransport)
    }
}

impl<T: Transport> HttpChatProvider<T> {
    pub fn with_transport(config: ProviderConfig, transport: T) -> Result<Self, GatewayError> {
        config.validate()?;
        if config.kind != ProviderKind::HttpChat {
            return Err(GatewayError::Config(format!("{} is not an http_chat provider", config.name)));
        }
        Ok(HttpChatProvider { config, transport })
    }

    fn credential(&self) -> Result<String, GatewayError> {
        let var = self.config.auth_env.as_deref().unwrap_or_default();
        match std::env::var(var) {
            Ok(v) if !v.trim().is_empty() => Ok(v),
            _ => Err(GatewayError::Auth {
                provider: self.config.name.clone(),
                reason: format!("environment variable {var} is not set"),
            }),
        }
    }
}

impl<T: Transport> ChatProvider for HttpChatProvider<T> {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn complete(&self, r: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        check_request(r)?;
        let key = self.credential()?;
        let auth = format!("Bearer {key}");
        let headers = [("Authorization", auth.as_str()), ("Content-Type", "application/json")];
        let body = wire_payload(&self.config, r);
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        let provider = || self.config.name.clone();
        let start = Instant::now();
        let max_attempts = self.config.max_retries + 1;
        let mut last = GatewayError::Transport {
            provider: provider(),
            attempts: 0,
            message: "no attempt made".into(),
        };

        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let factor = 1u32 << (attempt - 2).min(16);
                std::thread::sleep(self.config.backoff_base() * factor);
            }
            match self.transport.post(endpoint, &headers, &body, self.config.timeout()) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let content = extract_content(&reply.body).map_err(|message| GatewayError::Malformed {
                        provider: provider(),
                        message,
                    })?;
                    return Ok(ChatResponse {
                        content,
                        provider_name: provider(),
                        latency: start.elapsed(),
                        attempt_count: attempt,
                    });
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(GatewayError::Auth {
                        provider: provider(),
                        reason: format!("HTTP {}", reply.status),
                    });
                }
                Ok(reply) if reply.status == 429 => {
                    log::warn!("{}: rate limited (attempt {attempt})", self.config.name);
                    last = GatewayError::RateLimited {
                        provider: provider(),
                        attempts: attempt,
                    };
                }
                Ok(reply) if reply.status >= 500 || reply.status == 408 => {
                    log::warn!("{}: HTTP {} (attempt {attempt})", self.config.name, reply.status);
                    last = GatewayError::Transport {
                        provider: provider(),
                        attempts: attempt,
                        message: format!("HTTP {}", reply.status),
                    };
                }
                Ok(reply) => {
                    return Err(GatewayError::Http {
                        provider: provider(),
                        status: reply.status,
                        excerpt: reply.body.chars().take(200).collect(),
                    });
                }
                Err(TransportError::Timeout) => {
                    log::warn!("{}: timeout (attempt {attempt})", self.config.name);
                    last = GatewayError::Timeout {
                        provider: provider(),
                        attempts: attempt,
                    };
                }
                Err(TransportError::Other(message)) => {
                    log::warn!("{}: {message} (attempt {attempt})", self.config.name);
                    last = GatewayError::Transport {
                        provider: provider(),
                        attempts: attempt,
                        message,
                    };
                }
            }
        }
        Err(last)
    }
}

// ---------------------------------------------------------------------------
// Wrappers

/// Counting semaphore.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.sem.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.sem.cv.notify_one();
    }
}

/// Caps outstanding requests to the inner provider at `max_in_flight`.
pub struct Throttled<P> {
    inner: P,
    sem: Semaphore,
}

impl<P: ChatProvider> Throttled<P> {
    pub fn new(inner: P) -> Self {
        let permits = inner.config().max_in_flight.max(1);
        Throttled {
            inner,
            sem: Semaphore::new(permits),
        }
    }
}

impl<P: ChatProvider> ChatProvider for Throttled<P> {
    fn config(&self) -> &ProviderConfig {
        self.inner.config()
    }

    fn complete(&self, r: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let _permit = self.sem.acquire();
        self.inner.complete(r)
    }
}

/// Counts calls that reach the inner provider.
pub struct Counting<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P: ChatProvider> Counting<P> {
    pub fn new(inner: P) -> Self {
        Counting {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<P: ChatProvider> ChatProvider for Counting<P> {
    fn config(&self) -> &ProviderConfig {
        self.inner.config()
    }

    fn complete(&self, r: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(r)
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Arc<P> {
    fn config(&self) -> &ProviderConfig {
        (**self).config()
    }

    fn complete(&self, r: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(r)
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for &P {
    fn config(&self) -> &ProviderConfig {
        (**self).config()
    }

    fn complete(&self, r: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(r)
    }
}

/// Builds the provider a config describes, wrapped in its concurrency cap.
pub fn connect(config: &ProviderConfig) -> Result<Arc<dyn ChatProvider>, GatewayError> {
    config.validate()?;
    Ok(match config.kind {
        ProviderKind::Mock => Arc::new(Throttled::new(MockProvider::from_config(config.clone())?)),
        ProviderKind::HttpChat => Arc::new(Throttled::new(HttpChatProvider::new(config.clone())?)),
    })
}

/// Calls `complete` once and returns the whole answer; convenience for
/// single-prompt protocols.
pub fn complete(p: &dyn ChatProvider, r: &ChatRequest) -> Result<ChatResponse, GatewayError> {
    p.complete(r)
}
