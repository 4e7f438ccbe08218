//! Chat-completion client.
//!
//! [`Gateway`] speaks the common chat-completion JSON protocol over a
//! pluggable [`Transport`], retries transient failures with exponential
//! backoff and bounds the number of requests in flight. [`MockLlm`] is a
//! deterministic offline stand-in.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::prompting::RenderedPrompt;

pub const API_KEY_ENV: &str = "TOPICTAG_API_KEY";
const REDACTED: &str = "[REDACTED]";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("endpoint returned HTTP {status}: {body}")]
    Protocol { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("response has no completion text")]
    MissingText,
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("trace log {path}: {source}")]
    Trace {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model_id: "mock".into(),
            temperature: 0.7,
            top_p: 0.95,
            max_tokens: 512,
            stop: Vec::new(),
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidParams(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidParams("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Remote,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedHandling {
    NotRequested,
    Forwarded,
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: f64,
    pub backend: Backend,
    pub retries: u32,
    pub seed: SeedHandling,
}

pub trait LlmClient: Send + Sync {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<Completion, GatewayError>;
}

/// Deterministic offline backend. The answer is built from the first two
/// injected top words, so different feature selections yield different
/// labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockLlm;

impl LlmClient for MockLlm {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<Completion, GatewayError> {
        params.validate()?;
        Ok(mock_complete(prompt, params))
    }
}

pub fn mock_complete(prompt: &RenderedPrompt, params: &GenerationParams) -> Completion {
    let words = &prompt.manifest.top_words;
    let label = if words.is_empty() {
        "untitled".to_owned()
    } else {
        words.iter().take(2).cloned().collect::<Vec<_>>().join(" ")
    };
    let text = format!(
        "Step 1: Reviewed {} document features and drafted four guesses.\nStep 2: Refined the guesses against the top words.\nStep 3: <<{label}>>",
        prompt.manifest.item_count()
    );
    let count = |s: &str| s.split_whitespace().count() as u64;
    Completion {
        prompt_tokens: count(&prompt.system) + count(&prompt.user),
        completion_tokens: count(&text),
        text,
        latency_ms: 0.0,
        backend: Backend::Mock,
        retries: 0,
        seed: if params.seed.is_some() {
            SeedHandling::Forwarded
        } else {
            SeedHandling::NotRequested
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Connection(String),
}

/// One HTTP POST with a JSON body.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, TransportError> {
        let mut request = self.client.post(url).json(body);
        for (name, value) in headers {
            request = request.header(name.as_str(), value.as_str());
        }
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connection(e.to_string())
            }
        };
        let response = request.send().map_err(classify)?;
        let status = response.status().as_u16();
        let body = response.text().map_err(classify)?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Endpoint root, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    /// Total attempts per request, the first one included.
    pub max_attempts: u32,
    /// Delay before retry `i` is `backoff_base * 2^i`.
    pub backoff_base: Duration,
    pub max_in_flight: usize,
    pub timeout: Duration,
    /// Whether the endpoint accepts a `seed` field.
    pub forward_seed: bool,
    pub trace_path: Option<PathBuf>,
}

impl GatewayConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            max_in_flight: 4,
            timeout: Duration::from_secs(60),
            forward_seed: true,
            trace_path: None,
        }
    }

    /// Like [`GatewayConfig::new`] with the credential read from
    /// `TOPICTAG_API_KEY`.
    pub fn from_env(base_url: impl Into<String>) -> Self {
        Self {
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            ..Self::new(base_url)
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlightLimiter {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

struct TraceLog {
    path: PathBuf,
    file: Mutex<File>,
}

/// Result of a successful POST, after retries.
#[derive(Debug, Clone)]
pub struct PostOutcome {
    pub body: Value,
    pub retries: u32,
    pub latency_ms: f64,
}

pub struct Gateway {
    config: GatewayConfig,
    transport: Box<dyn Transport>,
    limiter: InFlightLimiter,
    trace: Option<TraceLog>,
}

impl Gateway {
    pub fn new(config: GatewayConfig, transport: Box<dyn Transport>) -> Result<Self, GatewayError> {
        let trace = match &config.trace_path {
            Some(path) => Some(TraceLog {
                path: path.clone(),
                file: Mutex::new(open_trace(path)?),
            }),
            None => None,
        };
        Ok(Self {
            limiter: InFlightLimiter::new(config.max_in_flight),
            config,
            transport,
            trace,
        })
    }

    pub fn with_http(config: GatewayConfig) -> Result<Self, GatewayError> {
        let transport = ReqwestTransport::new(config.timeout)?;
        Self::new(config, Box::new(transport))
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!(
            "{}/{}",
            self.config.base_url.trim_end_matches('/'),
            path.trim_start_matches('/')
        )
    }

    fn trace(&self, record: Value) -> Result<(), GatewayError> {
        let Some(log) = &self.trace else {
            return Ok(());
        };
        let mut line = record.to_string();
        if let Some(key) = self.config.api_key.as_deref().filter(|k| !k.is_empty()) {
            line = line.replace(key, REDACTED);
        }
        line.push('\n');
        let mut file = log.file.lock().unwrap_or_else(|e| e.into_inner());
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| GatewayError::Trace {
                path: log.path.clone(),
                source,
            })
    }

    /// POSTs `body` to `path` under the retry and in-flight policies.
    pub fn post(&self, path: &str, body: &Value) -> Result<PostOutcome, GatewayError> {
        let url = self.url(path);
        let mut headers = vec![("content-type".to_owned(), "application/json".to_owned())];
        if let Some(key) = &self.config.api_key {
            headers.push(("authorization".to_owned(), format!("Bearer {key}")));
        }
        let attempts = self.config.max_attempts.max(1);
        let started = Instant::now();
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.config.backoff_base * 2u32.saturating_pow(attempt - 1));
            }
            self.trace(json!({
                "event": "request",
                "attempt": attempt,
                "url": url,
                "authorization": self.config.api_key.as_ref().map(|_| format!("Bearer {REDACTED}")),
                "body": body,
            }))?;
            let result = {
                let _permit = self.limiter.acquire();
                self.transport.post_json(&url, &headers, body)
            };
            match result {
                Ok(response) => {
                    self.trace(json!({
                        "event": "response",
                        "attempt": attempt,
                        "status": response.status,
                        "body": response.body,
                    }))?;
                    match response.status {
                        200..=299 => {
                            let body = serde_json::from_str(&response.body)
                                .map_err(|e| GatewayError::Malformed(e.to_string()))?;
                            return Ok(PostOutcome {
                                body,
                                retries: attempt,
                                latency_ms: started.elapsed().as_secs_f64() * 1e3,
                            });
                        }
                        401 | 403 => return Err(GatewayError::Auth { status: response.status }),
                        429 | 500..=599 => last = format!("HTTP {}", response.status),
                        status => {
                            return Err(GatewayError::Protocol {
                                status,
                                body: response.body,
                            })
                        }
                    }
                }
                Err(TransportError::Timeout) => {
                    self.trace(json!({"event": "timeout", "attempt": attempt}))?;
                    last = "timeout".to_owned();
                }
                Err(TransportError::Connection(message)) => {
                    self.trace(json!({"event": "error", "attempt": attempt, "message": message}))?;
                    return Err(GatewayError::Transport(message));
                }
            }
            tracing::debug!(attempt, %last, "transient failure");
        }
        Err(GatewayError::RetriesExhausted { attempts, last })
    }
}

fn open_trace(path: &Path) -> Result<File, GatewayError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| GatewayError::Trace {
            path: path.to_owned(),
            source,
        })
}

impl LlmClient for Gateway {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<Completion, GatewayError> {
        params.validate()?;
        let mut body = json!({
            "model": params.model_id,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        });
        if !params.stop.is_empty() {
            body["stop"] = json!(params.stop);
        }
        let seed = match params.seed {
            None => SeedHandling::NotRequested,
            Some(s) if self.config.forward_seed => {
                body["seed"] = json!(s);
                SeedHandling::Forwarded
            }
            Some(_) => SeedHandling::Unsupported,
        };
        let outcome = self.post("chat/completions", &body)?;
        let text = outcome
            .body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or(GatewayError::MissingText)?
            .to_owned();
        let usage = |field: &str| {
            outcome
                .body
                .pointer(&format!("/usage/{field}"))
                .and_then(Value::as_u64)
                .unwrap_or(0)
        };
        Ok(Completion {
            text,
            prompt_tokens: usage("prompt_tokens"),
            completion_tokens: usage("completion_tokens"),
            latency_ms: outcome.latency_ms,
            backend: Backend::Remote,
            retries: outcome.retries,
            seed,
        })
    }
}
