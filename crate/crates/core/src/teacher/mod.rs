//! Chat-completion backends used to re-rank candidates.
//!
//! One wire protocol serves every backend that is not a mock: the
//! chat-completion JSON interface (`model`, a single user message carrying the
//! whole prompt, `temperature`, `max_tokens`). Teacher APIs and the locally
//! served student differ only in endpoint and in how their usage is priced.
//!
//! [`TeacherClient`] composes a backend with the on-disk replay cache, an
//! optional rate limiter and a usage ledger.

mod cache;
mod clock;
mod ledger;
mod mock;
mod remote;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use cache::{request_key, CacheRecord, ResponseCache};
pub use clock::{Clock, MockClock, RateLimiter, SystemClock};
pub use ledger::{cost_report, CallRecord, CostReport, CostRow, ModelTotals, Price, PriceTable, UsageLedger};
pub use mock::{FnBackend, MockBackend, MockMode};
pub use remote::{parse_completion, RemoteBackend, RemoteConfig, RetryPolicy};

pub const DEFAULT_TEMPERATURE: f32 = 0.0;
pub const DEFAULT_MAX_OUTPUT: u32 = 512;

#[derive(Debug, thiserror::Error)]
pub enum TeacherError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl TeacherError {
    /// Errors that will recur for every request (bad key, bad endpoint
    /// config); a run should stop rather than record them per mention.
    pub fn is_fatal(&self) -> bool {
        matches!(self, TeacherError::Auth(_) | TeacherError::Config(_))
    }
}

/// Test-only side channel for mock backends. Never sent on the wire and not
/// part of the cache key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockHints {
    pub candidate_labels: Vec<String>,
    pub gold_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt_text: String,
    pub temperature: f32,
    pub max_output: u32,
    pub hints: Option<MockHints>,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, prompt_text: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            prompt_text: prompt_text.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_output: DEFAULT_MAX_OUTPUT,
            hints: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f32) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_output(mut self, max_output: u32) -> Self {
        self.max_output = max_output;
        self
    }

    pub fn with_hints(mut self, hints: MockHints) -> Self {
        self.hints = Some(hints);
        self
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(TeacherError::InvalidRequest(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.model.is_empty() {
            return Err(TeacherError::InvalidRequest("empty model name".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Remote,
    Cache,
    Mock,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Remote => "remote",
            Source::Cache => "cache",
            Source::Mock => "mock",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub usage: Usage,
    pub source: Source,
}

pub trait ChatBackend: Send + Sync {
    /// Short description for reports, e.g. `mock:identity` or an endpoint.
    fn describe(&self) -> String;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, TeacherError>;
}

/// Backend selector as written on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    #[serde(rename = "mock:identity")]
    MockIdentity,
    #[serde(rename = "mock:oracle")]
    MockOracle,
    #[serde(rename = "mock:reverse")]
    MockReverse,
    Remote,
    Student,
}

impl BackendChoice {
    pub fn mock_mode(self) -> Option<MockMode> {
        match self {
            BackendChoice::MockIdentity => Some(MockMode::Identity),
            BackendChoice::MockOracle => Some(MockMode::Oracle),
            BackendChoice::MockReverse => Some(MockMode::Reverse),
            _ => None,
        }
    }
}

impl fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendChoice::MockIdentity => "mock:identity",
            BackendChoice::MockOracle => "mock:oracle",
            BackendChoice::MockReverse => "mock:reverse",
            BackendChoice::Remote => "remote",
            BackendChoice::Student => "student",
        })
    }
}

impl FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock:identity" => Ok(BackendChoice::MockIdentity),
            "mock:oracle" => Ok(BackendChoice::MockOracle),
            "mock:reverse" => Ok(BackendChoice::MockReverse),
            "remote" => Ok(BackendChoice::Remote),
            "student" => Ok(BackendChoice::Student),
            other => Err(format!(
                "unknown backend {other:?} (expected mock:identity, mock:oracle, mock:reverse, remote or student)"
            )),
        }
    }
}

/// Sends one request and records it in the ledger.
pub fn complete(
    backend: &dyn ChatBackend,
    request: &CompletionRequest,
    ledger: &UsageLedger,
) -> Result<CompletionResponse, TeacherError> {
    request.validate()?;
    let started = Instant::now();
    let response = backend.complete(request)?;
    ledger.record(&request.model, &response, started.elapsed().as_secs_f64());
    Ok(response)
}

/// Backend plus cache, rate limit and ledger: the handle the pipeline uses.
pub struct TeacherClient {
    backend: Arc<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    limiter: Option<RateLimiter>,
    ledger: Arc<UsageLedger>,
}

impl TeacherClient {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            cache: None,
            limiter: None,
            ledger: Arc::new(UsageLedger::default()),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_rate_limit(mut self, limiter: RateLimiter) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_ledger(mut self, ledger: Arc<UsageLedger>) -> Self {
        self.ledger = ledger;
        self
    }

    pub fn ledger(&self) -> &Arc<UsageLedger> {
        &self.ledger
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    pub fn describe(&self) -> String {
        self.backend.describe()
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, TeacherError> {
        let limited = LimitedBackend {
            inner: self.backend.as_ref(),
            limiter: self.limiter.as_ref(),
        };
        match &self.cache {
            Some(cache) => cache.cached_complete(&limited, request, &self.ledger),
            None => complete(&limited, request, &self.ledger),
        }
    }
}

struct LimitedBackend<'a> {
    inner: &'a dyn ChatBackend,
    limiter: Option<&'a RateLimiter>,
}

impl ChatBackend for LimitedBackend<'_> {
    fn describe(&self) -> String {
        self.inner.describe()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, TeacherError> {
        if let Some(l) = self.limiter {
            l.acquire();
        }
        self.inner.complete(request)
    }
}

/// Whitespace token count; stands in for tokenizer counts on mock backends.
pub(crate) fn rough_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
