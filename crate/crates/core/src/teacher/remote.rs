use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ChatBackend, Clock, CompletionRequest, CompletionResponse, Source, SystemClock, TeacherError, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    /// Bearer token. Read from the environment by callers, never from files.
    #[serde(skip)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.trim_end_matches('/'))
    }
}

/// Exponential backoff for rate-limit, server and transport errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub max_attempts: u32,
    /// Relative jitter; a delay `d` becomes uniform in `d * [1 - j, 1 + j]`.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
            jitter: 0.1,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based), without jitter.
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(retry as i32))
    }

    fn delay(&self, retry: u32) -> Duration {
        let d = self.nominal_delay(retry);
        if self.jitter <= 0.0 {
            return d;
        }
        let j = self.jitter.min(1.0);
        d.mul_f64(rand::thread_rng().gen_range(1.0 - j..=1.0 + j))
    }
}

/// Chat-completion client over HTTP, used for teacher APIs and for the
/// locally served student alike.
pub struct RemoteBackend {
    config: RemoteConfig,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    http: reqwest::blocking::Client,
}

enum Attempt {
    Done(CompletionResponse),
    Retry(String, Option<Duration>),
    Fail(TeacherError),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, TeacherError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| TeacherError::Config(e.to_string()))?;
        Ok(Self {
            config,
            retry: RetryPolicy::default(),
            clock: Arc::new(SystemClock::default()),
            http,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Clock used for backoff sleeps.
    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// Request body exactly as sent.
    pub fn wire_body(request: &CompletionRequest) -> serde_json::Value {
        json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        let mut builder = self.http.post(self.config.url()).json(body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = match builder.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport: {e}"), None),
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(Duration::from_secs_f64);
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}"), None),
        };
        match status {
            200..=299 => match parse_completion(&text) {
                Ok(r) => Attempt::Done(r),
                Err(e) => Attempt::Fail(e),
            },
            401 | 403 => Attempt::Fail(TeacherError::Auth(format!("status {status}: {}", snippet(&text)))),
            429 | 500..=599 => Attempt::Retry(format!("status {status}: {}", snippet(&text)), retry_after),
            _ => Attempt::Fail(TeacherError::Http {
                status,
                body: snippet(&text),
            }),
        }
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(300).collect()
}

/// Parses a chat-completion response body.
pub fn parse_completion(body: &str) -> Result<CompletionResponse, TeacherError> {
    #[derive(Deserialize)]
    struct Message {
        content: Option<String>,
    }
    #[derive(Deserialize)]
    struct Choice {
        message: Message,
    }
    #[derive(Deserialize, Default)]
    struct WireUsage {
        #[serde(default)]
        prompt_tokens: u64,
        #[serde(default)]
        completion_tokens: u64,
    }
    #[derive(Deserialize)]
    struct Body {
        choices: Vec<Choice>,
        #[serde(default)]
        usage: Option<WireUsage>,
    }
    let parsed: Body =
        serde_json::from_str(body).map_err(|e| TeacherError::Malformed(format!("{e}: {}", snippet(body))))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| TeacherError::Malformed("no choices in response".into()))?;
    let text = choice
        .message
        .content
        .ok_or_else(|| TeacherError::Malformed("choice has no message content".into()))?;
    let usage = parsed.usage.unwrap_or_default();
    Ok(CompletionResponse {
        text,
        usage: Usage {
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        },
        source: Source::Remote,
    })
}

impl ChatBackend for RemoteBackend {
    fn describe(&self) -> String {
        self.config.url()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, TeacherError> {
        request.validate()?;
        let body = Self::wire_body(request);
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.attempt(&body) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(msg, after) => {
                    log::warn!("attempt {}/{attempts} failed: {msg}", attempt + 1);
                    last = msg;
                    if attempt + 1 < attempts {
                        let d = self.retry.delay(attempt);
                        self.clock.sleep(after.map_or(d, |a| a.max(d)));
                    }
                }
            }
        }
        Err(TeacherError::RetriesExhausted { attempts, last })
    }
}
