//! Live backend speaking the JSON wire protocol over HTTP.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::retry::{Clock, RateLimiter, SystemClock};
use super::wire::{self, CompleteResponse, SegmentResponse};
use super::{AttemptError, Payload, ResponseBody, ToolBackend, ToolError, ToolRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Base URL, e.g. `http://127.0.0.1:8900`.
    pub endpoint: String,
    /// Name of the environment variable holding a bearer token, if any.
    pub api_key_env: Option<String>,
    /// 0 disables rate limiting.
    pub requests_per_minute: f64,
    pub burst: u32,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self { endpoint: "http://127.0.0.1:8900".into(), api_key_env: None, requests_per_minute: 0.0, burst: 1 }
    }
}

pub struct HttpBackend {
    name: String,
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
    limiter: RateLimiter,
    clock: Arc<dyn Clock>,
}

/// 408, 429 and 5xx are worth retrying; 401/403 are credential problems; other 4xx are final.
pub fn classify_status(status: u16, message: String) -> AttemptError {
    match status {
        401 | 403 => AttemptError::Fatal(ToolError::Auth(format!("status {status}: {message}"))),
        408 | 429 | 500..=599 => AttemptError::Retryable(ToolError::Http { status, message }),
        _ => AttemptError::Fatal(ToolError::Http { status, message }),
    }
}

impl HttpBackend {
    pub fn new(config: &HttpConfig) -> Result<Self, ToolError> {
        Self::with_clock(config, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(config: &HttpConfig, clock: Arc<dyn Clock>) -> Result<Self, ToolError> {
        let token = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| ToolError::Auth(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Ok(Self {
            name: format!("http:{}", config.endpoint),
            base: config.endpoint.trim_end_matches('/').to_string(),
            token,
            agent,
            limiter: RateLimiter::new(config.requests_per_minute, config.burst, clock.as_ref()),
            clock,
        })
    }
}

impl ToolBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn attempt(&self, request: &ToolRequest) -> Result<ResponseBody, AttemptError> {
        self.limiter.acquire(self.clock.as_ref());
        let (path, body) = wire::encode_request(request);
        let url = format!("{}{path}", self.base);
        let timeout = Duration::from_millis(request.budget.timeout_ms.max(1));
        let mut req = self
            .agent
            .post(&url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .header("content-type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send(body.as_str())
            .map_err(|e| AttemptError::Retryable(ToolError::Transport(e.to_string())))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptError::Retryable(ToolError::Transport(e.to_string())))?;
        if status != 200 {
            return Err(classify_status(status, text.chars().take(200).collect()));
        }
        let malformed = |e: serde_json::Error| AttemptError::Retryable(ToolError::Malformed(e.to_string()));
        match request.payload {
            Payload::Segment(_) => {
                serde_json::from_str::<SegmentResponse>(&text).map(|r| ResponseBody::Masks(r.masks)).map_err(malformed)
            }
            _ => serde_json::from_str::<CompleteResponse>(&text).map(|r| ResponseBody::Text(r.text)).map_err(malformed),
        }
    }
}
