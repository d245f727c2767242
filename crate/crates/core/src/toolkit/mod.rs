//! Tool abstraction shared by live HTTP clients, ground-truth oracles and transcript replay.
//!
//! A [`ToolBackend`] performs a single attempt; [`call`] wraps it with the retry
//! budget and backoff schedule and always returns a [`ToolResponse`].

pub mod contract;
mod http;
mod oracle;
mod replay;
mod retry;
pub mod wire;

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::BBox;
use crate::episode::ClassId;
use crate::hashing::{content_hash, StableHasher};
use crate::prompts::EdgeAdjust;

pub use http::{HttpBackend, HttpConfig};
pub use oracle::{
    oracle_judge, oracle_quester, oracle_segmenter, NoiseModel, OracleBackend, OracleConfig, OracleTruth,
    QuestFeedback,
};
pub use replay::{ReplayBackend, ReplayEntry};
pub use retry::{Clock, ManualClock, RateLimiter, RetryPolicy, SystemClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Chat,
    Vision,
    Segment,
}

/// One image attached to a vision query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePart {
    pub role_tag: String,
    pub png: Arc<Vec<u8>>,
}

impl ImagePart {
    pub fn new(role_tag: impl Into<String>, png: Vec<u8>) -> Self {
        Self { role_tag: role_tag.into(), png: Arc::new(png) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisionQuery {
    pub text: String,
    pub images: Vec<ImagePart>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentQuery {
    pub image_png: Arc<Vec<u8>>,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Chat { text: String },
    Vision(VisionQuery),
    Segment(SegmentQuery),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub timeout_ms: u64,
    pub max_retries: u32,
}

impl Default for Budget {
    fn default() -> Self {
        Self { timeout_ms: 60_000, max_retries: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStage {
    Plan,
    Cognize,
    Quest,
    Segment,
    Judge,
}

/// Side information about where a request sits in the agent loop.
///
/// Not sent over the wire and not part of the request hash; everything in it is
/// also stated in the prompt text. Oracle backends read it instead of parsing prose.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CallContext {
    pub episode_id: String,
    pub stage: Option<CallStage>,
    pub class_id: Option<ClassId>,
    pub class_name: Option<String>,
    pub iteration: u32,
    pub prior_box: Option<BBox>,
    pub feedback: Option<EdgeAdjust>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolRequest {
    pub tool: ToolKind,
    pub payload: Payload,
    pub budget: Budget,
    pub context: CallContext,
}

impl ToolRequest {
    /// Prompt text for chat/vision; a canonical box listing for segmentation.
    pub fn prompt_text(&self) -> String {
        match &self.payload {
            Payload::Chat { text } => text.clone(),
            Payload::Vision(v) => v.text.clone(),
            Payload::Segment(s) => {
                let boxes: Vec<[u32; 4]> = s.boxes.iter().map(|&b| b.into()).collect();
                format!("segment boxes={}", serde_json::to_string(&boxes).expect("boxes serialize"))
            }
        }
    }

    /// `role_tag:content-hash` for every attached image, in order.
    pub fn image_refs(&self) -> Vec<String> {
        match &self.payload {
            Payload::Chat { .. } => vec![],
            Payload::Vision(v) => v.images.iter().map(|i| format!("{}:{}", i.role_tag, content_hash(&i.png))).collect(),
            Payload::Segment(s) => vec![format!("query:{}", content_hash(&s.image_png))],
        }
    }

    /// Stable hash of the tool kind, prompt text and image content hashes.
    pub fn request_hash(&self) -> String {
        let mut h = StableHasher::new();
        h.str(match self.tool {
            ToolKind::Chat => "chat",
            ToolKind::Vision => "vision",
            ToolKind::Segment => "segment",
        });
        h.str(&self.prompt_text());
        for r in self.image_refs() {
            h.str(&r);
        }
        h.hex()
    }

    fn expected_masks(&self) -> Option<usize> {
        match &self.payload {
            Payload::Segment(s) => Some(s.boxes.len()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseBody {
    Text(String),
    /// One base64 RLE mask per requested box.
    Masks(Vec<String>),
}

impl ResponseBody {
    pub fn is_empty(&self) -> bool {
        match self {
            ResponseBody::Text(t) => t.trim().is_empty(),
            ResponseBody::Masks(m) => m.is_empty(),
        }
    }

    /// Verbatim form stored in transcripts.
    pub fn to_raw(&self) -> String {
        match self {
            ResponseBody::Text(t) => t.clone(),
            ResponseBody::Masks(m) => {
                serde_json::to_string(&wire::SegmentResponse { masks: m.clone() }).expect("masks serialize")
            }
        }
    }

    pub fn from_raw(tool: ToolKind, raw: &str) -> Result<Self, ToolError> {
        match tool {
            ToolKind::Chat | ToolKind::Vision => Ok(ResponseBody::Text(raw.to_string())),
            ToolKind::Segment => serde_json::from_str::<wire::SegmentResponse>(raw)
                .map(|r| ResponseBody::Masks(r.masks))
                .map_err(|e| ToolError::Malformed(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum ToolError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("http status {status}: {message}")]
    Http { status: u16, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("retry budget exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("transcript exhausted after {0} recorded calls")]
    TranscriptExhausted(usize),
    #[error("request mismatch at call {ordinal}: recorded {recorded}, got {actual}")]
    RequestMismatch { ordinal: usize, recorded: String, actual: String },
    #[error("replayed failure: {0}")]
    Replayed(String),
    #[error("backend cannot serve request: {0}")]
    Unsupported(String),
}

/// Outcome of a single attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttemptError {
    Retryable(ToolError),
    Fatal(ToolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Ok,
    RetryableError,
    FatalError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolResponse {
    pub status: ToolStatus,
    pub body: Option<ResponseBody>,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub error: Option<ToolError>,
}

impl ToolResponse {
    pub fn is_ok(&self) -> bool {
        self.status == ToolStatus::Ok
    }
}

/// A chat, vision or segmentation service. Implementations perform one attempt per call.
pub trait ToolBackend: Send + Sync {
    fn name(&self) -> &str;
    fn attempt(&self, request: &ToolRequest) -> Result<ResponseBody, AttemptError>;
}

impl<T: ToolBackend + ?Sized> ToolBackend for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn attempt(&self, request: &ToolRequest) -> Result<ResponseBody, AttemptError> {
        (**self).attempt(request)
    }
}

fn check_shape(request: &ToolRequest, body: &ResponseBody) -> Result<(), ToolError> {
    if body.is_empty() {
        return Err(ToolError::Malformed("empty response body".into()));
    }
    match (request.expected_masks(), body) {
        (Some(n), ResponseBody::Masks(m)) if m.len() == n => Ok(()),
        (Some(n), ResponseBody::Masks(m)) => Err(ToolError::Malformed(format!("{} masks for {n} boxes", m.len()))),
        (Some(_), ResponseBody::Text(_)) => Err(ToolError::Malformed("text body for a segment request".into())),
        (None, ResponseBody::Masks(_)) => Err(ToolError::Malformed("mask body for a text request".into())),
        (None, ResponseBody::Text(_)) => Ok(()),
    }
}

/// Runs `request` against `backend` with at most `budget.max_retries + 1` attempts.
///
/// Retryable failures (timeouts, 408/429/5xx, transport faults, malformed bodies)
/// sleep for the policy's backoff delay between attempts.
pub fn call(backend: &dyn ToolBackend, request: &ToolRequest, policy: &RetryPolicy, clock: &dyn Clock) -> ToolResponse {
    let started = Instant::now();
    let max_attempts = request.budget.max_retries + 1;
    let hash = request.request_hash();
    let mut attempt = 0;
    loop {
        attempt += 1;
        let outcome = backend.attempt(request).and_then(|body| match check_shape(request, &body) {
            Ok(()) => Ok(body),
            Err(e) => Err(AttemptError::Retryable(e)),
        });
        let latency_ms = started.elapsed().as_millis() as u64;
        match outcome {
            Ok(body) => {
                return ToolResponse { status: ToolStatus::Ok, body: Some(body), latency_ms, attempt_count: attempt, error: None }
            }
            Err(AttemptError::Fatal(e)) => {
                return ToolResponse {
                    status: ToolStatus::FatalError,
                    body: None,
                    latency_ms,
                    attempt_count: attempt,
                    error: Some(e),
                }
            }
            Err(AttemptError::Retryable(e)) => {
                if attempt >= max_attempts {
                    log::warn!("{}: giving up after {attempt} attempts: {e}", backend.name());
                    return ToolResponse {
                        status: ToolStatus::FatalError,
                        body: None,
                        latency_ms,
                        attempt_count: attempt,
                        error: Some(ToolError::RetriesExhausted { attempts: attempt, last: e.to_string() }),
                    };
                }
                let delay = policy.delay(attempt, &hash);
                log::debug!("{}: attempt {attempt} failed ({e}); retrying in {delay:?}", backend.name());
                clock.sleep(delay);
            }
        }
    }
}

/// Test double that replays a fixed script of attempt outcomes.
pub struct ScriptedBackend {
    name: String,
    script: std::sync::Mutex<std::collections::VecDeque<Result<ResponseBody, AttemptError>>>,
    calls: std::sync::atomic::AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(script: Vec<Result<ResponseBody, AttemptError>>) -> Self {
        Self {
            name: "scripted".into(),
            script: std::sync::Mutex::new(script.into()),
            calls: Default::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl ToolBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn attempt(&self, _request: &ToolRequest) -> Result<ResponseBody, AttemptError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.script
            .lock()
            .expect("script lock")
            .pop_front()
            .unwrap_or_else(|| Err(AttemptError::Fatal(ToolError::Unsupported("script exhausted".into()))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chat(max_retries: u32) -> ToolRequest {
        ToolRequest {
            tool: ToolKind::Chat,
            payload: Payload::Chat { text: "hi".into() },
            budget: Budget { timeout_ms: 1000, max_retries },
            context: CallContext::default(),
        }
    }

    fn transient() -> Result<ResponseBody, AttemptError> {
        Err(AttemptError::Retryable(ToolError::Http { status: 503, message: "busy".into() }))
    }

    #[test]
    fn fails_twice_then_succeeds() {
        let backend = ScriptedBackend::new(vec![transient(), transient(), Ok(ResponseBody::Text("ok".into()))]);
        let clock = ManualClock::default();
        let policy = RetryPolicy::default();
        let r = call(&backend, &chat(3), &policy, &clock);
        assert!(r.is_ok());
        assert_eq!(r.attempt_count, 3);
        let sleeps = clock.sleeps();
        assert_eq!(sleeps.len(), 2);
        for (i, d) in sleeps.iter().enumerate() {
            let nominal = policy.nominal_delay(i as u32 + 1);
            assert!(*d <= nominal && *d >= nominal.mul_f64(1.0 - policy.jitter), "{d:?} vs {nominal:?}");
        }
    }

    #[test]
    fn zero_retries_one_failure_is_fatal() {
        let backend = ScriptedBackend::new(vec![transient(), Ok(ResponseBody::Text("late".into()))]);
        let r = call(&backend, &chat(0), &RetryPolicy::default(), &ManualClock::default());
        assert_eq!(r.status, ToolStatus::FatalError);
        assert_eq!(r.attempt_count, 1);
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let backend = ScriptedBackend::new(vec![Err(AttemptError::Fatal(ToolError::Auth("401".into())))]);
        let clock = ManualClock::default();
        let r = call(&backend, &chat(5), &RetryPolicy::default(), &clock);
        assert_eq!(r.error, Some(ToolError::Auth("401".into())));
        assert_eq!(r.attempt_count, 1);
        assert!(clock.sleeps().is_empty());
    }

    #[test]
    fn attempts_bounded_by_budget() {
        for max_retries in 0..5 {
            let backend = ScriptedBackend::new((0..10).map(|_| transient()).collect());
            let r = call(&backend, &chat(max_retries), &RetryPolicy::default(), &ManualClock::default());
            assert_eq!(r.attempt_count, max_retries + 1);
            assert_eq!(backend.calls() as u32, max_retries + 1);
            assert!(matches!(r.error, Some(ToolError::RetriesExhausted { .. })));
        }
    }

    #[test]
    fn wrong_mask_count_is_retried() {
        let req = ToolRequest {
            tool: ToolKind::Segment,
            payload: Payload::Segment(SegmentQuery {
                image_png: Arc::new(vec![1, 2, 3]),
                boxes: vec![BBox::new(0, 0, 1, 1), BBox::new(0, 0, 2, 2)],
            }),
            budget: Budget { timeout_ms: 10, max_retries: 1 },
            context: CallContext::default(),
        };
        let backend = ScriptedBackend::new(vec![
            Ok(ResponseBody::Masks(vec!["a".into()])),
            Ok(ResponseBody::Masks(vec!["a".into(), "b".into()])),
        ]);
        let r = call(&backend, &req, &RetryPolicy::default(), &ManualClock::default());
        assert!(r.is_ok());
        assert_eq!(r.attempt_count, 2);
        assert!(matches!(r.body, Some(ResponseBody::Masks(m)) if m.len() == 2));
    }

    #[test]
    fn request_hash_tracks_text_and_images() {
        let mut a = chat(0);
        let h0 = a.request_hash();
        a.context.iteration = 7;
        assert_eq!(a.request_hash(), h0, "context is not hashed");
        a.payload = Payload::Chat { text: "hi!".into() };
        assert_ne!(a.request_hash(), h0);
        let v1 = ToolRequest {
            tool: ToolKind::Vision,
            payload: Payload::Vision(VisionQuery { text: "x".into(), images: vec![ImagePart::new("q", vec![1])] }),
            ..chat(0)
        };
        let v2 = ToolRequest {
            payload: Payload::Vision(VisionQuery { text: "x".into(), images: vec![ImagePart::new("q", vec![2])] }),
            ..v1.clone()
        };
        assert_ne!(v1.request_hash(), v2.request_hash());
    }
}
