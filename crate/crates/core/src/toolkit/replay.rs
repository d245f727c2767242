//! Serves recorded responses back in order, keyed by episode.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AttemptError, ResponseBody, ToolBackend, ToolError, ToolKind, ToolRequest};

/// One recorded tool call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub tool: ToolKind,
    pub request_hash: String,
    /// `None` when the recorded call failed.
    pub raw_response: Option<String>,
    pub error: Option<ToolError>,
}

struct Tape {
    entries: Vec<ReplayEntry>,
    cursor: usize,
}

/// Any request whose hash differs from the next recorded one is refused.
#[derive(Default)]
pub struct ReplayBackend {
    tapes: Mutex<HashMap<String, Tape>>,
}

impl ReplayBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(&self, episode_id: impl Into<String>, entries: Vec<ReplayEntry>) {
        self.tapes.lock().expect("replay lock").insert(episode_id.into(), Tape { entries, cursor: 0 });
    }

    /// Recorded calls not yet consumed for `episode_id`.
    pub fn remaining(&self, episode_id: &str) -> Option<usize> {
        self.tapes.lock().expect("replay lock").get(episode_id).map(|t| t.entries.len() - t.cursor)
    }
}

impl ToolBackend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn attempt(&self, request: &ToolRequest) -> Result<ResponseBody, AttemptError> {
        let mut tapes = self.tapes.lock().expect("replay lock");
        let tape = tapes
            .get_mut(&request.context.episode_id)
            .ok_or_else(|| AttemptError::Fatal(ToolError::TranscriptExhausted(0)))?;
        let ordinal = tape.cursor;
        let entry = tape
            .entries
            .get(ordinal)
            .ok_or(AttemptError::Fatal(ToolError::TranscriptExhausted(ordinal)))?;
        let actual = request.request_hash();
        if entry.request_hash != actual || entry.tool != request.tool {
            return Err(AttemptError::Fatal(ToolError::RequestMismatch {
                ordinal,
                recorded: entry.request_hash.clone(),
                actual,
            }));
        }
        tape.cursor += 1;
        match &entry.raw_response {
            Some(raw) => ResponseBody::from_raw(entry.tool, raw).map_err(AttemptError::Fatal),
            None => Err(AttemptError::Fatal(
                entry.error.clone().unwrap_or_else(|| ToolError::Replayed("no response recorded".into())),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolkit::{call, Budget, CallContext, ManualClock, Payload, RetryPolicy};

    fn req(text: &str) -> ToolRequest {
        ToolRequest {
            tool: ToolKind::Chat,
            payload: Payload::Chat { text: text.into() },
            budget: Budget::default(),
            context: CallContext { episode_id: "e".into(), ..Default::default() },
        }
    }

    fn entry(r: &ToolRequest, raw: Option<&str>) -> ReplayEntry {
        ReplayEntry {
            tool: r.tool,
            request_hash: r.request_hash(),
            raw_response: raw.map(str::to_string),
            error: raw.is_none().then(|| ToolError::Transport("boom".into())),
        }
    }

    #[test]
    fn replays_in_order_then_exhausts() {
        let b = ReplayBackend::new();
        let (a, c) = (req("a"), req("b"));
        b.load("e", vec![entry(&a, Some("one")), entry(&c, None)]);
        let clock = ManualClock::default();
        let p = RetryPolicy::default();
        assert_eq!(call(&b, &a, &p, &clock).body, Some(ResponseBody::Text("one".into())));
        let failed = call(&b, &c, &p, &clock);
        assert_eq!(failed.error, Some(ToolError::Transport("boom".into())));
        assert_eq!(failed.attempt_count, 1);
        assert_eq!(call(&b, &a, &p, &clock).error, Some(ToolError::TranscriptExhausted(2)));
    }

    #[test]
    fn mismatch_is_reported_with_position() {
        let b = ReplayBackend::new();
        b.load("e", vec![entry(&req("a"), Some("one"))]);
        let r = call(&b, &req("changed"), &RetryPolicy::default(), &ManualClock::default());
        assert!(matches!(r.error, Some(ToolError::RequestMismatch { ordinal: 0, .. })));
        assert_eq!(b.remaining("e"), Some(1));
    }
}
