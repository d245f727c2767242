//! Step records, predictions and the JSON-lines transcript format.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canvas::{decode_mask_rle_base64, encode_mask_rle_base64, BinaryMask, CanvasError};
use crate::episode::{ClassId, Episode, EpisodeDescriptor};
use crate::toolkit::{CallStage, ReplayEntry, ToolError, ToolKind};

/// Final answer for one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub presence: BTreeMap<ClassId, bool>,
    pub masks: BTreeMap<ClassId, BinaryMask>,
    pub failed: bool,
    pub failure_reason: Option<String>,
}

impl Prediction {
    /// Every class absent with an empty mask.
    pub fn empty(episode: &Episode) -> Self {
        let (w, h) = episode.query_image.dims();
        Self {
            presence: episode.class_ids().into_iter().map(|c| (c, false)).collect(),
            masks: episode.class_ids().into_iter().map(|c| (c, BinaryMask::empty(w, h))).collect(),
            failed: false,
            failure_reason: None,
        }
    }

    pub fn failure(episode: &Episode, reason: impl Into<String>) -> Self {
        Self { failed: true, failure_reason: Some(reason.into()), ..Self::empty(episode) }
    }

    /// No absent class carries a nonempty mask.
    pub fn is_coherent(&self) -> bool {
        self.presence.iter().all(|(c, &p)| p || self.masks.get(c).is_none_or(BinaryMask::is_empty))
    }
}

/// Transcript form of a [`Prediction`], masks as base64 RLE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub presence: BTreeMap<ClassId, bool>,
    pub masks: BTreeMap<ClassId, String>,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

impl From<&Prediction> for PredictionRecord {
    fn from(p: &Prediction) -> Self {
        Self {
            presence: p.presence.clone(),
            masks: p.masks.iter().map(|(&c, m)| (c, encode_mask_rle_base64(m))).collect(),
            failed: p.failed,
            failure_reason: p.failure_reason.clone(),
        }
    }
}

impl TryFrom<&PredictionRecord> for Prediction {
    type Error = CanvasError;

    fn try_from(r: &PredictionRecord) -> Result<Self, CanvasError> {
        let masks = r
            .masks
            .iter()
            .map(|(&c, s)| decode_mask_rle_base64(s).map(|m| (c, m)))
            .collect::<Result<_, _>>()?;
        Ok(Self { presence: r.presence.clone(), masks, failed: r.failed, failure_reason: r.failure_reason.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StepOutcome {
    Ok,
    /// The response arrived but could not be used.
    ParseError { message: String },
    ToolError { error: ToolError },
    /// The planner's answer was rejected and the canonical plan used instead.
    PlanFallback { reason: String },
}

/// One backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub ordinal: usize,
    pub stage: CallStage,
    pub tool: ToolKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<ClassId>,
    pub iteration: u32,
    pub request_hash: String,
    pub prompt_text: String,
    pub image_refs: Vec<String>,
    pub raw_response: Option<String>,
    pub parsed_summary: Value,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub outcome: StepOutcome,
}

impl StepRecord {
    pub fn replay_entry(&self) -> ReplayEntry {
        ReplayEntry {
            tool: self.tool,
            request_hash: self.request_hash.clone(),
            raw_response: self.raw_response.clone(),
            error: match &self.outcome {
                StepOutcome::ToolError { error } => Some(error.clone()),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub episode_id: String,
    pub config: Value,
    #[serde(default)]
    pub dataset_fingerprint: Option<String>,
    pub episode: EpisodeDescriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub steps: Vec<StepRecord>,
    pub prediction: Prediction,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(TranscriptHeader),
    Step(StepRecord),
    Footer { prediction: PredictionRecord },
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

impl Transcript {
    pub fn file_name(episode_id: &str) -> String {
        format!("{episode_id}.transcript.jsonl")
    }

    pub fn to_jsonl(&self) -> String {
        let mut lines = Vec::with_capacity(self.steps.len() + 2);
        let mut push = |l: &Line| lines.push(serde_json::to_string(l).expect("transcript line serializes"));
        push(&Line::Header(self.header.clone()));
        for s in &self.steps {
            push(&Line::Step(s.clone()));
        }
        push(&Line::Footer { prediction: (&self.prediction).into() });
        lines.join("\n") + "\n"
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TranscriptError> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut prediction = None;
        for (i, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |message: String| TranscriptError::Format { line: i + 1, message };
            let v: Value = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
            let kind = v.get("type").and_then(Value::as_str).unwrap_or_default().to_string();
            let decode = |what: &str| err(format!("bad {what} line"));
            match kind.as_str() {
                "header" if header.is_none() && steps.is_empty() => {
                    header = Some(serde_json::from_value(v).map_err(|e| err(e.to_string()))?)
                }
                "step" if header.is_some() && prediction.is_none() => {
                    steps.push(serde_json::from_value(v).map_err(|e| err(e.to_string()))?)
                }
                "footer" if header.is_some() && prediction.is_none() => {
                    let rec: PredictionRecord = v
                        .get("prediction")
                        .cloned()
                        .ok_or_else(|| decode("footer"))
                        .and_then(|p| serde_json::from_value(p).map_err(|e| err(e.to_string())))?;
                    prediction = Some(Prediction::try_from(&rec).map_err(|e| err(e.to_string()))?)
                }
                _ => return Err(err("line out of order".into())),
            }
        }
        let missing = |what: &str| TranscriptError::Format { line: 0, message: format!("missing {what}") };
        Ok(Self {
            header: header.ok_or_else(|| missing("header"))?,
            steps,
            prediction: prediction.ok_or_else(|| missing("footer"))?,
        })
    }

    /// Writes `<dir>/<episode_id>.transcript.jsonl`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf, TranscriptError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::file_name(&self.header.episode_id));
        fs::write(&path, self.to_jsonl())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, TranscriptError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn replay_entries(&self) -> Vec<ReplayEntry> {
        self.steps.iter().map(StepRecord::replay_entry).collect()
    }

    /// Copy with latency fields zeroed, for run-to-run comparison.
    pub fn without_latency(&self) -> Self {
        let mut t = self.clone();
        for s in &mut t.steps {
            s.latency_ms = 0;
        }
        t
    }
}
