//! Tolerant parsers for model replies: JSON is located inside arbitrary prose
//! or fenced blocks, then checked against the stage schema.

use serde_json::{Map, Value};

use super::{
    ClassScope, CognitiveProfile, CriteriaScores, EdgeAdjust, Judgement, ParseError, PlanStage, PlannedStep,
    QuestResult, Suggestion, Verdict,
};
use crate::canvas::BBox;
use crate::episode::ClassId;

fn retryable(msg: impl Into<String>) -> ParseError {
    ParseError::Retryable(msg.into())
}

/// End index (exclusive) of the balanced value opening at `start`, honouring JSON strings.
fn balanced_end(s: &str, start: usize) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_str = false;
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn extract_delimited(raw: &str, open: u8) -> Option<&str> {
    let mut from = 0;
    while let Some(off) = raw.as_bytes()[from..].iter().position(|&b| b == open) {
        let start = from + off;
        if let Some(end) = balanced_end(raw, start) {
            let candidate = &raw[start..end];
            if serde_json::from_str::<Value>(candidate).is_ok() {
                return Some(candidate);
            }
        }
        from = start + 1;
    }
    None
}

/// First balanced top-level JSON object in `raw` that parses.
pub fn extract_json(raw: &str) -> Option<&str> {
    extract_delimited(raw, b'{')
}

fn object(raw: &str) -> Result<Map<String, Value>, ParseError> {
    let text = extract_json(raw).ok_or_else(|| retryable("no JSON object found"))?;
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        _ => Err(retryable("expected a JSON object")),
    }
}

fn as_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" | "present" => Some(true),
            "false" | "no" | "absent" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

fn clip_box(raw: &[Value], dims: (u32, u32)) -> Result<BBox, ParseError> {
    if raw.len() != 4 {
        return Err(retryable(format!("bbox needs 4 numbers, got {}", raw.len())));
    }
    let mut v = [0f64; 4];
    for (slot, item) in v.iter_mut().zip(raw) {
        *slot = item.as_f64().filter(|x| x.is_finite()).ok_or_else(|| retryable("bbox entries must be numbers"))?;
    }
    let (w, h) = (dims.0 as f64, dims.1 as f64);
    let clamp = |x: f64, hi: f64| x.round().clamp(0.0, hi) as u32;
    let b = BBox::new(clamp(v[0], w), clamp(v[1], h), clamp(v[2], w), clamp(v[3], h));
    if !b.is_valid_for(dims.0, dims.1) {
        return Err(retryable(format!("bbox {v:?} is degenerate after clipping to {}x{}", dims.0, dims.1)));
    }
    Ok(b)
}

/// Presence decision and (when present) a box clipped to the image.
pub fn parse_quest(raw: &str, class_id: ClassId, image_dims: (u32, u32)) -> Result<QuestResult, ParseError> {
    let obj = object(raw)?;
    let present = obj
        .get("present")
        .and_then(as_bool)
        .ok_or_else(|| retryable("missing boolean `present`"))?;
    let confidence = obj.get("confidence").and_then(Value::as_f64).map(|c| c.clamp(0.0, 1.0));
    let bbox = if present {
        let arr = obj
            .get("bbox")
            .and_then(Value::as_array)
            .ok_or_else(|| retryable("present=true requires `bbox`"))?;
        Some(clip_box(arr, image_dims)?)
    } else {
        None
    };
    Ok(QuestResult { class_id, present, bbox, confidence, raw: raw.to_string() })
}

fn parse_suggestion(v: &Value) -> Result<Option<Suggestion>, ParseError> {
    match v {
        Value::Null => Ok(None),
        Value::String(s) if s.trim().is_empty() => Ok(None),
        Value::String(s) => Ok(Some(Suggestion::Text(s.trim().to_string()))),
        Value::Object(_) => serde_json::from_value::<EdgeAdjust>(v.clone())
            .map(|a| Some(Suggestion::Adjust(a)))
            .map_err(|e| retryable(format!("bad edge adjustment: {e}"))),
        Value::Array(items) => {
            let parts: Vec<&str> = items.iter().filter_map(Value::as_str).collect();
            Ok((!parts.is_empty()).then(|| Suggestion::Text(parts.join("; "))))
        }
        _ => Err(retryable("suggestion must be text or an edge adjustment")),
    }
}

pub fn parse_judgement(raw: &str) -> Result<Judgement, ParseError> {
    let obj = object(raw)?;
    let verdict = match obj.get("verdict").and_then(Value::as_str).map(|s| s.trim().to_ascii_uppercase()) {
        Some(v) if v == "GOOD" => Verdict::Good,
        Some(v) if v == "BAD" => Verdict::Bad,
        other => return Err(retryable(format!("verdict must be GOOD or BAD, got {other:?}"))),
    };
    let critique = obj.get("critique").and_then(Value::as_str).unwrap_or_default().to_string();
    let suggestion = match obj.get("suggestion") {
        Some(v) => parse_suggestion(v)?,
        None => None,
    };
    if verdict == Verdict::Bad && suggestion.is_none() {
        return Err(retryable("BAD verdict without a suggestion"));
    }
    let criteria_scores = obj.get("criteria_scores").and_then(Value::as_object).map(|m| {
        let f = |k: &str| m.get(k).and_then(Value::as_f64).map(|x| x.clamp(0.0, 1.0));
        CriteriaScores {
            shape_conformity: f("shape_conformity"),
            coverage: f("coverage"),
            class_confidence: f("class_confidence"),
        }
    });
    Ok(Judgement { verdict, critique, suggestion, criteria_scores })
}

/// Structured profile, falling back to the whole reply as the description.
pub fn parse_cognition(raw: &str, class_id: ClassId, class_name: &str) -> Result<CognitiveProfile, ParseError> {
    let text = raw.trim();
    if text.is_empty() {
        return Err(retryable("empty cognition response"));
    }
    let mut profile = CognitiveProfile {
        class_id,
        class_name: class_name.to_string(),
        description: text.to_string(),
        attributes: vec![],
        spatial_notes: String::new(),
    };
    if let Ok(obj) = object(text) {
        if let Some(d) = obj.get("description").and_then(Value::as_str).filter(|d| !d.trim().is_empty()) {
            profile.description = d.trim().to_string();
            profile.attributes = obj
                .get("attributes")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
                .unwrap_or_default();
            profile.spatial_notes =
                obj.get("spatial_notes").and_then(Value::as_str).unwrap_or_default().to_string();
        }
    }
    Ok(profile)
}

/// Checks `Cognize* Quest (Segment Judge)?`.
pub fn validate_plan(steps: &[PlannedStep]) -> Result<(), ParseError> {
    let stages: Vec<PlanStage> = steps.iter().map(|s| s.stage).collect();
    let mut i = 0;
    while i < stages.len() && stages[i] == PlanStage::Cognize {
        i += 1;
    }
    if stages.get(i) != Some(&PlanStage::Quest) {
        return Err(ParseError::IllegalPlan(format!("expected a quest step at position {i}, plan is {stages:?}")));
    }
    i += 1;
    match &stages[i..] {
        [] | [PlanStage::Segment, PlanStage::Judge] => Ok(()),
        rest => Err(ParseError::IllegalPlan(format!("illegal steps after quest: {rest:?}"))),
    }
}

pub fn parse_plan(raw: &str) -> Result<Vec<PlannedStep>, ParseError> {
    let arr: Vec<Value> = match extract_delimited(raw, b'[').map(serde_json::from_str::<Value>) {
        Some(Ok(Value::Array(a))) => a,
        _ => {
            // also accept {"plan": [...]} / {"steps": [...]}
            let obj = object(raw).map_err(|_| retryable("no JSON plan array found"))?;
            match obj.get("plan").or_else(|| obj.get("steps")) {
                Some(Value::Array(a)) => a.clone(),
                _ => return Err(retryable("no JSON plan array found")),
            }
        }
    };
    let mut steps = Vec::with_capacity(arr.len());
    for item in arr {
        let obj = item.as_object().ok_or_else(|| retryable("plan steps must be objects"))?;
        let stage = match obj.get("stage").and_then(Value::as_str).map(|s| s.trim().to_ascii_lowercase()).as_deref() {
            Some("cognize") | Some("cognition") => PlanStage::Cognize,
            Some("quest") | Some("questing") => PlanStage::Quest,
            Some("segment") | Some("segmentation") => PlanStage::Segment,
            Some("judge") | Some("judgement") | Some("judgment") => PlanStage::Judge,
            other => return Err(retryable(format!("unknown stage {other:?}"))),
        };
        let class_scope = match obj.get("classes").and_then(Value::as_str).map(|s| s.trim().to_ascii_lowercase()) {
            None => match stage {
                PlanStage::Cognize | PlanStage::Quest => ClassScope::All,
                PlanStage::Segment => ClassScope::Present,
                PlanStage::Judge => ClassScope::Segmented,
            },
            Some(s) if s == "all" => ClassScope::All,
            Some(s) if s == "present" => ClassScope::Present,
            Some(s) if s == "segmented" => ClassScope::Segmented,
            Some(s) => return Err(retryable(format!("unknown class scope {s:?}"))),
        };
        steps.push(PlannedStep { stage, class_scope });
    }
    validate_plan(&steps)?;
    Ok(steps)
}
