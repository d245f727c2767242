//! Stage prompts and the parsers that turn model replies into structured results.

mod parse;
mod template;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::BBox;
use crate::episode::ClassId;

pub use parse::{extract_json, parse_cognition, parse_judgement, parse_plan, parse_quest, validate_plan};
pub use template::{IclExample, PromptTemplate, TemplateError, TemplateSet};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ParseError {
    /// Formatting problem worth one re-ask.
    #[error("unparseable response: {0}")]
    Retryable(String),
    #[error("illegal plan: {0}")]
    IllegalPlan(String),
}

impl ParseError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ParseError::Retryable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Plan,
    Cognize,
    Quest,
    Judge,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Plan => "plan",
            Stage::Cognize => "cognize",
            Stage::Quest => "quest",
            Stage::Judge => "judge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CognitiveProfile {
    pub class_id: ClassId,
    pub class_name: String,
    pub description: String,
    pub attributes: Vec<String>,
    pub spatial_notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestResult {
    pub class_id: ClassId,
    pub present: bool,
    pub bbox: Option<BBox>,
    pub confidence: Option<f64>,
    pub raw: String,
}

/// Signed per-edge correction in pixels, `target - current` for each box edge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeAdjust {
    pub dx_min: i64,
    pub dy_min: i64,
    pub dx_max: i64,
    pub dy_max: i64,
}

impl EdgeAdjust {
    pub fn between(current: BBox, target: BBox) -> Self {
        let c = current.edges();
        let t = target.edges();
        Self { dx_min: t[0] - c[0], dy_min: t[1] - c[1], dx_max: t[2] - c[2], dy_max: t[3] - c[3] }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }

    pub fn as_array(&self) -> [i64; 4] {
        [self.dx_min, self.dy_min, self.dx_max, self.dy_max]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Suggestion {
    Adjust(EdgeAdjust),
    Text(String),
}

impl Suggestion {
    /// Rendering used when the suggestion is bound into the next questing prompt.
    pub fn to_prompt_text(&self) -> String {
        match self {
            Suggestion::Text(t) => t.clone(),
            Suggestion::Adjust(a) => serde_json::to_string(a).expect("edge adjust serializes"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Good,
    Bad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CriteriaScores {
    pub shape_conformity: Option<f64>,
    pub coverage: Option<f64>,
    pub class_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub verdict: Verdict,
    pub critique: String,
    pub suggestion: Option<Suggestion>,
    pub criteria_scores: Option<CriteriaScores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStage {
    Cognize,
    Quest,
    Segment,
    Judge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassScope {
    All,
    Present,
    Segmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlannedStep {
    pub stage: PlanStage,
    #[serde(rename = "classes")]
    pub class_scope: ClassScope,
}

/// cognize-all, quest-all, segment-present, judge-segmented.
pub fn canonical_plan() -> Vec<PlannedStep> {
    vec![
        PlannedStep { stage: PlanStage::Cognize, class_scope: ClassScope::All },
        PlannedStep { stage: PlanStage::Quest, class_scope: ClassScope::All },
        PlannedStep { stage: PlanStage::Segment, class_scope: ClassScope::Present },
        PlannedStep { stage: PlanStage::Judge, class_scope: ClassScope::Segmented },
    ]
}
