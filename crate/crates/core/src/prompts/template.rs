//! `{name}` placeholder templates with a JSON sidecar.
//!
//! A template directory holds `<stage>.txt` and `<stage>.json` for each of
//! `plan`, `cognize`, `quest` and `judge`. The sidecar declares the stage, the
//! required placeholders and any in-context exemplars. Exemplars are rendered
//! into the reserved `{icl_examples}` slot, or ahead of the whole text when the
//! template has no such slot.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Stage;

pub const ICL_SLOT: &str = "icl_examples";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unbound placeholder {{{0}}}")]
    UnboundPlaceholder(String),
    #[error("template {stage:?} declares {name} as required but the text never uses it")]
    MissingPlaceholder { stage: Stage, name: String },
    #[error("sidecar for {path} declares stage {found:?}")]
    StageMismatch { path: PathBuf, found: Stage },
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("sidecar {path}: {source}")]
    Sidecar { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub input: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Sidecar {
    stage: Stage,
    #[serde(default)]
    version: String,
    required_placeholders: BTreeSet<String>,
    #[serde(default)]
    icl_examples: Vec<IclExample>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: Stage,
    pub version: String,
    pub text: String,
    pub required_placeholders: BTreeSet<String>,
    pub icl_examples: Vec<IclExample>,
}

/// Yields `(start, end, name)` for each `{identifier}` in `text`.
fn placeholders(text: &str) -> Vec<(usize, usize, &str)> {
    let bytes = text.as_bytes();
    let mut out = vec![];
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i;
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j].is_ascii_alphabetic() || bytes[j] == b'_') {
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'}' {
                    out.push((start, j + 1, &text[start + 1..j]));
                    i = j + 1;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

impl PromptTemplate {
    pub fn new(stage: Stage, text: impl Into<String>, required: &[&str]) -> Result<Self, TemplateError> {
        let t = Self {
            stage,
            version: String::new(),
            text: text.into(),
            required_placeholders: required.iter().map(|s| s.to_string()).collect(),
            icl_examples: vec![],
        };
        t.check()?;
        Ok(t)
    }

    pub fn with_examples(mut self, examples: Vec<IclExample>) -> Self {
        self.icl_examples = examples;
        self
    }

    fn check(&self) -> Result<(), TemplateError> {
        let used: BTreeSet<&str> = placeholders(&self.text).into_iter().map(|p| p.2).collect();
        for name in &self.required_placeholders {
            if !used.contains(name.as_str()) {
                return Err(TemplateError::MissingPlaceholder { stage: self.stage, name: name.clone() });
            }
        }
        Ok(())
    }

    fn examples_block(&self) -> String {
        let mut s = String::new();
        for (i, ex) in self.icl_examples.iter().enumerate() {
            s.push_str(&format!("Example {}\nInput: {}\nResponse: {}\n\n", i + 1, ex.input, ex.response));
        }
        s
    }

    /// Single-pass substitution; bound values are never re-scanned.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        for name in &self.required_placeholders {
            if !bindings.contains_key(name) {
                return Err(TemplateError::UnboundPlaceholder(name.clone()));
            }
        }
        let examples = self.examples_block();
        let mut out = String::with_capacity(self.text.len() + examples.len());
        let mut has_slot = false;
        let mut last = 0;
        for (start, end, name) in placeholders(&self.text) {
            out.push_str(&self.text[last..start]);
            if name == ICL_SLOT {
                out.push_str(&examples);
                has_slot = true;
            } else {
                let v = bindings.get(name).ok_or_else(|| TemplateError::UnboundPlaceholder(name.to_string()))?;
                out.push_str(v);
            }
            last = end;
        }
        out.push_str(&self.text[last..]);
        if !has_slot && !examples.is_empty() {
            out.insert_str(0, &examples);
        }
        Ok(out)
    }

    pub fn load(dir: &Path, stage: Stage) -> Result<Self, TemplateError> {
        let txt = dir.join(format!("{}.txt", stage.as_str()));
        let side = dir.join(format!("{}.json", stage.as_str()));
        let text = std::fs::read_to_string(&txt).map_err(|source| TemplateError::Io { path: txt.clone(), source })?;
        let raw = std::fs::read(&side).map_err(|source| TemplateError::Io { path: side.clone(), source })?;
        let sidecar: Sidecar =
            serde_json::from_slice(&raw).map_err(|source| TemplateError::Sidecar { path: side.clone(), source })?;
        Self::from_parts(text, sidecar, &txt, stage)
    }

    fn from_parts(text: String, sidecar: Sidecar, path: &Path, stage: Stage) -> Result<Self, TemplateError> {
        if sidecar.stage != stage {
            return Err(TemplateError::StageMismatch { path: path.to_path_buf(), found: sidecar.stage });
        }
        let t = Self {
            stage,
            version: sidecar.version,
            text,
            required_placeholders: sidecar.required_placeholders,
            icl_examples: sidecar.icl_examples,
        };
        t.check()?;
        Ok(t)
    }

    fn builtin(stage: Stage, text: &str, sidecar: &str) -> Self {
        let sidecar: Sidecar = serde_json::from_str(sidecar).expect("builtin sidecar is valid");
        Self::from_parts(text.to_string(), sidecar, Path::new("<builtin>"), stage).expect("builtin template is valid")
    }
}

/// The four stage templates used by one agent run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub plan: PromptTemplate,
    pub cognize: PromptTemplate,
    pub quest: PromptTemplate,
    pub judge: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            plan: PromptTemplate::builtin(
                Stage::Plan,
                include_str!("../../templates/plan.txt"),
                include_str!("../../templates/plan.json"),
            ),
            cognize: PromptTemplate::builtin(
                Stage::Cognize,
                include_str!("../../templates/cognize.txt"),
                include_str!("../../templates/cognize.json"),
            ),
            quest: PromptTemplate::builtin(
                Stage::Quest,
                include_str!("../../templates/quest.txt"),
                include_str!("../../templates/quest.json"),
            ),
            judge: PromptTemplate::builtin(
                Stage::Judge,
                include_str!("../../templates/judge.txt"),
                include_str!("../../templates/judge.json"),
            ),
        }
    }
}

impl TemplateSet {
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        Ok(Self {
            plan: PromptTemplate::load(dir, Stage::Plan)?,
            cognize: PromptTemplate::load(dir, Stage::Cognize)?,
            quest: PromptTemplate::load(dir, Stage::Quest)?,
            judge: PromptTemplate::load(dir, Stage::Judge)?,
        })
    }

    pub fn get(&self, stage: Stage) -> &PromptTemplate {
        match stage {
            Stage::Plan => &self.plan,
            Stage::Cognize => &self.cognize,
            Stage::Quest => &self.quest,
            Stage::Judge => &self.judge,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn direct_substitution() {
        let t = PromptTemplate::new(Stage::Quest, "find {name}", &["name"]).unwrap();
        assert_eq!(t.render(&bind(&[("name", "dog")])).unwrap(), "find dog");
    }

    #[test]
    fn missing_binding() {
        let t = PromptTemplate::new(Stage::Quest, "find {name}", &["name"]).unwrap();
        assert!(matches!(t.render(&bind(&[])), Err(TemplateError::UnboundPlaceholder(n)) if n == "name"));
        // optional placeholders still need a value when they appear in the text
        let t = PromptTemplate::new(Stage::Quest, "find {name} {extra}", &["name"]).unwrap();
        assert!(t.render(&bind(&[("name", "x")])).is_err());
    }

    #[test]
    fn json_braces_are_literal_and_values_not_rescanned() {
        let t = PromptTemplate::new(Stage::Quest, r#"reply {"present": true} for {name}"#, &["name"]).unwrap();
        assert_eq!(t.render(&bind(&[("name", "{name}")])).unwrap(), r#"reply {"present": true} for {name}"#);
    }

    #[test]
    fn required_must_appear_in_text() {
        assert!(PromptTemplate::new(Stage::Plan, "no slots", &["classes"]).is_err());
    }

    #[test]
    fn exemplars_precede_task_in_order() {
        let t = PromptTemplate::new(Stage::Judge, "Criteria.\n{icl_examples}## Task\nJudge {name}.", &["name"])
            .unwrap()
            .with_examples(vec![
                IclExample { input: "tight mask on a cat".into(), response: r#"{"verdict":"GOOD"}"#.into() },
                IclExample { input: "mask spills onto a dog".into(), response: r#"{"verdict":"BAD"}"#.into() },
            ]);
        let out = t.render(&bind(&[("name", "cat")])).unwrap();
        let a = out.find("tight mask on a cat").unwrap();
        let b = out.find("mask spills onto a dog").unwrap();
        let task = out.find("## Task").unwrap();
        assert!(a < b && b < task);
    }

    #[test]
    fn builtin_templates_load_and_round_trip_through_disk() {
        let set = TemplateSet::default();
        assert!(!set.judge.icl_examples.is_empty());
        let dir = tempfile::tempdir().unwrap();
        for stage in [Stage::Plan, Stage::Cognize, Stage::Quest, Stage::Judge] {
            let t = set.get(stage);
            std::fs::write(dir.path().join(format!("{}.txt", stage.as_str())), &t.text).unwrap();
            let side = Sidecar {
                stage,
                version: t.version.clone(),
                required_placeholders: t.required_placeholders.clone(),
                icl_examples: t.icl_examples.clone(),
            };
            std::fs::write(dir.path().join(format!("{}.json", stage.as_str())), serde_json::to_vec(&side).unwrap())
                .unwrap();
        }
        assert_eq!(TemplateSet::load_dir(dir.path()).unwrap(), set);
    }
}
