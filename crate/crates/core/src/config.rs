//! Run configuration: a JSON file plus `key.path=value` overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agent::{AgentConfig, Backends, Transcript};
use crate::episode::{Episode, EpisodeSpec, LayoutConfig};
use crate::metrics::MiouMode;
use crate::prompts::TemplateSet;
use crate::toolkit::{HttpBackend, HttpConfig, OracleBackend, OracleConfig, ReplayBackend, ToolBackend, ToolError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
    #[error("backend setup failed: {0}")]
    Backend(#[from] ToolError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    #[default]
    Oracle,
    Live,
    Replay,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendModes {
    pub chat: BackendMode,
    pub vision: BackendMode,
    pub segment: BackendMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveEndpoints {
    pub chat: HttpConfig,
    pub vision: HttpConfig,
    pub segment: HttpConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub layout: LayoutConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub episodes: EpisodeSpec,
    pub agent: AgentConfig,
    pub backends: BackendModes,
    pub oracle: OracleConfig,
    pub live: LiveEndpoints,
    /// Directory of recorded transcripts for replay mode.
    pub replay_dir: Option<PathBuf>,
    /// Overrides the built-in prompt templates.
    pub templates_dir: Option<PathBuf>,
    pub parallelism: usize,
    pub miou_mode: MiouMode,
    /// Where commands write their artifacts.
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            episodes: EpisodeSpec::default(),
            agent: AgentConfig::default(),
            backends: BackendModes::default(),
            oracle: OracleConfig::default(),
            live: LiveEndpoints::default(),
            replay_dir: None,
            templates_dir: None,
            parallelism: 1,
            miou_mode: MiouMode::default(),
            output: PathBuf::from("out"),
        }
    }
}

/// Overlays `patch` onto `base`. Object keys must already exist in `base`.
fn merge(base: &mut Value, patch: Value, at: &str) -> Result<(), String> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| format!("unknown key `{key}`"))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Nests `value` under the dot separated `path`.
fn nest(path: &str, value: Value) -> Value {
    path.rsplit('.').fold(value, |v, k| serde_json::json!({ k: v }))
}

/// Parses `key.path=value`; the value is read as JSON, or else taken as a string.
pub fn parse_override(spec: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.into(), "expected key.path=value".into()))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ConfigError::Override(spec.into(), "empty key".into()));
    }
    let value = serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Built-in defaults, then the file at `path`, then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.into(), source })?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?;
            if !file.is_object() {
                return Err(ConfigError::Invalid(format!("{}: expected a JSON object", p.display())));
            }
            merge(&mut value, file, "").map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?;
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            if k.split('.').any(str::is_empty) {
                return Err(ConfigError::Override(o.clone(), "empty key segment".into()));
            }
            merge(&mut value, nest(&k, v), "").map_err(|e| ConfigError::Override(o.clone(), e))?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(dir) = &cfg.templates_dir {
            cfg.agent.templates = TemplateSet::load_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.parallelism < 1 {
            return bad("parallelism must be >= 1".into());
        }
        self.agent.validate().map_err(ConfigError::Invalid)?;
        self.oracle.noise.validate().map_err(ConfigError::Invalid)?;
        let (tau, alpha) = (self.oracle.judge_threshold, self.oracle.feedback_gain);
        if !(tau > 0.0 && tau <= 1.0) {
            return bad(format!("oracle.judge_threshold {tau} not in (0,1]"));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return bad(format!("oracle.feedback_gain {alpha} not in (0,1]"));
        }
        let modes = [self.backends.chat, self.backends.vision, self.backends.segment];
        if modes.contains(&BackendMode::Replay) && self.replay_dir.is_none() {
            return bad("replay mode needs replay_dir".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Builds the per-tool backends. Oracle backends get `episodes` registered;
    /// replay backends load `transcripts`.
    pub fn build_backends(&self, episodes: &[Episode], transcripts: &[Transcript]) -> Result<Backends, ConfigError> {
        let modes = [self.backends.chat, self.backends.vision, self.backends.segment];
        let oracle: Option<Arc<dyn ToolBackend>> = modes
            .contains(&BackendMode::Oracle)
            .then(|| Arc::new(OracleBackend::with_episodes(self.oracle.clone(), episodes)) as Arc<dyn ToolBackend>);
        let replay: Option<Arc<dyn ToolBackend>> = modes.contains(&BackendMode::Replay).then(|| {
            let r = ReplayBackend::new();
            for t in transcripts {
                r.load(t.header.episode_id.clone(), t.replay_entries());
            }
            Arc::new(r) as Arc<dyn ToolBackend>
        });
        let pick = |mode: BackendMode, live: &HttpConfig| -> Result<Arc<dyn ToolBackend>, ConfigError> {
            Ok(match mode {
                BackendMode::Oracle => oracle.clone().expect("oracle built when requested"),
                BackendMode::Replay => replay.clone().expect("replay built when requested"),
                BackendMode::Live => Arc::new(HttpBackend::new(live)?),
            })
        };
        let mut b = Backends::uniform(pick(self.backends.chat, &self.live.chat)?);
        b.vision = pick(self.backends.vision, &self.live.vision)?;
        b.segment = pick(self.backends.segment, &self.live.segment)?;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let cfg = RunConfig::load(
            None,
            &[
                "oracle.noise.box_scale_sigma=0.4".into(),
                "agent.max_refinements_per_class=8".into(),
                "backends.segment=oracle".into(),
                "dataset.root=data/mini".into(),
                "agent.max_refinements_per_class=5".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.oracle.noise.box_scale_sigma, 0.4);
        assert_eq!(cfg.agent.max_refinements_per_class, 5);
        assert_eq!(cfg.dataset.root, PathBuf::from("data/mini"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::load(None, &["oracle.nois.seed=1".into()]).unwrap_err();
        assert!(matches!(e, ConfigError::Override(..)), "{e}");
        assert!(RunConfig::from_json(r#"{"paralelism": 2}"#).is_err());
        assert!(parse_override("no_equals").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"episodes": {"count": 7}, "oracle": {"noise": {"seed": 3}}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &["episodes.count=9".into()]).unwrap();
        assert_eq!(cfg.episodes.count, 9);
        assert_eq!(cfg.episodes.n_way, 1);
        assert_eq!(cfg.oracle.noise.seed, 3);
        assert_eq!(cfg.oracle.judge_threshold, OracleConfig::default().judge_threshold);
        std::fs::write(&p, r#"{"episodes": {"cont": 7}}"#).unwrap();
        assert!(RunConfig::load(Some(&p), &[]).is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::load(None, &["oracle.feedback_gain=0".into()]).is_err());
        assert!(RunConfig::load(None, &["oracle.judge_threshold=1.5".into()]).is_err());
        assert!(RunConfig::load(None, &["backends.vision=replay".into()]).is_err());
        assert!(RunConfig::load(None, &["parallelism=0".into()]).is_err());
    }

    #[test]
    fn default_roundtrips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json().to_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
