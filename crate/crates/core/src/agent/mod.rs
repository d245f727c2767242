//! Episode orchestration: plan, then per class cognize → quest → segment → judge,
//! re-questing with the judge's feedback until the mask is approved or the
//! refinement budget runs out.

mod transcript;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::canvas::{
    compose_support_panel, decode_mask_rle_base64, draw_bbox, draw_coordinate_grid, draw_mask_overlay, encode_image_png,
    encode_mask, BBox, BinaryMask, CanvasError, GridSpec, MaskFormat, OverlayStyle,
};
use crate::episode::{ClassId, Episode};
use crate::prompts::{
    canonical_plan, parse_cognition, parse_judgement, parse_plan, parse_quest, CognitiveProfile, Judgement, ParseError,
    PlanStage, PlannedStep, QuestResult, Suggestion, TemplateSet, Verdict,
};
use crate::toolkit::{
    call, Budget, CallContext, CallStage, Clock, ImagePart, OracleBackend, OracleConfig, Payload, ReplayBackend,
    ResponseBody, RetryPolicy, SegmentQuery, SystemClock, ToolBackend, ToolError, ToolKind, ToolRequest, VisionQuery,
};

pub use transcript::{
    Prediction, PredictionRecord, StepOutcome, StepRecord, Transcript, TranscriptError, TranscriptHeader,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerMode {
    /// Ask the chat model for a plan, falling back to the canonical one.
    #[default]
    Llm,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_refinements_per_class: u32,
    pub planner_mode: PlannerMode,
    /// Extra asks after a response that cannot be parsed.
    pub parse_retries: u32,
    pub budget: Budget,
    pub retry: RetryPolicy,
    pub overlay: OverlayStyle,
    pub grid: GridSpec,
    /// Draw the coordinate grid on support panels as well as the query.
    pub grid_on_support: bool,
    #[serde(skip)]
    pub templates: TemplateSet,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_refinements_per_class: 3,
            planner_mode: PlannerMode::Llm,
            parse_retries: 2,
            budget: Budget::default(),
            retry: RetryPolicy::default(),
            overlay: OverlayStyle::default(),
            grid: GridSpec::default(),
            grid_on_support: false,
            templates: TemplateSet::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.overlay.validate().map_err(|e| e.to_string())?;
        self.grid.validate().map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&self.retry.jitter) {
            return Err(format!("retry jitter {} not in [0,1]", self.retry.jitter));
        }
        Ok(())
    }

    /// Upper bound on tool calls for one class when every response parses.
    pub fn max_calls_per_class(&self) -> usize {
        2 + 3 * (self.max_refinements_per_class as usize + 1)
    }
}

/// One backend per tool kind, plus the clock used for retry backoff.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ToolBackend>,
    pub vision: Arc<dyn ToolBackend>,
    pub segment: Arc<dyn ToolBackend>,
    pub clock: Arc<dyn Clock>,
}

impl Backends {
    pub fn uniform(backend: Arc<dyn ToolBackend>) -> Self {
        Self {
            chat: backend.clone(),
            vision: backend.clone(),
            segment: backend,
            clock: Arc::new(SystemClock::default()),
        }
    }

    /// Ground-truth oracles for all three tools, with `episodes` registered.
    pub fn oracle<'a>(config: OracleConfig, episodes: impl IntoIterator<Item = &'a Episode>) -> Self {
        Self::uniform(Arc::new(OracleBackend::with_episodes(config, episodes)))
    }

    /// Serves every call from the recorded transcripts.
    pub fn replay<'a>(transcripts: impl IntoIterator<Item = &'a Transcript>) -> Self {
        let r = ReplayBackend::new();
        for t in transcripts {
            r.load(t.header.episode_id.clone(), t.replay_entries());
        }
        Self::uniform(Arc::new(r))
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    fn for_tool(&self, tool: ToolKind) -> &dyn ToolBackend {
        match tool {
            ToolKind::Chat => self.chat.as_ref(),
            ToolKind::Vision => self.vision.as_ref(),
            ToolKind::Segment => self.segment.as_ref(),
        }
    }
}

/// Stages present in a validated plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PlanShape {
    cognize: bool,
    segment: bool,
    judge: bool,
}

impl PlanShape {
    fn of(steps: &[PlannedStep]) -> Self {
        let has = |s: PlanStage| steps.iter().any(|p| p.stage == s);
        Self { cognize: has(PlanStage::Cognize), segment: has(PlanStage::Segment), judge: has(PlanStage::Judge) }
    }
}

const JSON_ONLY: &str = "Respond with valid JSON only, in the format requested above.";

struct Runner<'a> {
    ep: &'a Episode,
    backends: &'a Backends,
    cfg: &'a AgentConfig,
    steps: Vec<StepRecord>,
    query_png: Arc<Vec<u8>>,
    grid_png: Arc<Vec<u8>>,
}

/// Identifies a call within the episode.
#[derive(Clone)]
struct Slot {
    stage: CallStage,
    class: Option<ClassId>,
    iteration: u32,
    prior_box: Option<BBox>,
    feedback: Option<crate::prompts::EdgeAdjust>,
}

impl Slot {
    fn new(stage: CallStage, class: Option<ClassId>, iteration: u32) -> Self {
        Self { stage, class, iteration, prior_box: None, feedback: None }
    }
}

impl<'a> Runner<'a> {
    fn new(ep: &'a Episode, backends: &'a Backends, cfg: &'a AgentConfig) -> Self {
        let query_png = Arc::new(encode_image_png(&ep.query_image));
        let grid_png = Arc::new(encode_image_png(&draw_coordinate_grid(&ep.query_image, &cfg.grid)));
        Self { ep, backends, cfg, steps: Vec::new(), query_png, grid_png }
    }

    fn request(&self, tool: ToolKind, payload: Payload, slot: &Slot) -> ToolRequest {
        ToolRequest {
            tool,
            payload,
            budget: self.cfg.budget,
            context: CallContext {
                episode_id: self.ep.episode_id.clone(),
                stage: Some(slot.stage),
                class_id: slot.class,
                class_name: slot.class.map(|c| self.ep.class_name(c)),
                iteration: slot.iteration,
                prior_box: slot.prior_box,
                feedback: slot.feedback,
            },
        }
    }

    /// Performs one call and records it; the caller fills in the parse result.
    fn exchange(&mut self, request: ToolRequest, slot: &Slot) -> Result<ResponseBody, ToolError> {
        let backend = self.backends.for_tool(request.tool);
        let resp = call(backend, &request, &self.cfg.retry, self.backends.clock.as_ref());
        let outcome = match &resp.error {
            Some(e) => StepOutcome::ToolError { error: e.clone() },
            None => StepOutcome::Ok,
        };
        self.steps.push(StepRecord {
            ordinal: self.steps.len(),
            stage: slot.stage,
            tool: request.tool,
            class_id: slot.class,
            iteration: slot.iteration,
            request_hash: request.request_hash(),
            prompt_text: request.prompt_text(),
            image_refs: request.image_refs(),
            raw_response: resp.body.as_ref().map(ResponseBody::to_raw),
            parsed_summary: Value::Null,
            latency_ms: resp.latency_ms,
            attempt_count: resp.attempt_count,
            outcome,
        });
        match (resp.body, resp.error) {
            (Some(body), None) => Ok(body),
            (_, e) => Err(e.unwrap_or_else(|| ToolError::Malformed("no body".into()))),
        }
    }

    fn annotate(&mut self, summary: Value, outcome: Option<StepOutcome>) {
        let last = self.steps.last_mut().expect("annotate follows a recorded step");
        last.parsed_summary = summary;
        if let Some(o) = outcome {
            last.outcome = o;
        }
    }

    /// Asks a text-answering tool, re-asking with a JSON-only reminder while the
    /// answer fails to parse. The outer error is a tool failure; the inner one
    /// the last parse failure.
    fn ask<T>(
        &mut self,
        tool: ToolKind,
        prompt: &str,
        images: &[ImagePart],
        slot: &Slot,
        parse: impl Fn(&str) -> Result<(T, Value), ParseError>,
    ) -> Result<Result<T, ParseError>, ToolError> {
        let mut last_err = None;
        for attempt in 0..=self.cfg.parse_retries {
            let text = match &last_err {
                None => prompt.to_string(),
                Some(e) => format!("{prompt}\n\nYour previous answer could not be used ({e}). {JSON_ONLY}"),
            };
            let payload = match tool {
                ToolKind::Chat => Payload::Chat { text },
                _ => Payload::Vision(VisionQuery { text, images: images.to_vec() }),
            };
            let body = self.exchange(self.request(tool, payload, slot), slot)?;
            let raw = match body {
                ResponseBody::Text(t) => t,
                ResponseBody::Masks(_) => String::new(),
            };
            match parse(&raw) {
                Ok((v, summary)) => {
                    self.annotate(summary, None);
                    return Ok(Ok(v));
                }
                Err(e) => {
                    self.annotate(Value::Null, Some(StepOutcome::ParseError { message: e.to_string() }));
                    let retryable = e.is_retryable();
                    last_err = Some(e);
                    if !retryable || attempt == self.cfg.parse_retries {
                        break;
                    }
                }
            }
        }
        Ok(Err(last_err.expect("loop ran at least once")))
    }

    fn plan(&mut self) -> Result<Vec<PlannedStep>, ToolError> {
        if self.cfg.planner_mode == PlannerMode::Fixed {
            return Ok(canonical_plan());
        }
        let ep = self.ep;
        let support_summary: Vec<String> = ep
            .support
            .iter()
            .map(|g| format!("- \"{}\": {} annotated example(s)", ep.class_name(g.class_id), g.examples.len()))
            .collect();
        let class_list: Vec<String> = ep.class_ids().into_iter().map(|c| format!("\"{}\"", ep.class_name(c))).collect();
        let bindings = bind(&[("support_summary", support_summary.join("\n")), ("class_list", class_list.join(", "))]);
        let prompt = self.cfg.templates.plan.render(&bindings).expect("plan template binds");
        let slot = Slot::new(CallStage::Plan, None, 0);
        let parsed = self.ask(ToolKind::Chat, &prompt, &[], &slot, |raw| {
            parse_plan(raw).map(|p| {
                let v = serde_json::to_value(&p).expect("plan serializes");
                (p, v)
            })
        })?;
        Ok(match parsed {
            Ok(p) => p,
            Err(e) => {
                let reason = format!("planner answer rejected ({e}); using the canonical plan");
                log::info!("{}: {reason}", ep.episode_id);
                let fallback = canonical_plan();
                self.annotate(
                    serde_json::to_value(&fallback).expect("plan serializes"),
                    Some(StepOutcome::PlanFallback { reason }),
                );
                fallback
            }
        })
    }

    fn cognize(&mut self, class: ClassId) -> Result<CognitiveProfile, ToolError> {
        let ep = self.ep;
        let name = ep.class_name(class);
        let group = ep.group(class).expect("class belongs to the episode");
        let grid = self.cfg.grid_on_support.then_some(&self.cfg.grid);
        let mut images = Vec::with_capacity(group.examples.len());
        let mut meta = Vec::new();
        for (i, ex) in group.examples.iter().enumerate() {
            let panel = compose_support_panel(ex, &self.cfg.overlay, grid).map_err(|e| {
                ToolError::Unsupported(format!("cannot draw support panel for {}: {e}", ex.image_id))
            })?;
            images.push(ImagePart::new(format!("support_{i}"), encode_image_png(&panel)));
            let b = ex.bbox;
            meta.push(format!(
                "Support image {}: {}x{} pixels, object box [{}, {}, {}, {}].",
                i + 1,
                ex.image.width(),
                ex.image.height(),
                b.x_min,
                b.y_min,
                b.x_max,
                b.y_max
            ));
        }
        let bindings = bind(&[
            ("class_name", name.clone()),
            ("num_examples", group.examples.len().to_string()),
            ("metadata", meta.join("\n")),
        ]);
        let prompt = self.cfg.templates.cognize.render(&bindings).expect("cognize template binds");
        let slot = Slot::new(CallStage::Cognize, Some(class), 0);
        let parsed = self.ask(ToolKind::Vision, &prompt, &images, &slot, |raw| {
            parse_cognition(raw, class, &name).map(|p| {
                let v = json!({ "description": p.description, "attributes": p.attributes });
                (p, v)
            })
        })?;
        Ok(parsed.unwrap_or_else(|_| default_profile(class, &name)))
    }

    fn quest(
        &mut self,
        profile: &CognitiveProfile,
        iteration: u32,
        feedback: Option<(BBox, &Judgement)>,
    ) -> Result<Result<QuestResult, ParseError>, ToolError> {
        let class = profile.class_id;
        let (w, h) = self.ep.query_image.dims();
        let mut slot = Slot::new(CallStage::Quest, Some(class), iteration);
        let feedback_text = match feedback {
            None => String::new(),
            Some((prev, j)) => {
                slot.prior_box = Some(prev);
                slot.feedback = match &j.suggestion {
                    Some(Suggestion::Adjust(a)) => Some(*a),
                    _ => None,
                };
                let suggestion = j.suggestion.as_ref().map(Suggestion::to_prompt_text).unwrap_or_default();
                format!(
                    "\nA reviewer rejected the mask made from your previous box {}.\nCritique: {}\nSuggested correction: {}\nPropose a corrected box.\n",
                    box_text(prev),
                    j.critique,
                    suggestion
                )
            }
        };
        let attributes = if profile.attributes.is_empty() { "none listed".to_string() } else { profile.attributes.join(", ") };
        let bindings = bind(&[
            ("class_name", profile.class_name.clone()),
            ("description", profile.description.clone()),
            ("attributes", attributes),
            ("image_width", w.to_string()),
            ("image_height", h.to_string()),
            ("tick_interval", self.cfg.grid.tick_interval.to_string()),
            ("feedback", feedback_text),
        ]);
        let prompt = self.cfg.templates.quest.render(&bindings).expect("quest template binds");
        let images = [ImagePart { role_tag: "query".into(), png: self.grid_png.clone() }];
        self.ask(ToolKind::Vision, &prompt, &images, &slot, |raw| {
            parse_quest(raw, class, (w, h)).map(|q| {
                let v = json!({ "present": q.present, "bbox": q.bbox });
                (q, v)
            })
        })
    }

    fn segment(&mut self, class: ClassId, bbox: BBox, iteration: u32) -> Result<BinaryMask, ToolError> {
        let slot = Slot::new(CallStage::Segment, Some(class), iteration);
        let payload = Payload::Segment(SegmentQuery { image_png: self.query_png.clone(), boxes: vec![bbox] });
        let body = self.exchange(self.request(ToolKind::Segment, payload, &slot), &slot)?;
        let decoded = match body {
            ResponseBody::Masks(m) => m.first().map(|s| decode_mask_rle_base64(s).map_err(|e| e.to_string())),
            ResponseBody::Text(_) => None,
        }
        .unwrap_or_else(|| Err("no mask in segment response".into()));
        let dims = self.ep.query_image.dims();
        match decoded {
            Ok(m) if m.dims() == dims => {
                self.annotate(json!({ "bbox": bbox, "mask_pixels": m.count() }), None);
                Ok(m)
            }
            Ok(m) => {
                let e = ToolError::Malformed(format!("mask is {:?}, query image is {dims:?}", m.dims()));
                self.annotate(Value::Null, Some(StepOutcome::ToolError { error: e.clone() }));
                Err(e)
            }
            Err(msg) => {
                let e = ToolError::Malformed(msg);
                self.annotate(Value::Null, Some(StepOutcome::ToolError { error: e.clone() }));
                Err(e)
            }
        }
    }

    fn judge(
        &mut self,
        profile: &CognitiveProfile,
        mask: &BinaryMask,
        bbox: BBox,
        iteration: u32,
    ) -> Result<Result<Judgement, ParseError>, ToolError> {
        let class = profile.class_id;
        let overlay = draw_mask_overlay(&self.ep.query_image, mask, &self.cfg.overlay)
            .and_then(|img| draw_bbox(&img, bbox, &self.cfg.overlay))
            .map_err(|e| ToolError::Unsupported(format!("cannot draw judge overlay: {e}")))?;
        let images = [
            ImagePart::new("query_overlay", encode_image_png(&overlay)),
            ImagePart::new("mask", encode_mask(mask, MaskFormat::Png1bit)),
        ];
        let bindings = bind(&[
            ("class_name", profile.class_name.clone()),
            ("description", profile.description.clone()),
            ("bbox", box_text(bbox)),
        ]);
        let prompt = self.cfg.templates.judge.render(&bindings).expect("judge template binds");
        let mut slot = Slot::new(CallStage::Judge, Some(class), iteration);
        slot.prior_box = Some(bbox);
        self.ask(ToolKind::Vision, &prompt, &images, &slot, |raw| {
            parse_judgement(raw).map(|j| {
                let v = json!({ "verdict": j.verdict, "suggestion": j.suggestion });
                (j, v)
            })
        })
    }

    /// Presence and mask for one class. Tool failures abort the episode.
    fn run_class(&mut self, shape: PlanShape, class: ClassId) -> Result<(bool, Option<BinaryMask>), ToolError> {
        let name = self.ep.class_name(class);
        let profile = if shape.cognize { self.cognize(class)? } else { default_profile(class, &name) };
        let first = self.quest(&profile, 0, None)?.map_err(|e| unusable("quest", class, e))?;
        let Some(mut bbox) = first.bbox.filter(|_| first.present) else {
            return Ok((false, None));
        };
        if !shape.segment {
            return Ok((true, None));
        }
        let mut iteration = 0;
        let mut mask = self.segment(class, bbox, iteration)?;
        while shape.judge {
            let judgement = match self.judge(&profile, &mask, bbox, iteration)? {
                Ok(j) => j,
                // an unreadable review leaves the current mask in place
                Err(_) => break,
            };
            if judgement.verdict == Verdict::Good || iteration >= self.cfg.max_refinements_per_class {
                break;
            }
            iteration += 1;
            let next = match self.quest(&profile, iteration, Some((bbox, &judgement)))? {
                Ok(q) => q,
                Err(_) => break,
            };
            // the judge cannot overturn presence; an absent answer keeps the last mask
            let Some(b) = next.bbox.filter(|_| next.present) else { break };
            bbox = b;
            mask = self.segment(class, bbox, iteration)?;
        }
        Ok((true, Some(mask)))
    }
}

/// The images the agent sends for cognition (one panel per support example) and
/// questing (the gridded query), as `(role_tag, png)` pairs.
pub fn visual_prompts(episode: &Episode, config: &AgentConfig) -> Result<Vec<(String, Vec<u8>)>, CanvasError> {
    let grid = config.grid_on_support.then_some(&config.grid);
    let mut out = Vec::new();
    for g in &episode.support {
        for (i, ex) in g.examples.iter().enumerate() {
            let panel = compose_support_panel(ex, &config.overlay, grid)?;
            out.push((format!("support_{}_{i}", g.class_id.0), encode_image_png(&panel)));
        }
    }
    let query = draw_coordinate_grid(&episode.query_image, &config.grid);
    out.push(("query".to_string(), encode_image_png(&query)));
    Ok(out)
}

fn unusable(stage: &str, class: ClassId, e: ParseError) -> ToolError {
    ToolError::Malformed(format!("unusable {stage} answer for class {class}: {e}"))
}

fn default_profile(class: ClassId, name: &str) -> CognitiveProfile {
    CognitiveProfile {
        class_id: class,
        class_name: name.to_string(),
        description: format!("a {name}"),
        attributes: vec![],
        spatial_notes: String::new(),
    }
}

fn box_text(b: BBox) -> String {
    format!("[{}, {}, {}, {}]", b.x_min, b.y_min, b.x_max, b.y_max)
}

fn bind(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn header(episode: &Episode, config: &AgentConfig) -> TranscriptHeader {
    TranscriptHeader {
        episode_id: episode.episode_id.clone(),
        config: serde_json::to_value(config).expect("config serializes"),
        dataset_fingerprint: None,
        episode: episode.descriptor(),
    }
}

/// Runs one episode to completion. Tool failures yield a failed prediction that
/// keeps the classes finished so far.
pub fn run_episode(episode: &Episode, backends: &Backends, config: &AgentConfig) -> (Prediction, Transcript) {
    let mut runner = Runner::new(episode, backends, config);
    let mut prediction = Prediction::empty(episode);
    let outcome = runner.plan().and_then(|plan| {
        let shape = PlanShape::of(&plan);
        for class in episode.class_ids() {
            let (present, mask) = runner.run_class(shape, class)?;
            prediction.presence.insert(class, present);
            if let Some(m) = mask {
                prediction.masks.insert(class, m);
            }
        }
        Ok(())
    });
    if let Err(e) = outcome {
        log::warn!("episode {} failed: {e}", episode.episode_id);
        prediction.failed = true;
        prediction.failure_reason = Some(e.to_string());
    }
    debug_assert!(prediction.is_coherent());
    let transcript = Transcript { header: header(episode, config), steps: runner.steps, prediction: prediction.clone() };
    (prediction, transcript)
}

/// Runs episodes on `parallelism` worker threads. Results follow input order and a
/// panicking episode is reported as failed without affecting the others.
pub fn run_batch(
    episodes: &[Episode],
    backends: &Backends,
    config: &AgentConfig,
    parallelism: usize,
) -> Vec<(Prediction, Transcript)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool builds");
    pool.install(|| {
        episodes
            .par_iter()
            .map(|ep| {
                catch_unwind(AssertUnwindSafe(|| run_episode(ep, backends, config))).unwrap_or_else(|panic| {
                    let msg = panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "unknown panic".into());
                    let p = Prediction::failure(ep, format!("episode panicked: {msg}"));
                    let t = Transcript { header: header(ep, config), steps: vec![], prediction: p.clone() };
                    (p, t)
                })
            })
            .collect()
    })
}
