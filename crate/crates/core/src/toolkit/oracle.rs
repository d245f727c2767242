//! Ground-truth backed stand-ins for the vision model and the segmenter.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(noise seed, episode id, class id, iteration, purpose)`, so oracle outputs
//! are pure functions of those inputs and safe to call concurrently.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AttemptError, CallStage, Payload, ResponseBody, ToolBackend, ToolError, ToolKind, ToolRequest};
use crate::canvas::{decode_mask, encode_mask_rle_base64, tight_bbox, BBox, BinaryMask, MaskFormat};
use crate::episode::{ClassId, Episode};
use crate::hashing::{seed_from, StableHasher};
use crate::metrics::iou;
use crate::prompts::{canonical_plan, CriteriaScores, EdgeAdjust, Judgement, QuestResult, Suggestion, Verdict};

/// Controlled corruption of oracle outputs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Box side lengths are scaled by `exp(N(0, sigma))` about the box centre.
    pub box_scale_sigma: f64,
    /// Box translation standard deviation as a fraction of the box size.
    pub box_jitter_sigma: f64,
    /// Masks are dilated or eroded by this many pixels (direction drawn per call).
    pub mask_boundary_radius: u32,
    pub flip_presence_prob: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.box_scale_sigma < 0.0 || self.box_jitter_sigma < 0.0 {
            return Err("noise sigmas must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.flip_presence_prob) {
            return Err(format!("flip_presence_prob {} not in [0,1]", self.flip_presence_prob));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub noise: NoiseModel,
    pub judge_threshold: f64,
    pub feedback_gain: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { noise: NoiseModel::default(), judge_threshold: 0.75, feedback_gain: 0.5 }
    }
}

/// Ground truth an oracle needs for one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleTruth {
    pub episode_id: String,
    pub dims: (u32, u32),
    pub gt_presence: BTreeMap<ClassId, bool>,
    pub gt_masks: BTreeMap<ClassId, BinaryMask>,
    pub gt_boxes: BTreeMap<ClassId, BBox>,
}

impl From<&Episode> for OracleTruth {
    fn from(ep: &Episode) -> Self {
        let gt_boxes = ep.gt_masks.iter().filter_map(|(&c, m)| tight_bbox(m).ok().map(|b| (c, b))).collect();
        Self {
            episode_id: ep.episode_id.clone(),
            dims: ep.query_image.dims(),
            gt_presence: ep.gt_presence.clone(),
            gt_masks: ep.gt_masks.clone(),
            gt_boxes,
        }
    }
}

/// Judge feedback applied on a re-quest: each edge moves by `gain * adjust`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuestFeedback {
    pub previous: BBox,
    pub adjust: EdgeAdjust,
    pub gain: f64,
}

fn rng_for(noise: &NoiseModel, episode_id: &str, class: ClassId, iteration: u32, purpose: &str) -> ChaCha8Rng {
    let mut h = StableHasher::new();
    h.u64(noise.seed).str(episode_id).u64(class.0 as u64).u64(iteration as u64).str(purpose);
    ChaCha8Rng::seed_from_u64(seed_from(&h))
}

/// Clamps edges into the image and widens degenerate results to one pixel.
fn clip_edges(e: [i64; 4], (w, h): (u32, u32)) -> BBox {
    let fix = |lo: i64, hi: i64, max: i64| -> (u32, u32) {
        let lo = lo.clamp(0, max);
        let hi = hi.clamp(0, max);
        if hi > lo {
            (lo as u32, hi as u32)
        } else if lo < max {
            (lo as u32, lo as u32 + 1)
        } else {
            (max as u32 - 1, max as u32)
        }
    };
    let (x0, x1) = fix(e[0], e[2], w as i64);
    let (y0, y1) = fix(e[1], e[3], h as i64);
    BBox::new(x0, y0, x1, y1)
}

fn noisy_box(b: BBox, dims: (u32, u32), noise: &NoiseModel, z_scale: f64, zx: f64, zy: f64) -> BBox {
    let (w, h) = (b.width() as f64, b.height() as f64);
    let cx = (b.x_min as f64 + b.x_max as f64) / 2.0;
    let cy = (b.y_min as f64 + b.y_max as f64) / 2.0;
    let s = (noise.box_scale_sigma * z_scale).exp();
    let dx = noise.box_jitter_sigma * w * zx;
    let dy = noise.box_jitter_sigma * h * zy;
    let e = [
        (cx - w * s / 2.0 + dx).round() as i64,
        (cy - h * s / 2.0 + dy).round() as i64,
        (cx + w * s / 2.0 + dx).round() as i64,
        (cy + h * s / 2.0 + dy).round() as i64,
    ];
    clip_edges(e, dims)
}

/// Applies judge feedback: `previous + round(gain * adjust)` per edge (half away from zero).
pub fn apply_feedback(fb: &QuestFeedback, dims: (u32, u32)) -> BBox {
    let p = fb.previous.edges();
    let a = fb.adjust.as_array();
    let step = |i: usize| p[i] + (fb.gain * a[i] as f64).round() as i64;
    clip_edges([step(0), step(1), step(2), step(3)], dims)
}

fn quest_raw(present: bool, bbox: Option<BBox>) -> String {
    match bbox {
        Some(b) if present => json!({ "present": true, "bbox": <[u32; 4]>::from(b) }).to_string(),
        _ => json!({ "present": false }).to_string(),
    }
}

/// Presence and box for `class`, derived from ground truth plus noise.
pub fn oracle_quester(
    truth: &OracleTruth,
    class: ClassId,
    noise: &NoiseModel,
    iteration: u32,
    feedback: Option<&QuestFeedback>,
) -> QuestResult {
    if let Some(fb) = feedback {
        let b = apply_feedback(fb, truth.dims);
        return QuestResult { class_id: class, present: true, bbox: Some(b), confidence: None, raw: quest_raw(true, Some(b)) };
    }
    let mut rng = rng_for(noise, &truth.episode_id, class, iteration, "quest");
    // fixed draw order so every noise level sees the same underlying stream
    let u_flip: f64 = rng.random();
    let z_scale: f64 = rng.sample(StandardNormal);
    let zx: f64 = rng.sample(StandardNormal);
    let zy: f64 = rng.sample(StandardNormal);

    let gt_present = truth.gt_presence.get(&class).copied().unwrap_or(false);
    let present = gt_present ^ (u_flip < noise.flip_presence_prob);
    let bbox = present.then(|| {
        let base = match truth.gt_boxes.get(&class) {
            Some(b) if gt_present => *b,
            // hallucinated object: start from the central quarter of the image
            _ => {
                let (w, h) = truth.dims;
                BBox::new(w / 4, h / 4, (3 * w / 4).max(w / 4 + 1), (3 * h / 4).max(h / 4 + 1))
            }
        };
        noisy_box(base, truth.dims, noise, z_scale, zx, zy)
    });
    QuestResult { class_id: class, present, bbox, confidence: None, raw: quest_raw(present, bbox) }
}

/// Ground-truth mask of `class` restricted to `bbox`, with optional boundary noise.
pub fn oracle_segmenter(truth: &OracleTruth, class: ClassId, bbox: BBox, noise: &NoiseModel, iteration: u32) -> BinaryMask {
    let (w, h) = truth.dims;
    let Some(gt) = truth.gt_masks.get(&class) else {
        return BinaryMask::empty(w, h);
    };
    let mut m = gt.clip_to_box(bbox);
    if noise.mask_boundary_radius > 0 {
        let mut rng = rng_for(noise, &truth.episode_id, class, iteration, "segment");
        let r = noise.mask_boundary_radius as i32;
        let signed = if rng.random_bool(0.5) { r } else { -r };
        m = m.morph(signed).clip_to_box(bbox);
    }
    m
}

/// GOOD iff IoU with ground truth reaches `threshold`; BAD carries the per-edge box correction.
pub fn oracle_judge(
    truth: &OracleTruth,
    class: ClassId,
    mask: &BinaryMask,
    current_box: Option<BBox>,
    threshold: f64,
) -> Judgement {
    let (w, h) = truth.dims;
    let empty = BinaryMask::empty(w, h);
    let gt = truth.gt_masks.get(&class).unwrap_or(&empty);
    let score = iou(mask, gt).unwrap_or(0.0);
    let inter = mask.and(gt).map(|m| m.count()).unwrap_or(0) as f64;
    let ratio = |num: f64, den: usize| if den == 0 { 1.0 } else { num / den as f64 };
    let criteria = CriteriaScores {
        shape_conformity: Some(score),
        coverage: Some(ratio(inter, gt.count())),
        class_confidence: Some(ratio(inter, mask.count())),
    };
    if score >= threshold {
        return Judgement {
            verdict: Verdict::Good,
            critique: format!("IoU {score:.4} meets threshold {threshold}"),
            suggestion: None,
            criteria_scores: Some(criteria),
        };
    }
    let suggestion = match truth.gt_boxes.get(&class) {
        Some(&target) => {
            let current = current_box.or_else(|| tight_bbox(mask).ok()).unwrap_or(BBox::full(w, h));
            Suggestion::Adjust(EdgeAdjust::between(current, target))
        }
        None => Suggestion::Text("the box contains no instance of the class".into()),
    };
    Judgement {
        verdict: Verdict::Bad,
        critique: format!("IoU {score:.4} below threshold {threshold}"),
        suggestion: Some(suggestion),
        criteria_scores: Some(criteria),
    }
}

fn judgement_json(j: &Judgement) -> String {
    let mut v = json!({ "verdict": j.verdict, "critique": j.critique });
    if let Some(s) = &j.suggestion {
        v["suggestion"] = serde_json::to_value(s).expect("suggestion serializes");
    }
    if let Some(c) = &j.criteria_scores {
        v["criteria_scores"] = serde_json::to_value(c).expect("scores serialize");
    }
    v.to_string()
}

/// Serves all three tool kinds from registered episodes' ground truth.
pub struct OracleBackend {
    config: OracleConfig,
    truths: RwLock<HashMap<String, Arc<OracleTruth>>>,
}

impl OracleBackend {
    pub fn new(config: OracleConfig) -> Self {
        Self { config, truths: RwLock::new(HashMap::new()) }
    }

    pub fn with_episodes<'a>(config: OracleConfig, episodes: impl IntoIterator<Item = &'a Episode>) -> Self {
        let b = Self::new(config);
        for e in episodes {
            b.register(e);
        }
        b
    }

    pub fn register(&self, episode: &Episode) {
        self.truths
            .write()
            .expect("oracle registry lock")
            .insert(episode.episode_id.clone(), Arc::new(OracleTruth::from(episode)));
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    fn truth(&self, episode_id: &str) -> Result<Arc<OracleTruth>, AttemptError> {
        self.truths
            .read()
            .expect("oracle registry lock")
            .get(episode_id)
            .cloned()
            .ok_or_else(|| AttemptError::Fatal(ToolError::Unsupported(format!("unknown episode {episode_id}"))))
    }
}

fn unsupported(msg: impl Into<String>) -> AttemptError {
    AttemptError::Fatal(ToolError::Unsupported(msg.into()))
}

impl ToolBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn attempt(&self, request: &ToolRequest) -> Result<ResponseBody, AttemptError> {
        let ctx = &request.context;
        let stage = ctx.stage.ok_or_else(|| unsupported("oracle needs a call stage"))?;
        if stage == CallStage::Plan {
            let plan = serde_json::to_string(&canonical_plan()).expect("plan serializes");
            return Ok(ResponseBody::Text(format!("Canonical plan.\n```json\n{plan}\n```")));
        }
        let truth = self.truth(&ctx.episode_id)?;
        let class = ctx.class_id.ok_or_else(|| unsupported("oracle needs a class id"))?;
        let noise = &self.config.noise;
        match (request.tool, stage, &request.payload) {
            (ToolKind::Vision, CallStage::Cognize, _) => {
                let name = ctx.class_name.clone().unwrap_or_else(|| format!("class {class}"));
                let profile = json!({
                    "description": format!("a {name} as outlined by the red box"),
                    "attributes": [name],
                    "spatial_notes": "",
                });
                Ok(ResponseBody::Text(profile.to_string()))
            }
            (ToolKind::Vision, CallStage::Quest, _) => {
                let feedback = match (ctx.prior_box, ctx.feedback) {
                    (Some(previous), Some(adjust)) => {
                        Some(QuestFeedback { previous, adjust, gain: self.config.feedback_gain })
                    }
                    _ => None,
                };
                let r = oracle_quester(&truth, class, noise, ctx.iteration, feedback.as_ref());
                Ok(ResponseBody::Text(r.raw))
            }
            (ToolKind::Segment, _, Payload::Segment(q)) => Ok(ResponseBody::Masks(
                q.boxes
                    .iter()
                    .map(|&b| encode_mask_rle_base64(&oracle_segmenter(&truth, class, b, noise, ctx.iteration)))
                    .collect(),
            )),
            (ToolKind::Vision, CallStage::Judge, Payload::Vision(v)) => {
                let part = v
                    .images
                    .iter()
                    .find(|p| p.role_tag == "mask")
                    .ok_or_else(|| unsupported("judge request carries no mask image"))?;
                let mask = decode_mask(&part.png, MaskFormat::Png1bit)
                    .map_err(|e| AttemptError::Fatal(ToolError::Malformed(e.to_string())))?;
                let j = oracle_judge(&truth, class, &mask, ctx.prior_box, self.config.judge_threshold);
                Ok(ResponseBody::Text(judgement_json(&j)))
            }
            (tool, stage, _) => Err(unsupported(format!("oracle cannot serve {tool:?} at stage {stage:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 40x30 image, class 1 is a 10x8 block at (5,4), class 2 absent.
    fn truth() -> OracleTruth {
        let gt = BBox::new(5, 4, 15, 12);
        let m1 = BinaryMask::from_box(40, 30, gt);
        OracleTruth {
            episode_id: "ep".into(),
            dims: (40, 30),
            gt_presence: [(ClassId(1), true), (ClassId(2), false)].into(),
            gt_masks: [(ClassId(1), m1), (ClassId(2), BinaryMask::empty(40, 30))].into(),
            gt_boxes: [(ClassId(1), gt)].into(),
        }
    }

    #[test]
    fn zero_noise_quester_is_ground_truth() {
        let t = truth();
        let r = oracle_quester(&t, ClassId(1), &NoiseModel::default(), 0, None);
        assert!(r.present);
        assert_eq!(r.bbox, Some(BBox::new(5, 4, 15, 12)));
        let r = oracle_quester(&t, ClassId(2), &NoiseModel::default(), 0, None);
        assert!(!r.present && r.bbox.is_none());
    }

    #[test]
    fn forced_flip() {
        let noise = NoiseModel { flip_presence_prob: 1.0, ..Default::default() };
        assert!(!oracle_quester(&truth(), ClassId(1), &noise, 0, None).present);
        let hallucinated = oracle_quester(&truth(), ClassId(2), &noise, 0, None);
        assert!(hallucinated.present && hallucinated.bbox.unwrap().is_valid_for(40, 30));
    }

    #[test]
    fn noisy_quester_is_deterministic() {
        let noise = NoiseModel { box_scale_sigma: 0.4, seed: 11, ..Default::default() };
        let a = oracle_quester(&truth(), ClassId(1), &noise, 0, None);
        let b = oracle_quester(&truth(), ClassId(1), &noise, 0, None);
        assert_eq!(a, b);
        let c = oracle_quester(&truth(), ClassId(1), &noise, 1, None);
        assert!(c.bbox.unwrap().is_valid_for(40, 30));
    }

    #[test]
    fn feedback_contracts_each_edge() {
        let prev = BBox::new(0, 0, 30, 25);
        let gt = BBox::new(5, 4, 15, 12);
        let fb = QuestFeedback { previous: prev, adjust: EdgeAdjust::between(prev, gt), gain: 0.5 };
        let r = oracle_quester(&truth(), ClassId(1), &NoiseModel::default(), 1, Some(&fb));
        // 0->5: +3 (2.5 rounds away), 0->4: +2, 30->15: -8 (-7.5), 25->12: -7 (-6.5)
        assert_eq!(r.bbox, Some(BBox::new(3, 2, 22, 18)));
    }

    #[test]
    fn segmenter_cases() {
        let t = truth();
        let z = NoiseModel::default();
        assert_eq!(oracle_segmenter(&t, ClassId(1), BBox::full(40, 30), &z, 0), t.gt_masks[&ClassId(1)]);
        // left half of the object: columns 5..10
        let left = oracle_segmenter(&t, ClassId(1), BBox::new(0, 0, 10, 30), &z, 0);
        let expected = BinaryMask::from_fn(40, 30, |x, y| (5..10).contains(&x) && (4..12).contains(&y));
        assert_eq!(left, expected);
        assert!(oracle_segmenter(&t, ClassId(2), BBox::full(40, 30), &z, 0).is_empty());
    }

    #[test]
    fn segmenter_output_stays_in_box() {
        let t = truth();
        for seed in 0..20 {
            let noise = NoiseModel { mask_boundary_radius: 2, seed, ..Default::default() };
            let b = BBox::new(8, 6, 20, 20);
            let m = oracle_segmenter(&t, ClassId(1), b, &noise, 0);
            for y in 0..30 {
                for x in 0..40 {
                    if m.get(x, y) {
                        assert!(b.contains(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn judge_cases() {
        let t = truth();
        let gt = &t.gt_masks[&ClassId(1)];
        let j = oracle_judge(&t, ClassId(1), gt, Some(BBox::new(5, 4, 15, 12)), 0.9);
        assert_eq!(j.verdict, Verdict::Good);
        assert!(j.suggestion.is_none());

        let disjoint = BinaryMask::from_box(40, 30, BBox::new(30, 20, 35, 25));
        let j = oracle_judge(&t, ClassId(1), &disjoint, Some(BBox::new(30, 20, 35, 25)), 0.9);
        assert_eq!(j.verdict, Verdict::Bad);
        match j.suggestion {
            Some(Suggestion::Adjust(a)) => {
                assert!(!a.is_zero());
                assert_eq!(a, EdgeAdjust { dx_min: -25, dy_min: -16, dx_max: -20, dy_max: -13 });
            }
            other => panic!("{other:?}"),
        }

        // 6 of the gt's 10 columns: IoU = 48/80 = 0.6, counted independently
        let partial = BinaryMask::from_fn(40, 30, |x, y| (5..11).contains(&x) && (4..12).contains(&y));
        let brute = {
            let (mut i, mut u) = (0, 0);
            for y in 0..30 {
                for x in 0..40 {
                    let (a, b) = (partial.get(x, y), gt.get(x, y));
                    i += (a && b) as u32;
                    u += (a || b) as u32;
                }
            }
            i as f64 / u as f64
        };
        assert!((brute - 0.6).abs() < 1e-12);
        assert_eq!(oracle_judge(&t, ClassId(1), &partial, None, 0.5).verdict, Verdict::Good);
        assert_eq!(oracle_judge(&t, ClassId(1), &partial, None, 0.61).verdict, Verdict::Bad);
    }
}
