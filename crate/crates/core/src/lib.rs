//! Training-free few-shot classification and segmentation (FS-CS) engine.
//!
//! An agent plans a sequence of vision tasks for each N-way K-shot episode,
//! describes the support objects, searches the query image for each class,
//! segments it from a proposed box and judges the result, refining the box
//! until the judge approves or the iteration budget runs out. Every tool call
//! goes through a [`toolkit::ToolBackend`], so the same loop runs against live
//! HTTP services, deterministic ground-truth oracles, or a recorded transcript.

pub mod agent;
pub mod canvas;
pub mod config;
pub mod episode;
pub mod hashing;
pub mod metrics;
pub mod prompts;
pub mod synth;
pub mod toolkit;

pub use agent::{run_batch, run_episode, visual_prompts, AgentConfig, Backends, Prediction, Transcript};
pub use canvas::{BBox, BinaryMask, Image, Rgb};
pub use episode::{ClassId, DatasetIndex, Episode, EpisodeSpec};
pub use metrics::{aggregate, iou, score_episode, MetricsReport};
