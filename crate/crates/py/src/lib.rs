//! Python bindings: dataset loading, episode sampling, oracle runs, metrics and codecs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use fscs_core::canvas::{decode_mask_rle_base64, encode_mask_rle_base64};
use fscs_core::config::RunConfig;
use fscs_core::episode::{load_dataset, sample_episodes, EpisodeSpec, LayoutConfig};
use fscs_core::metrics::{render_report, ReportFormat};
use fscs_core::toolkit::contract::contract_check as check_endpoint;
use fscs_core::{aggregate, run_batch, score_episode, visual_prompts, Backends, BinaryMask, DatasetIndex, Episode};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Binary mask with row-major pixels.
#[pyclass(name = "Mask", module = "fscs", frozen, from_py_object)]
#[derive(Clone)]
struct PyMask(BinaryMask);

#[pymethods]
impl PyMask {
    #[new]
    fn new(width: u32, height: u32, bits: Vec<bool>) -> PyResult<Self> {
        BinaryMask::from_bits(width, height, bits).map(Self).map_err(value_err)
    }

    /// Decodes the base64 run-length form used on the wire and in transcripts.
    #[staticmethod]
    fn from_rle(encoded: &str) -> PyResult<Self> {
        decode_mask_rle_base64(encoded).map(Self).map_err(value_err)
    }

    fn to_rle(&self) -> String {
        encode_mask_rle_base64(&self.0)
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height()
    }

    fn count(&self) -> usize {
        self.0.count() as usize
    }

    fn bits(&self) -> Vec<bool> {
        self.0.bits().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Mask({}x{}, {} on)", self.0.width(), self.0.height(), self.0.count())
    }
}

#[pyclass(name = "Dataset", module = "fscs", frozen)]
struct PyDataset(DatasetIndex);

#[pymethods]
impl PyDataset {
    #[new]
    fn new(root: PathBuf) -> PyResult<Self> {
        load_dataset(&root, &LayoutConfig::default()).map(Self).map_err(value_err)
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.0.fingerprint.clone()
    }

    /// `{class_id: name}` for every class.
    fn classes(&self) -> BTreeMap<u32, String> {
        self.0.classes.iter().map(|c| (c.id.0, c.name.clone())).collect()
    }

    fn classes_in_fold(&self, fold: u8) -> Vec<u32> {
        self.0.classes_in_fold(fold).into_iter().map(|c| c.0).collect()
    }

    #[pyo3(signature = (n_way = 1, k_shot = 1, fold = 0, seed = 0, count = 10))]
    fn sample(&self, n_way: usize, k_shot: usize, fold: u8, seed: u64, count: usize) -> PyResult<Vec<PyEpisode>> {
        let spec = EpisodeSpec { n_way, k_shot, fold, seed, count };
        Ok(sample_episodes(&self.0, &spec).map_err(value_err)?.into_iter().map(PyEpisode).collect())
    }

    fn __len__(&self) -> usize {
        self.0.images.len()
    }
}

#[pyclass(name = "Episode", module = "fscs", frozen, from_py_object)]
#[derive(Clone)]
struct PyEpisode(Episode);

#[pymethods]
impl PyEpisode {
    #[getter]
    fn episode_id(&self) -> String {
        self.0.episode_id.clone()
    }

    #[getter]
    fn class_ids(&self) -> Vec<u32> {
        self.0.class_ids().into_iter().map(|c| c.0).collect()
    }

    #[getter]
    fn query_image_id(&self) -> String {
        self.0.query_image_id.clone()
    }

    #[getter]
    fn gt_presence(&self) -> BTreeMap<u32, bool> {
        self.0.gt_presence.iter().map(|(c, &p)| (c.0, p)).collect()
    }

    fn gt_mask(&self, class_id: u32) -> PyResult<PyMask> {
        self.0
            .gt_masks
            .get(&fscs_core::ClassId(class_id))
            .map(|m| PyMask(m.clone()))
            .ok_or_else(|| value_err(format!("class {class_id} not in episode")))
    }

    /// The PNG images the agent sends, keyed by role.
    fn visual_prompts<'py>(&self, py: Python<'py>) -> PyResult<Vec<(String, Bound<'py, PyBytes>)>> {
        let parts = visual_prompts(&self.0, &Default::default()).map_err(value_err)?;
        Ok(parts.into_iter().map(|(name, png)| (name, PyBytes::new(py, &png))).collect())
    }

    fn descriptor_json(&self) -> String {
        serde_json::to_string(&self.0.descriptor()).expect("descriptor serializes")
    }

    fn __repr__(&self) -> String {
        format!("Episode({}, classes={:?})", self.0.episode_id, self.class_ids())
    }
}

/// Outcome of one agent run.
#[pyclass(name = "EpisodeResult", module = "fscs", frozen, get_all)]
struct PyEpisodeResult {
    episode_id: String,
    presence: BTreeMap<u32, bool>,
    masks: BTreeMap<u32, PyMask>,
    failed: bool,
    failure_reason: Option<String>,
    exact_match: bool,
    per_class_iou: BTreeMap<u32, f64>,
    transcript_jsonl: String,
}

/// Runs the agent against oracle backends. `overrides` use the CLI `--set` syntax,
/// e.g. `["oracle.noise.box_scale_sigma=0.4"]`.
#[pyfunction]
#[pyo3(signature = (episodes, overrides = Vec::new()))]
fn run_oracle(py: Python<'_>, episodes: Vec<PyEpisode>, overrides: Vec<String>) -> PyResult<Vec<PyEpisodeResult>> {
    let cfg = RunConfig::load(None, &overrides).map_err(value_err)?;
    let eps: Vec<Episode> = episodes.into_iter().map(|e| e.0).collect();
    let results = py.detach(|| run_batch(&eps, &Backends::oracle(cfg.oracle.clone(), &eps), &cfg.agent, cfg.parallelism));
    eps.iter()
        .zip(results)
        .map(|(ep, (pred, transcript))| {
            let score = score_episode(ep, &pred).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            Ok(PyEpisodeResult {
                episode_id: ep.episode_id.clone(),
                presence: pred.presence.iter().map(|(c, &p)| (c.0, p)).collect(),
                masks: pred.masks.iter().map(|(c, m)| (c.0, PyMask(m.clone()))).collect(),
                failed: pred.failed,
                failure_reason: pred.failure_reason.clone(),
                exact_match: score.exact_match,
                per_class_iou: score.per_class_iou.iter().map(|(c, &v)| (c.0, v)).collect(),
                transcript_jsonl: transcript.to_jsonl(),
            })
        })
        .collect()
}

/// Scores episodes against predictions and renders a report (`txt`, `json` or `csv`).
#[pyfunction]
#[pyo3(signature = (episodes, results, format = "txt", per_class_miou = false))]
fn report(episodes: Vec<PyEpisode>, results: Vec<PyRef<'_, PyEpisodeResult>>, format: &str, per_class_miou: bool) -> PyResult<String> {
    if episodes.len() != results.len() {
        return Err(value_err("episodes and results differ in length"));
    }
    let format = match format {
        "txt" => ReportFormat::TextTable,
        "json" => ReportFormat::Json,
        "csv" => ReportFormat::Csv,
        other => return Err(value_err(format!("unknown format {other}"))),
    };
    let mut scores = Vec::new();
    for (ep, r) in episodes.iter().zip(&results) {
        let mut pred = fscs_core::Prediction::empty(&ep.0);
        for (&c, &p) in &r.presence {
            pred.presence.insert(fscs_core::ClassId(c), p);
        }
        for (&c, m) in &r.masks {
            pred.masks.insert(fscs_core::ClassId(c), m.0.clone());
        }
        pred.failed = r.failed;
        scores.push(score_episode(&ep.0, &pred).map_err(value_err)?);
    }
    let mode = if per_class_miou { fscs_core::metrics::MiouMode::PerClass } else { fscs_core::metrics::MiouMode::Flat };
    let report = aggregate(&scores, mode).map_err(value_err)?;
    String::from_utf8(render_report(&report, format)).map_err(value_err)
}

#[pyfunction]
fn iou(a: PyRef<'_, PyMask>, b: PyRef<'_, PyMask>) -> PyResult<f64> {
    fscs_core::iou(&a.0, &b.0).map_err(value_err)
}

/// Runs the segmentation protocol fixtures against a server; returns `(passed, report)`.
#[pyfunction]
fn contract_check(py: Python<'_>, endpoint: String) -> (bool, String) {
    let report = py.detach(|| check_endpoint(&endpoint));
    (report.passed(), report.to_string())
}

#[pymodule]
fn fscs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMask>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyEpisodeResult>()?;
    m.add_function(wrap_pyfunction!(run_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(contract_check, m)?)?;
    Ok(())
}
