//! Pascal-5i style dataset index and deterministic N-way K-shot episode sampling.
//!
//! On-disk layout under the dataset root:
//!
//! ```text
//! manifest.json        {"classes":[{"id":1,"name":"cat"}], "images":[{"id":"0001","classes":[1]}]}
//! images/<id>.png|jpg  RGB image
//! masks/<id>.png       single channel, pixel value = class id, 0 = background, 255 = void
//! ```
//!
//! Classes are split into four folds of equal size by ascending id: with 20
//! classes fold `f` holds ids `5f+1..=5f+5`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::{self, tight_bbox, BBox, BinaryMask, Image};
use crate::hashing::{content_hash, StableHasher};

pub const NUM_FOLDS: u8 = 4;
/// Mask value for VOC "void" boundary pixels; never a class.
pub const VOID_LABEL: u8 = 255;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("image {image_id}: mask is {mask_w}x{mask_h} but image is {img_w}x{img_h}")]
    MaskImageMismatch { image_id: String, img_w: u32, img_h: u32, mask_w: u32, mask_h: u32 },
    #[error("image {image_id}: mask contains unknown class value {value}")]
    UnknownClassInMask { image_id: String, value: u8 },
    #[error("image {image_id}: manifest classes {listed:?} disagree with mask classes {found:?}")]
    PresenceMismatch { image_id: String, listed: Vec<u32>, found: Vec<u32> },
    #[error("image {0}: no image or mask file found")]
    MissingFile(String),
    #[error("class {class} has {available} usable images, need {needed}")]
    InsufficientImages { class: ClassId, available: usize, needed: usize },
    #[error("invalid episode spec: {0}")]
    InvalidSpec(String),
    #[error("unknown image id {0}")]
    UnknownImage(String),
    #[error("episode descriptor inconsistent with dataset: {0}")]
    DescriptorMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Canvas(#[from] canvas::CanvasError),
}

pub type Result<T, E = EpisodeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
}

/// Names of the layout entries under a dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    pub manifest: String,
    pub images_dir: String,
    pub masks_dir: String,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self { manifest: "manifest.json".into(), images_dir: "images".into(), masks_dir: "masks".into() }
    }
}

#[derive(Debug, Deserialize)]
struct Manifest {
    classes: Vec<ClassInfo>,
    images: Vec<ManifestImage>,
}

#[derive(Debug, Deserialize)]
struct ManifestImage {
    id: String,
    classes: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub present_classes: BTreeSet<ClassId>,
}

/// Validated, immutable view of a dataset. Pixel data is decoded on demand.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<ClassInfo>,
    pub images: Vec<ImageEntry>,
    pub fold_of_class: BTreeMap<ClassId, u8>,
    pub fingerprint: String,
    by_id: HashMap<String, usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EpisodeError + '_ {
    move |source| EpisodeError::Io { path: path.to_path_buf(), source }
}

/// Partition of classes (sorted by id) into four equal consecutive folds.
pub fn fold_assignment(classes: &[ClassInfo]) -> Result<BTreeMap<ClassId, u8>> {
    let n = classes.len();
    if n == 0 || n % NUM_FOLDS as usize != 0 {
        return Err(EpisodeError::MalformedManifest(format!(
            "{n} classes cannot be split into {NUM_FOLDS} equal folds"
        )));
    }
    let per_fold = n / NUM_FOLDS as usize;
    let mut ids: Vec<ClassId> = classes.iter().map(|c| c.id).collect();
    ids.sort();
    Ok(ids.into_iter().enumerate().map(|(i, c)| (c, (i / per_fold) as u8)).collect())
}

fn read_mask_labels(path: &Path) -> Result<image::GrayImage> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| EpisodeError::Canvas(canvas::CanvasError::MalformedEncoding(format!("{}: {e}", path.display()))))?;
    Ok(img.into_luma8())
}

fn find_image_file(dir: &Path, id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"].iter().map(|ext| dir.join(format!("{id}.{ext}"))).find(|p| p.is_file())
}

/// Loads and fully validates a dataset rooted at `root`.
pub fn load_dataset(root: &Path, layout: &LayoutConfig) -> Result<DatasetIndex> {
    let manifest_path = root.join(&layout.manifest);
    if !manifest_path.is_file() {
        return Err(EpisodeError::MissingManifest(manifest_path));
    }
    let manifest_bytes = std::fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| EpisodeError::MalformedManifest(e.to_string()))?;

    let known: BTreeSet<ClassId> = manifest.classes.iter().map(|c| c.id).collect();
    if known.len() != manifest.classes.len() {
        return Err(EpisodeError::MalformedManifest("duplicate class id".into()));
    }
    if known.contains(&ClassId(0)) || known.iter().any(|c| c.0 >= VOID_LABEL as u32) {
        return Err(EpisodeError::MalformedManifest("class ids must be in 1..=254".into()));
    }
    let fold_of_class = fold_assignment(&manifest.classes)?;

    let images_dir = root.join(&layout.images_dir);
    let masks_dir = root.join(&layout.masks_dir);
    let mut fp = StableHasher::new();
    fp.bytes(&manifest_bytes);
    let mut images = Vec::with_capacity(manifest.images.len());
    let mut by_id = HashMap::new();
    for entry in manifest.images {
        if by_id.insert(entry.id.clone(), images.len()).is_some() {
            return Err(EpisodeError::MalformedManifest(format!("duplicate image id {}", entry.id)));
        }
        let image_path = find_image_file(&images_dir, &entry.id).ok_or_else(|| EpisodeError::MissingFile(entry.id.clone()))?;
        let mask_path = masks_dir.join(format!("{}.png", entry.id));
        if !mask_path.is_file() {
            return Err(EpisodeError::MissingFile(entry.id.clone()));
        }
        let (img_w, img_h) = image::image_dimensions(&image_path).map_err(|e| {
            EpisodeError::Canvas(canvas::CanvasError::MalformedEncoding(format!("{}: {e}", image_path.display())))
        })?;
        let labels = read_mask_labels(&mask_path)?;
        let (mask_w, mask_h) = labels.dimensions();
        if (mask_w, mask_h) != (img_w, img_h) {
            return Err(EpisodeError::MaskImageMismatch { image_id: entry.id, img_w, img_h, mask_w, mask_h });
        }
        let mut found = BTreeSet::new();
        for &v in labels.as_raw() {
            if v == 0 || v == VOID_LABEL {
                continue;
            }
            if !known.contains(&ClassId(v as u32)) {
                return Err(EpisodeError::UnknownClassInMask { image_id: entry.id, value: v });
            }
            found.insert(ClassId(v as u32));
        }
        let listed: BTreeSet<ClassId> = entry.classes.iter().copied().collect();
        if listed != found {
            return Err(EpisodeError::PresenceMismatch {
                image_id: entry.id,
                listed: listed.iter().map(|c| c.0).collect(),
                found: found.iter().map(|c| c.0).collect(),
            });
        }
        fp.str(&entry.id).bytes(&std::fs::read(&image_path).map_err(io_err(&image_path))?);
        fp.str(&content_hash(labels.as_raw()));
        images.push(ImageEntry {
            image_id: entry.id,
            image_path,
            mask_path,
            width: img_w,
            height: img_h,
            present_classes: listed,
        });
    }

    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes: manifest.classes,
        images,
        fold_of_class,
        fingerprint: fp.hex()[..16].to_string(),
        by_id,
    })
}

impl DatasetIndex {
    pub fn class_name(&self, id: ClassId) -> Option<&str> {
        self.classes.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }

    pub fn classes_in_fold(&self, fold: u8) -> Vec<ClassId> {
        self.fold_of_class.iter().filter(|(_, &f)| f == fold).map(|(&c, _)| c).collect()
    }

    pub fn classes_per_fold(&self) -> usize {
        self.classes.len() / NUM_FOLDS as usize
    }

    pub fn entry(&self, image_id: &str) -> Result<&ImageEntry> {
        self.by_id
            .get(image_id)
            .map(|&i| &self.images[i])
            .ok_or_else(|| EpisodeError::UnknownImage(image_id.to_string()))
    }

    pub fn load_image(&self, image_id: &str) -> Result<Image> {
        let e = self.entry(image_id)?;
        let bytes = std::fs::read(&e.image_path).map_err(io_err(&e.image_path))?;
        Ok(canvas::decode_image_png(&bytes)?)
    }

    /// Binary mask of `class` (`label == class`); empty when the class is absent.
    pub fn load_class_mask(&self, image_id: &str, class: ClassId) -> Result<BinaryMask> {
        let e = self.entry(image_id)?;
        if !e.present_classes.contains(&class) {
            return Ok(BinaryMask::empty(e.width, e.height));
        }
        let labels = read_mask_labels(&e.mask_path)?;
        let (w, h) = labels.dimensions();
        Ok(BinaryMask::from_bits(w, h, labels.as_raw().iter().map(|&v| v as u32 == class.0).collect())?)
    }

    /// Rebuilds a full episode (pixels and ground truth) from its descriptor.
    pub fn materialize(&self, d: &EpisodeDescriptor) -> Result<Episode> {
        let mut support = Vec::with_capacity(d.support.len());
        for g in &d.support {
            let mut examples = Vec::with_capacity(g.image_ids.len());
            for id in &g.image_ids {
                examples.push(self.support_example(id, g.class_id)?);
            }
            support.push(SupportGroup { class_id: g.class_id, examples });
        }
        let query = self.entry(&d.query_image_id)?;
        let mut gt_presence = BTreeMap::new();
        let mut gt_masks = BTreeMap::new();
        for g in &d.support {
            let present = query.present_classes.contains(&g.class_id);
            gt_presence.insert(g.class_id, present);
            gt_masks.insert(g.class_id, self.load_class_mask(&d.query_image_id, g.class_id)?);
        }
        if gt_presence != d.gt_presence {
            return Err(EpisodeError::DescriptorMismatch(format!(
                "episode {} ground truth differs from dataset annotations",
                d.episode_id
            )));
        }
        let query_image = Arc::new(self.load_image(&d.query_image_id)?);
        Ok(Episode {
            episode_id: d.episode_id.clone(),
            ordinal: d.ordinal,
            spec: d.spec.clone(),
            support,
            query_image_id: d.query_image_id.clone(),
            query_image,
            gt_presence,
            gt_masks,
            class_names: d
                .support
                .iter()
                .map(|g| (g.class_id, self.class_name(g.class_id).unwrap_or_default().to_string()))
                .collect(),
        })
    }

    fn support_example(&self, image_id: &str, class_id: ClassId) -> Result<SupportExample> {
        let mask = self.load_class_mask(image_id, class_id)?;
        let bbox = tight_bbox(&mask)?;
        let image = Arc::new(self.load_image(image_id)?);
        Ok(SupportExample { image_id: image_id.to_string(), class_id, mask, bbox, image })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub fold: u8,
    pub seed: u64,
    pub count: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self { n_way: 1, k_shot: 1, fold: 0, seed: 0, count: 100 }
    }
}

impl EpisodeSpec {
    pub fn validate(&self, classes_per_fold: usize) -> Result<()> {
        let bad = |m: String| Err(EpisodeError::InvalidSpec(m));
        if self.n_way < 1 || self.k_shot < 1 || self.count < 1 {
            return bad(format!("n_way, k_shot and count must be >= 1 (got {self:?})"));
        }
        if self.fold >= NUM_FOLDS {
            return bad(format!("fold {} not in 0..{NUM_FOLDS}", self.fold));
        }
        if self.n_way > classes_per_fold {
            return bad(format!("n_way {} exceeds {classes_per_fold} classes per fold", self.n_way));
        }
        Ok(())
    }
}

/// One annotated support image for a class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportExample {
    pub image_id: String,
    pub class_id: ClassId,
    pub mask: BinaryMask,
    pub bbox: BBox,
    pub image: Arc<Image>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportGroup {
    pub class_id: ClassId,
    pub examples: Vec<SupportExample>,
}

/// One N-way K-shot task with its held-out query ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub episode_id: String,
    pub ordinal: u64,
    pub spec: EpisodeSpec,
    /// Groups in ascending class order.
    pub support: Vec<SupportGroup>,
    pub query_image_id: String,
    pub query_image: Arc<Image>,
    pub gt_presence: BTreeMap<ClassId, bool>,
    pub gt_masks: BTreeMap<ClassId, BinaryMask>,
    pub class_names: BTreeMap<ClassId, String>,
}

impl Episode {
    pub fn class_name(&self, class: ClassId) -> String {
        self.class_names.get(&class).cloned().unwrap_or_else(|| format!("class {}", class.0))
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.support.iter().map(|g| g.class_id).collect()
    }

    pub fn group(&self, class: ClassId) -> Option<&SupportGroup> {
        self.support.iter().find(|g| g.class_id == class)
    }

    pub fn descriptor(&self) -> EpisodeDescriptor {
        EpisodeDescriptor {
            episode_id: self.episode_id.clone(),
            ordinal: self.ordinal,
            spec: self.spec.clone(),
            support: self
                .support
                .iter()
                .map(|g| SupportRef {
                    class_id: g.class_id,
                    image_ids: g.examples.iter().map(|e| e.image_id.clone()).collect(),
                })
                .collect(),
            query_image_id: self.query_image_id.clone(),
            gt_presence: self.gt_presence.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportRef {
    pub class_id: ClassId,
    pub image_ids: Vec<String>,
}

/// Pixel-free episode record, one JSON object per line in episode list files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeDescriptor {
    pub episode_id: String,
    pub ordinal: u64,
    pub spec: EpisodeSpec,
    pub support: Vec<SupportRef>,
    pub query_image_id: String,
    pub gt_presence: BTreeMap<ClassId, bool>,
}

pub fn episode_id(seed: u64, ordinal: u64, query_id: &str, support_ids: &[&str]) -> String {
    let mut ids: Vec<&str> = support_ids.to_vec();
    ids.sort_unstable();
    let mut h = StableHasher::new();
    h.u64(seed).u64(ordinal).str(query_id);
    for id in ids {
        h.str(id);
    }
    h.hex()[..16].to_string()
}

/// Draws `spec.count` episodes; a pure function of the index contents and the spec.
pub fn sample_episodes(index: &DatasetIndex, spec: &EpisodeSpec) -> Result<Vec<Episode>> {
    sample_descriptors(index, spec)?.iter().map(|d| index.materialize(d)).collect()
}

/// Sampling without pixel decoding.
pub fn sample_descriptors(index: &DatasetIndex, spec: &EpisodeSpec) -> Result<Vec<EpisodeDescriptor>> {
    spec.validate(index.classes_per_fold())?;
    let fold_classes = index.classes_in_fold(spec.fold);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);

    for ordinal in 0..spec.count as u64 {
        let mut chosen: Vec<ClassId> = rand::seq::index::sample(&mut rng, fold_classes.len(), spec.n_way)
            .into_iter()
            .map(|i| fold_classes[i])
            .collect();
        chosen.sort();

        let candidates: Vec<&ImageEntry> = index
            .images
            .iter()
            .filter(|e| chosen.iter().any(|c| e.present_classes.contains(c)))
            .collect();
        if candidates.is_empty() {
            return Err(EpisodeError::InsufficientImages { class: chosen[0], available: 0, needed: spec.k_shot + 1 });
        }
        let query = candidates[rand::Rng::random_range(&mut rng, 0..candidates.len())];

        let mut support = Vec::with_capacity(chosen.len());
        for &c in &chosen {
            let pool: Vec<&ImageEntry> = index
                .images
                .iter()
                .filter(|e| e.present_classes.contains(&c) && e.image_id != query.image_id)
                .collect();
            if pool.len() < spec.k_shot {
                return Err(EpisodeError::InsufficientImages {
                    class: c,
                    available: pool.len() + usize::from(query.present_classes.contains(&c)),
                    needed: spec.k_shot + 1,
                });
            }
            let picks = rand::seq::index::sample(&mut rng, pool.len(), spec.k_shot);
            support.push(SupportRef { class_id: c, image_ids: picks.into_iter().map(|i| pool[i].image_id.clone()).collect() });
        }

        let all_support: Vec<&str> = support.iter().flat_map(|g| g.image_ids.iter().map(String::as_str)).collect();
        let gt_presence = chosen.iter().map(|&c| (c, query.present_classes.contains(&c))).collect();
        out.push(EpisodeDescriptor {
            episode_id: episode_id(spec.seed, ordinal, &query.image_id, &all_support),
            ordinal,
            spec: spec.clone(),
            support,
            query_image_id: query.image_id.clone(),
            gt_presence,
        });
    }
    Ok(out)
}

pub fn write_descriptors_jsonl(descriptors: &[EpisodeDescriptor]) -> String {
    let mut s = String::new();
    for d in descriptors {
        s.push_str(&serde_json::to_string(d).expect("descriptor serializes"));
        s.push('\n');
    }
    s
}

pub fn read_descriptors_jsonl(text: &str) -> std::result::Result<Vec<EpisodeDescriptor>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(n: u32) -> Vec<ClassInfo> {
        (1..=n).map(|i| ClassInfo { id: ClassId(i), name: format!("c{i}") }).collect()
    }

    #[test]
    fn twenty_classes_fold_in_blocks_of_five() {
        let folds = fold_assignment(&classes(20)).unwrap();
        for f in 0..4u32 {
            for c in (5 * f + 1)..=(5 * f + 5) {
                assert_eq!(folds[&ClassId(c)], f as u8);
            }
        }
    }

    #[test]
    fn four_classes_one_per_fold() {
        let folds = fold_assignment(&classes(4)).unwrap();
        for i in 0..4u32 {
            assert_eq!(folds[&ClassId(i + 1)], (i % 4) as u8);
        }
    }

    #[test]
    fn uneven_class_count_rejected() {
        assert!(fold_assignment(&classes(6)).is_err());
        assert!(fold_assignment(&[]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(EpisodeSpec { n_way: 6, ..Default::default() }.validate(5).is_err());
        assert!(EpisodeSpec { fold: 4, ..Default::default() }.validate(5).is_err());
        assert!(EpisodeSpec { k_shot: 0, ..Default::default() }.validate(5).is_err());
        assert!(EpisodeSpec::default().validate(5).is_ok());
    }

    #[test]
    fn episode_id_ignores_support_order() {
        let a = episode_id(7, 3, "q", &["b", "a"]);
        let b = episode_id(7, 3, "q", &["a", "b"]);
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert_ne!(a, episode_id(7, 4, "q", &["a", "b"]));
    }

    #[test]
    fn empty_root_is_missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path(), &LayoutConfig::default()),
            Err(EpisodeError::MissingManifest(_))
        ));
    }
}
