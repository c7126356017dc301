//! Dataset ingestion, stratified splitting and minority-class
//! oversampling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::augment::{apply_transform, sample_transform, AugmentationConfig, TransformDraw};
use crate::error::{Error, Result};
use crate::par;
use crate::plane::Plane;
use crate::seed;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Pneumonia,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Normal, Label::Pneumonia];

    /// Binary target: Normal = 0, Pneumonia = 1.
    pub fn target(self) -> f32 {
        match self {
            Label::Normal => 0.0,
            Label::Pneumonia => 1.0,
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Normal => Label::Pneumonia,
            Label::Pneumonia => Label::Normal,
        }
    }

    /// Case-insensitive class directory name.
    pub fn from_dir_name(name: &str) -> Option<Label> {
        if name.eq_ignore_ascii_case("normal") {
            Some(Label::Normal)
        } else if name.eq_ignore_ascii_case("pneumonia") {
            Some(Label::Pneumonia)
        } else {
            None
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "Normal",
            Label::Pneumonia => "Pneumonia",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::from_dir_name(s).ok_or_else(|| Error::Config(format!("unknown class label {s:?}")))
    }
}

/// Recipe for a generated sample: the source image and the transform
/// applied to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub source: PathBuf,
    pub draw: TransformDraw,
}

/// One grayscale image with its class. Pixels are decoded on demand so a
/// full dataset never has to sit in memory; generated samples replay
/// their transform over the source image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageSample {
    pub path: PathBuf,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<Augmentation>,
    #[serde(skip)]
    memory: Option<Arc<Plane>>,
}

impl PartialEq for ImageSample {
    fn eq(&self, other: &Self) -> bool {
        self.path == other.path
            && self.label == other.label
            && self.augmentation == other.augmentation
    }
}

impl ImageSample {
    pub fn from_file(path: impl Into<PathBuf>, label: Label) -> Self {
        Self {
            path: path.into(),
            label,
            augmentation: None,
            memory: None,
        }
    }

    /// A sample whose pixels (0-255 scale) are held in memory; `path` is
    /// only an identifier.
    pub fn in_memory(path: impl Into<PathBuf>, label: Label, pixels: Plane) -> Self {
        Self {
            path: path.into(),
            label,
            augmentation: None,
            memory: Some(Arc::new(pixels)),
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.augmentation.is_some()
    }

    fn derived(&self, index: usize, draw: TransformDraw) -> Self {
        let source = self.source_path().to_path_buf();
        let mut path = source.clone().into_os_string();
        path.push(format!("#aug{index}"));
        Self {
            path: path.into(),
            label: self.label,
            augmentation: Some(Augmentation { source, draw }),
            memory: self.memory.clone(),
        }
    }

    fn source_path(&self) -> &Path {
        self.augmentation
            .as_ref()
            .map(|a| a.source.as_path())
            .unwrap_or(&self.path)
    }

    /// Raw intensities (0-255) of the sample.
    pub fn pixels(&self) -> Result<Plane> {
        let base = match &self.memory {
            Some(p) => (**p).clone(),
            None => load_gray(self.source_path())?,
        };
        Ok(match &self.augmentation {
            Some(a) => apply_transform(&base, &a.draw, Default::default()),
            None => base,
        })
    }
}

/// Decodes any supported image file to 8-bit grayscale intensities.
pub fn load_gray(path: &Path) -> Result<Plane> {
    let img = image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Plane::from_gray_image(&img.to_luma8())
}

/// Ordered samples with cached per-class counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "DatasetRepr", into = "DatasetRepr")]
pub struct LabeledDataset {
    samples: Vec<ImageSample>,
    class_counts: BTreeMap<Label, usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetRepr {
    class_counts: BTreeMap<Label, usize>,
    samples: Vec<ImageSample>,
}

impl From<DatasetRepr> for LabeledDataset {
    fn from(r: DatasetRepr) -> Self {
        LabeledDataset::new(r.samples)
    }
}

impl From<LabeledDataset> for DatasetRepr {
    fn from(d: LabeledDataset) -> Self {
        DatasetRepr {
            class_counts: d.class_counts,
            samples: d.samples,
        }
    }
}

impl LabeledDataset {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        let mut class_counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
        for s in &samples {
            *class_counts.entry(s.label).or_default() += 1;
        }
        Self {
            samples,
            class_counts,
        }
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> &BTreeMap<Label, usize> {
        &self.class_counts
    }

    pub fn count(&self, label: Label) -> usize {
        self.class_counts.get(&label).copied().unwrap_or(0)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    fn indices_of(&self, label: Label) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].label == label)
            .collect()
    }

    fn sorted(mut samples: Vec<ImageSample>) -> Self {
        samples.sort_by(|a, b| a.path.cmp(&b.path));
        Self::new(samples)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub split_seed: u64,
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Sidecar summary of a dataset scan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub root: PathBuf,
    pub total: usize,
    pub class_counts: BTreeMap<Label, usize>,
    pub skipped: Vec<SkippedFile>,
    /// Image files found outside any class directory.
    pub unlabeled: usize,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
        .unwrap_or(false)
}

/// Label from the nearest class-named ancestor directory below `root`.
fn label_for(root: &Path, path: &Path) -> Option<Label> {
    let rel = path.strip_prefix(root).ok()?;
    rel.parent()?
        .components()
        .rev()
        .find_map(|c| c.as_os_str().to_str().and_then(Label::from_dir_name))
}

/// Recursively lists every image under `NORMAL/` and `PNEUMONIA/` class
/// directories (any nesting, any case), verifies that it decodes and
/// returns the samples sorted by path. Undecodable files are skipped and
/// reported in the summary.
pub fn scan_dataset(root: &Path) -> Result<(LabeledDataset, ScanSummary)> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let mut candidates = Vec::new();
    let mut unlabeled = 0;
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if !entry.file_type().is_file() || !is_image(entry.path()) {
            continue;
        }
        match label_for(root, entry.path()) {
            Some(label) => candidates.push((entry.into_path(), label)),
            None => unlabeled += 1,
        }
    }

    let checks = par::map_slice(&candidates, |(path, _)| {
        image::ImageReader::open(path)
            .map_err(|e| e.to_string())
            .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
            .and_then(|r| r.decode().map_err(|e| e.to_string()))
            .and_then(|img| {
                if img.width() == 0 || img.height() == 0 {
                    Err("empty image".to_string())
                } else {
                    Ok(())
                }
            })
    });

    let mut samples = Vec::with_capacity(candidates.len());
    let mut skipped = Vec::new();
    for ((path, label), check) in candidates.into_iter().zip(checks) {
        match check {
            Ok(()) => samples.push(ImageSample::from_file(path, label)),
            Err(reason) => {
                log::warn!("skipping unreadable image {}: {reason}", path.display());
                skipped.push(SkippedFile { path, reason });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let dataset = LabeledDataset::sorted(samples);
    let summary = ScanSummary {
        root: root.to_path_buf(),
        total: dataset.len(),
        class_counts: dataset.class_counts().clone(),
        skipped,
        unlabeled,
    };
    log::info!(
        "scanned {}: {} images ({} normal, {} pneumonia), {} skipped",
        root.display(),
        summary.total,
        dataset.count(Label::Normal),
        dataset.count(Label::Pneumonia),
        summary.skipped.len()
    );
    Ok((dataset, summary))
}

/// Number of samples of a class that go to the training side.
pub fn train_count(class_size: usize, train_fraction: f64) -> usize {
    // Tolerance absorbs representation error such as 0.6 * 10 = 5.999...
    ((train_fraction * class_size as f64) + 1e-9).floor() as usize
}

/// Per-class random split: `floor(fraction * n)` of each class to
/// training, the remainder to validation. Both sides are sorted by path.
pub fn stratified_split(ds: &LabeledDataset, train_fraction: f64, seed: u64) -> Result<DatasetSplits> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (k, label) in Label::ALL.into_iter().enumerate() {
        let mut idx = ds.indices_of(label);
        if idx.len() < 2 {
            return Err(Error::TooFewSamples {
                label,
                count: idx.len(),
            });
        }
        let mut rng = seed::rng(seed, &[0x5350_4c54, k as u64]);
        idx.shuffle(&mut rng);
        let n_train = train_count(idx.len(), train_fraction);
        let (t, v) = idx.split_at(n_train);
        train.extend(t.iter().map(|&i| ds.samples[i].clone()));
        validation.extend(v.iter().map(|&i| ds.samples[i].clone()));
    }
    Ok(DatasetSplits {
        train: LabeledDataset::sorted(train),
        validation: LabeledDataset::sorted(validation),
        split_seed: seed,
        train_fraction,
    })
}

/// The smaller class; ties resolve to Normal.
pub fn minority_class(ds: &LabeledDataset) -> Label {
    if ds.count(Label::Pneumonia) < ds.count(Label::Normal) {
        Label::Pneumonia
    } else {
        Label::Normal
    }
}

fn augmented_copy(
    sample: &ImageSample,
    aug: &AugmentationConfig,
    seed: u64,
    source_index: usize,
    copy: usize,
) -> ImageSample {
    let mut rng = seed::rng(seed, &[0x4f56_5253, source_index as u64, copy as u64]);
    sample.derived(copy, sample_transform(aug, &mut rng))
}

/// Adds `copies_per_image` augmented variants of every minority-class
/// sample. Original samples are kept verbatim and the majority class is
/// untouched.
pub fn rebalance_by_oversampling(
    ds: &LabeledDataset,
    aug: &AugmentationConfig,
    copies_per_image: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    aug.validate()?;
    if copies_per_image == 0 {
        return Ok(ds.clone());
    }
    let target = minority_class(ds);
    let mut samples = ds.samples.clone();
    for (i, s) in ds.samples.iter().enumerate().filter(|(_, s)| s.label == target) {
        for copy in 1..=copies_per_image {
            samples.push(augmented_copy(s, aug, seed, i, copy));
        }
    }
    Ok(LabeledDataset::new(samples))
}

/// Augments the minority class round-robin until both classes have the
/// same count.
pub fn balance_by_oversampling(
    ds: &LabeledDataset,
    aug: &AugmentationConfig,
    seed: u64,
) -> Result<LabeledDataset> {
    aug.validate()?;
    let target = minority_class(ds);
    let deficit = ds.count(target.other()).saturating_sub(ds.count(target));
    let sources: Vec<usize> = ds.indices_of(target);
    if deficit == 0 {
        return Ok(ds.clone());
    }
    if sources.is_empty() {
        return Err(Error::TooFewSamples {
            label: target,
            count: 0,
        });
    }
    let mut samples = ds.samples.clone();
    for k in 0..deficit {
        let i = sources[k % sources.len()];
        let copy = k / sources.len() + 1;
        samples.push(augmented_copy(&ds.samples[i], aug, seed, i, copy));
    }
    Ok(LabeledDataset::new(samples))
}

/// Loads every sample's pixels in parallel, failing on the first error.
pub fn load_all(ds: &LabeledDataset) -> Result<Vec<Plane>> {
    par::map_slice(ds.samples(), ImageSample::pixels)
        .into_iter()
        .collect()
}
