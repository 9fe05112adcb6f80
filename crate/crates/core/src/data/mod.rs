//! Labelled candling-image collections: ingestion, segmentation, splitting,
//! folding, and a deterministic synthetic generator.

mod ingest;
mod manifest_io;
mod preprocess;
mod split;
mod store;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::label::Label;

pub use ingest::{ingest_directory, Labeling, LABELS_FILE};
pub use manifest_io::{read_manifest, write_manifest};
pub use preprocess::{otsu_threshold, preprocess, PreprocessPolicy, ThresholdMethod};
pub use split::{make_folds, split_train_test, FoldPlan};
pub use store::ImageStore;
pub use synthetic::{generate_synthetic, render_pair, EggGeometry, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("no image samples found under {0}")]
    NoSamples(PathBuf),
    #[error("cannot derive a label for {path}: {reason}")]
    LabelError { path: PathBuf, reason: String },
    #[error("cannot decode image {path}: {source}")]
    DecodeError {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write image {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("no egg found: every pixel is below the segmentation threshold")]
    NoEggFound,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid fold count k={k} for {train} training samples (need 2 <= k <= train)")]
    InvalidFoldCount { k: usize, train: usize },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One labelled image on disk. Pixels are decoded on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSample {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
}

impl ImageSample {
    pub fn load_pixels(&self) -> Result<RgbImage> {
        decode(&self.path)
    }
}

pub(crate) fn decode(path: &Path) -> Result<RgbImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| DataError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| DataError::io(path, e))?;
    let img = reader.decode().map_err(|source| DataError::DecodeError { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

/// The labelled collection with its train/test split and fold assignment.
///
/// Immutable once built; the `with_*` constructors return new manifests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    samples: Vec<ImageSample>,
    split: BTreeMap<String, Split>,
    fold: BTreeMap<String, usize>,
    seed: u64,
    class_counts: BTreeMap<Label, usize>,
}

impl DatasetManifest {
    /// Registers samples sorted lexicographically by path; no split yet.
    pub fn new(mut samples: Vec<ImageSample>) -> Result<Self> {
        samples.sort_by(|a, b| a.path.cmp(&b.path));
        let mut seen = BTreeSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
        }
        let mut class_counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
        for s in &samples {
            *class_counts.entry(s.label).or_default() += 1;
        }
        Ok(Self { samples, split: BTreeMap::new(), fold: BTreeMap::new(), seed: 0, class_counts })
    }

    pub(crate) fn with_assignments(
        mut self,
        split: BTreeMap<String, Split>,
        fold: BTreeMap<String, usize>,
        seed: u64,
    ) -> Result<Self> {
        for (id, f) in &fold {
            if split.get(id) != Some(&Split::Train) {
                return Err(DataError::InvalidSplit(format!("fold {f} assigned to non-training id {id}")));
            }
        }
        self.split = split;
        self.fold = fold;
        self.seed = seed;
        Ok(self)
    }

    /// Attaches a fold plan computed over this manifest's training split.
    pub fn with_folds(self, plan: &FoldPlan) -> Result<Self> {
        let train: BTreeSet<&str> = self.ids_in(Split::Train).collect();
        let planned: BTreeSet<&str> = plan.assignments.keys().map(String::as_str).collect();
        if train != planned {
            return Err(DataError::InvalidSplit("fold plan does not cover exactly the training split".into()));
        }
        let split = self.split.clone();
        let seed = self.seed;
        self.with_assignments(split, plan.assignments.clone(), seed)
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

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn class_counts(&self) -> &BTreeMap<Label, usize> {
        &self.class_counts
    }

    pub fn sample(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.split.get(id).copied()
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.fold.get(id).copied()
    }

    pub fn split_map(&self) -> &BTreeMap<String, Split> {
        &self.split
    }

    pub fn fold_map(&self) -> &BTreeMap<String, usize> {
        &self.fold
    }

    pub fn is_split(&self) -> bool {
        !self.samples.is_empty() && self.split.len() == self.samples.len()
    }

    /// Ids of one split, in sample order.
    pub fn ids_in(&self, split: Split) -> impl Iterator<Item = &str> + '_ {
        self.samples
            .iter()
            .filter(move |s| self.split.get(&s.id) == Some(&split))
            .map(|s| s.id.as_str())
    }

    /// The fold plan stored in this manifest, if folds were assigned.
    pub fn fold_plan(&self, stratified: bool) -> Option<FoldPlan> {
        if self.fold.is_empty() {
            return None;
        }
        let k = self.fold.values().max().map_or(0, |m| m + 1);
        Some(FoldPlan { k, assignments: self.fold.clone(), stratified })
    }
}
