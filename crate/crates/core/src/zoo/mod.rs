//! Backbone catalogue, two-class classifiers and prediction.

pub mod arch;
mod checkpoint;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::label::Label;
use crate::nn::{reinitialize, Architecture, Network, ParamGroup, ParamId, Tensor};
use crate::seed;

pub use checkpoint::{load_checkpoint, load_pretrained, save_checkpoint, CheckpointMeta};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum ZooError {
    #[error("pretrained weights for {backbone} are unavailable: {reason}")]
    WeightsUnavailable { backbone: BackboneName, reason: String },
    #[error("weights file {path} does not fit {backbone}: {reason}")]
    WeightsMismatch { backbone: BackboneName, path: PathBuf, reason: String },
    #[error("input shape error: {0}")]
    InputShapeError(String),
    #[error("unknown backbone {0:?}")]
    UnknownBackbone(String),
    #[error("invalid fine-tune policy {0:?} (expected full, head_only or last_n_blocks:N)")]
    InvalidFineTune(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ZooError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneName {
    Vgg16,
    Resnet50,
    Inceptionnet,
    Mobilenet,
    /// The small from-scratch network used for offline runs.
    Reference,
}

impl BackboneName {
    pub const PRETRAINED: [BackboneName; 4] =
        [BackboneName::Vgg16, BackboneName::Resnet50, BackboneName::Inceptionnet, BackboneName::Mobilenet];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::Vgg16 => "vgg16",
            BackboneName::Resnet50 => "resnet50",
            BackboneName::Inceptionnet => "inceptionnet",
            BackboneName::Mobilenet => "mobilenet",
            BackboneName::Reference => "reference",
        }
    }

    /// Display name used in reports.
    pub fn display(self) -> &'static str {
        match self {
            BackboneName::Vgg16 => "VGG16",
            BackboneName::Resnet50 => "ResNet50",
            BackboneName::Inceptionnet => "InceptionNet",
            BackboneName::Mobilenet => "MobileNet",
            BackboneName::Reference => "Reference CNN",
        }
    }
}

impl fmt::Display for BackboneName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneName {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vgg16" => Ok(BackboneName::Vgg16),
            "resnet50" => Ok(BackboneName::Resnet50),
            "inceptionnet" | "inceptionv3" | "inception" => Ok(BackboneName::Inceptionnet),
            "mobilenet" | "mobilenetv2" => Ok(BackboneName::Mobilenet),
            "reference" => Ok(BackboneName::Reference),
            _ => Err(ZooError::UnknownBackbone(s.to_string())),
        }
    }
}

/// Per-channel input normalisation `(pixel[order[c]] - mean[c]) / std[c]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Source RGB channel feeding each network input channel.
    pub order: [usize; 3],
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// BGR with ImageNet channel means, no scaling.
    pub const CAFFE: Self = Self { order: [2, 1, 0], mean: [103.939, 116.779, 123.68], std: [1.0; 3] };
    /// RGB mapped to `[-1, 1]`.
    pub const SYMMETRIC: Self = Self { order: [0, 1, 2], mean: [127.5; 3], std: [127.5; 3] };

    pub fn apply(&self, img: &RgbImage) -> Tensor {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = (p.0[self.order[c]] as f64 - self.mean[c]) / self.std[c];
            }
        }
        Tensor::from_vec(crate::nn::Shape::new(3, h, w), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: BackboneName,
    /// Reference layer count of the original toolchain (metadata only).
    pub layer_count: usize,
    /// Reference trainable parameter count (metadata only).
    pub trainable_params: u64,
    /// `(height, width)`.
    pub input_size: (u32, u32),
    pub pretrained_source: String,
}

impl BackboneSpec {
    pub fn normalization(&self) -> Normalization {
        match self.name {
            BackboneName::Vgg16 | BackboneName::Resnet50 => Normalization::CAFFE,
            _ => Normalization::SYMMETRIC,
        }
    }

    /// The classifier graph with a two-class head.
    pub fn architecture(&self) -> Architecture {
        match self.name {
            BackboneName::Vgg16 => arch::vgg16(NUM_CLASSES),
            BackboneName::Resnet50 => arch::resnet50(NUM_CLASSES),
            BackboneName::Inceptionnet => arch::inception_v3(NUM_CLASSES),
            BackboneName::Mobilenet => arch::mobilenet_v2(NUM_CLASSES),
            BackboneName::Reference => arch::reference_cnn(self.input_size, NUM_CLASSES),
        }
    }

    pub fn weights_file(&self, cache_dir: &Path) -> PathBuf {
        cache_dir.join(format!("{}.safetensors", self.name))
    }
}

pub fn list_backbones() -> Vec<BackboneSpec> {
    let spec = |name, layer_count, trainable_params, side| BackboneSpec {
        name,
        layer_count,
        trainable_params,
        input_size: (side, side),
        pretrained_source: format!("imagenet:{name}"),
    };
    vec![
        spec(BackboneName::Vgg16, 41, 134_200_000, 224),
        spec(BackboneName::Resnet50, 177, 23_800_000, 224),
        spec(BackboneName::Inceptionnet, 315, 21_800_000, 299),
        spec(BackboneName::Mobilenet, 154, 2_200_000, 224),
    ]
}

pub fn backbone_spec(name: BackboneName) -> BackboneSpec {
    if name == BackboneName::Reference {
        return reference_spec((64, 64));
    }
    list_backbones().into_iter().find(|s| s.name == name).expect("every pretrained name is listed")
}

pub fn reference_spec(input_size: (u32, u32)) -> BackboneSpec {
    let arch = arch::reference_cnn(input_size, NUM_CLASSES);
    BackboneSpec {
        name: BackboneName::Reference,
        layer_count: arch.root.leaf_count(),
        trainable_params: arch.learnable_count(),
        input_size,
        pretrained_source: "none".into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FineTunePolicy {
    #[default]
    Full,
    HeadOnly,
    /// The head plus the last `n` backbone blocks.
    LastNBlocks(usize),
}

impl FineTunePolicy {
    pub fn trains(&self, group: ParamGroup, blocks: usize) -> bool {
        match (*self, group) {
            (_, ParamGroup::Head) => true,
            (FineTunePolicy::Full, _) => true,
            (FineTunePolicy::HeadOnly, _) => false,
            (FineTunePolicy::LastNBlocks(n), ParamGroup::Block(i)) => i + n >= blocks,
        }
    }
}

impl fmt::Display for FineTunePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FineTunePolicy::Full => f.write_str("full"),
            FineTunePolicy::HeadOnly => f.write_str("head_only"),
            FineTunePolicy::LastNBlocks(n) => write!(f, "last_n_blocks:{n}"),
        }
    }
}

impl FromStr for FineTunePolicy {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        match t {
            "full" => Ok(FineTunePolicy::Full),
            "head_only" => Ok(FineTunePolicy::HeadOnly),
            _ => t
                .strip_prefix("last_n_blocks:")
                .and_then(|n| n.parse().ok())
                .map(FineTunePolicy::LastNBlocks)
                .ok_or_else(|| ZooError::InvalidFineTune(s.to_string())),
        }
    }
}

impl Serialize for FineTunePolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FineTunePolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A backbone with a two-class head, its trainability flags and input
/// normalisation.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub backbone: BackboneSpec,
    pub fine_tune: FineTunePolicy,
    pub normalization: Normalization,
    pub seed: u64,
    network: Network,
}

/// Head initialisation stream, independent of any backbone initialisation.
const HEAD_STREAM: u64 = 0x4845_4144;

impl ClassifierModel {
    pub(crate) fn assemble(backbone: BackboneSpec, fine_tune: FineTunePolicy, seed: u64, mut network: Network) -> Self {
        let blocks = network.architecture().blocks;
        network.set_trainable(|g| fine_tune.trains(g, blocks));
        let normalization = backbone.normalization();
        Self { backbone, fine_tune, normalization, seed, network }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn architecture(&self) -> &Architecture {
        self.network.architecture()
    }

    pub fn input_size(&self) -> (u32, u32) {
        self.backbone.input_size
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        self.architecture().head_params().map(|(id, _)| id).collect()
    }

    /// Normalised input tensor; the image must already have the model's
    /// input size.
    pub fn input_tensor(&self, img: &RgbImage) -> Result<Tensor> {
        let (h, w) = self.input_size();
        if img.dimensions() != (w, h) {
            return Err(ZooError::InputShapeError(format!(
                "{} expects {h}x{w} inputs, got {}x{}",
                self.backbone.name,
                img.height(),
                img.width()
            )));
        }
        Ok(self.normalization.apply(img))
    }

    /// Two-class softmax in label-index order.
    pub fn class_probabilities(&self, img: &RgbImage) -> Result<[f64; 2]> {
        let p = self.network.probabilities(&self.input_tensor(img)?);
        Ok([p[0], p[1]])
    }
}

pub fn count_trainable_parameters(model: &ClassifierModel) -> u64 {
    model.network.trainable_count()
}

/// Builds a pretrained classifier from `<cache_dir>/<name>.safetensors`.
/// Backbone tensors are loaded verbatim; the two-class head is freshly
/// initialised from `seed`.
pub fn build_classifier(
    spec: &BackboneSpec,
    fine_tune: FineTunePolicy,
    seed: u64,
    cache_dir: Option<&Path>,
    offline: bool,
) -> Result<ClassifierModel> {
    if spec.name == BackboneName::Reference {
        return Ok(build_reference_cnn(spec.input_size, seed));
    }
    let Some(dir) = cache_dir else {
        return Err(ZooError::WeightsUnavailable { backbone: spec.name, reason: "no weight cache directory configured".into() });
    };
    let path = spec.weights_file(dir);
    if !path.is_file() {
        let reason = if offline {
            format!("offline mode and {} is not cached", path.display())
        } else {
            format!("{} not found; place converted ImageNet weights there", path.display())
        };
        return Err(ZooError::WeightsUnavailable { backbone: spec.name, reason });
    }
    let arch = spec.architecture();
    let head: Vec<ParamId> = arch.head_params().map(|(id, _)| id).collect();
    let values = load_pretrained(spec.name, &arch, &path)?;
    let mut network = Network::from_values(arch, values);
    reinitialize(&mut network, &head, seed::derive_seed(seed, HEAD_STREAM));
    Ok(ClassifierModel::assemble(spec.clone(), fine_tune, seed, network))
}

pub fn build_reference_cnn(input_size: (u32, u32), seed: u64) -> ClassifierModel {
    let spec = reference_spec(input_size);
    let network = Network::initialized(spec.architecture(), seed);
    ClassifierModel::assemble(spec, FineTunePolicy::Full, seed, network)
}

/// Builds classifiers by name from configured weight sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFactory {
    pub cache_dir: Option<PathBuf>,
    pub offline: bool,
    pub fine_tune: FineTunePolicy,
    /// Input size of the reference network.
    pub reference_input: (u32, u32),
}

impl Default for ModelFactory {
    fn default() -> Self {
        Self { cache_dir: None, offline: false, fine_tune: FineTunePolicy::Full, reference_input: (64, 64) }
    }
}

impl ModelFactory {
    pub fn spec(&self, name: BackboneName) -> BackboneSpec {
        match name {
            BackboneName::Reference => reference_spec(self.reference_input),
            name => backbone_spec(name),
        }
    }

    pub fn build(&self, name: BackboneName, seed: u64) -> Result<ClassifierModel> {
        build_classifier(&self.spec(name), self.fine_tune, seed, self.cache_dir.as_deref(), self.offline)
    }
}

/// Scores are P(fertile); a score of exactly 0.5 predicts fertile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBatch {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub predicted: Vec<Label>,
}

pub fn label_for_score(score: f64) -> Label {
    if score >= 0.5 {
        Label::Fertile
    } else {
        Label::Infertile
    }
}

pub fn predict(model: &ClassifierModel, ids: &[String], images: &[RgbImage]) -> Result<PredictionBatch> {
    use rayon::prelude::*;
    if ids.len() != images.len() {
        return Err(ZooError::InputShapeError(format!("{} ids for {} images", ids.len(), images.len())));
    }
    let scores = images
        .par_iter()
        .map(|img| model.class_probabilities(img).map(|p| p[Label::Fertile.index()]))
        .collect::<Result<Vec<_>>>()?;
    let predicted = scores.iter().map(|&s| label_for_score(s)).collect();
    Ok(PredictionBatch { ids: ids.to_vec(), scores, predicted })
}
