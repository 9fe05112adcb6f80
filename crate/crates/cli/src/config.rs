//! The run configuration document. Every section is optional in the file;
//! missing keys take the defaults below and unknown keys are rejected.

use std::path::{Path, PathBuf};

use candling::augment::AugmentationPolicy;
use candling::data::{Labeling, PreprocessPolicy, SyntheticSpec};
use candling::nn::OptimizerKind;
use candling::trainer::Hyperparams;
use candling::zoo::{BackboneName, FineTunePolicy, ModelFactory};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// vgg16, resnet50, inceptionnet, mobilenet or reference.
    pub backbone: BackboneName,
    /// Root of every artifact the commands write.
    pub out: PathBuf,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub models: ModelsConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneName::Reference,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            synth: SynthConfig::default(),
            augment: AugmentConfig::default(),
            models: ModelsConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Image directory to ingest; `prepare --synthetic` and `synth` use
    /// `<out>/synthetic` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub labeling: Labeling,
    pub train_fraction: f64,
    pub k: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, labeling: Labeling::BySubdirectory, train_fraction: 0.8, k: 5, stratified: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub margin: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { margin: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_fertile: usize,
    pub n_infertile: usize,
    /// `[height, width]`.
    pub size: [u32; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_fertile: 100, n_infertile: 100, size: [256, 256], seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Degrees.
    pub rotation: [f64; 2],
    pub flip_x: bool,
    pub flip_y: bool,
    /// Degrees, shared by both axes.
    pub shear: [f64; 2],
    pub scale: [f64; 2],
    /// Fraction of the side, shared by both axes.
    pub translate: [f64; 2],
    pub fill: u8,
    /// Drives `augment-preview`; training streams derive from `train.seed`.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = AugmentationPolicy::default();
        Self {
            rotation: p.rotation_range_deg.into(),
            flip_x: p.x_reflection,
            flip_y: p.y_reflection,
            shear: p.shear_range_deg.into(),
            scale: p.scale_range.into(),
            translate: p.translation_range_frac.into(),
            fill: p.fill_value,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Never read weights; pretrained backbones fall back to the reference CNN.
    pub offline: bool,
    pub fine_tune: FineTunePolicy,
    /// `[height, width]` of the reference CNN input.
    pub reference_input: [u32; 2],
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self { cache_dir: None, offline: false, fine_tune: FineTunePolicy::Full, reference_input: [64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        Self {
            lr: hp.learning_rate,
            batch: hp.batch_size,
            epochs: hp.epochs,
            optimizer: hp.optimizer,
            momentum: hp.momentum,
            weight_decay: hp.weight_decay,
            seed: hp.seed,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.synth.seed = seed;
        self.augment.seed = seed;
        self.train.seed = seed;
    }

    pub fn synthetic_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| self.out.join("synthetic"))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest.csv")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out.join("runs")
    }

    pub fn eval_dir(&self, backbone: BackboneName) -> PathBuf {
        self.out.join("eval").join(backbone.as_str())
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn preview_dir(&self) -> PathBuf {
        self.out.join("preview")
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let [h, w] = self.synth.size;
        SyntheticSpec::new(self.synth.n_fertile, self.synth.n_infertile, (h, w), self.synth.seed)
    }

    pub fn preprocess_policy(&self, target: (u32, u32)) -> PreprocessPolicy {
        PreprocessPolicy { crop_margin_fraction: self.preprocess.margin, ..PreprocessPolicy::new(target) }
    }

    pub fn augmentation(&self) -> AugmentationPolicy {
        let a = &self.augment;
        AugmentationPolicy {
            rotation_range_deg: a.rotation.into(),
            x_reflection: a.flip_x,
            y_reflection: a.flip_y,
            shear_range_deg: a.shear.into(),
            scale_range: a.scale.into(),
            translation_range_frac: a.translate.into(),
            fill_value: a.fill,
        }
    }

    pub fn factory(&self) -> ModelFactory {
        let [h, w] = self.models.reference_input;
        ModelFactory {
            cache_dir: self.models.cache_dir.clone(),
            offline: self.models.offline,
            fine_tune: self.models.fine_tune,
            reference_input: (h, w),
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        let t = &self.train;
        Hyperparams {
            learning_rate: t.lr,
            batch_size: t.batch,
            epochs: t.epochs,
            optimizer: t.optimizer,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: t.seed,
        }
    }

    /// Writes the effective configuration as `config.toml` into `dir`.
    pub fn write_into(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml())
    }
}
