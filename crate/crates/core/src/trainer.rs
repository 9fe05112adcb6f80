//! Fold training, k-fold cross-validation and grid search.
//!
//! Training batches are split into a fixed number of contiguous shards whose
//! gradients are summed in shard order, so results do not depend on the
//! thread count.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentError, AugmentationPolicy, TransformSampler};
use crate::data::{DatasetManifest, FoldPlan, ImageStore, Split};
use crate::label::Label;
use crate::metrics::{mean_metric, std_metric, MetricValue, UndefinedPolicy};
use crate::nn::{Gradients, Optimizer, OptimizerKind, SampleLoss, Tensor};
use crate::seed;
use crate::zoo::{save_checkpoint, BackboneName, ClassifierModel, ModelFactory, ZooError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("invalid training split: {0}")]
    InvalidSplit(String),
    #[error("training diverged in fold {fold} after epoch {last_good_epoch}")]
    Diverged { fold: usize, last_good_epoch: usize, history: Vec<EpochRecord> },
    #[error("{count} held-out samples reached a training batch")]
    Leakage { count: u64 },
    #[error("no image loaded for sample {0}")]
    MissingImage(String),
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.into(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    /// Used by SGD only.
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 20,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// A zero learning rate is accepted and leaves every parameter unchanged.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidHyperparams(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epoch count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub backbone: BackboneName,
    pub fold_index: usize,
    pub hyperparams: Hyperparams,
    pub history: Vec<EpochRecord>,
    pub final_model: Option<PathBuf>,
    pub wall_time_s: f64,
    /// Why training ended before `hyperparams.epochs`, if it did.
    pub stop_reason: Option<String>,
    pub train_size: usize,
    pub val_ids: Vec<String>,
    /// Held-out ids seen in training batches; always zero for a completed run.
    pub leakage_violations: u64,
}

impl TrainingRun {
    pub fn final_val_accuracy(&self) -> MetricValue {
        match (&self.stop_reason, self.history.last()) {
            (None, Some(r)) => MetricValue::Defined(r.val_accuracy),
            _ => MetricValue::Undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub backbone: BackboneName,
    pub k: usize,
    pub runs: Vec<TrainingRun>,
    pub fold_val_accuracies: Vec<MetricValue>,
    pub mean_accuracy: MetricValue,
    /// Population standard deviation over folds.
    pub std_accuracy: MetricValue,
    pub diverged_folds: Vec<usize>,
}

impl CrossValReport {
    pub fn from_runs(backbone: BackboneName, runs: Vec<TrainingRun>) -> Self {
        let fold_val_accuracies: Vec<MetricValue> = runs.iter().map(TrainingRun::final_val_accuracy).collect();
        let diverged_folds = runs.iter().filter(|r| r.stop_reason.is_some()).map(|r| r.fold_index).collect();
        Self {
            backbone,
            k: runs.len(),
            mean_accuracy: mean_metric(&fold_val_accuracies, UndefinedPolicy::Propagate),
            std_accuracy: std_metric(&fold_val_accuracies, UndefinedPolicy::Propagate),
            fold_val_accuracies,
            runs,
            diverged_folds,
        }
    }

    /// Index of the fold with the highest final validation accuracy.
    pub fn best_fold(&self) -> Option<usize> {
        self.fold_val_accuracies
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.value().map(|v| (i, v)))
            .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((i, v)),
            })
            .map(|(i, _)| i)
    }
}

/// Labelled images at the model's input size.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub manifest: &'a DatasetManifest,
    pub images: &'a ImageStore,
}

impl TrainingData<'_> {
    fn sample(&self, id: &str) -> Result<(&image::RgbImage, Label)> {
        let label = self.manifest.sample(id).map(|s| s.label).ok_or_else(|| TrainError::MissingImage(id.into()))?;
        let img = self.images.get(id).ok_or_else(|| TrainError::MissingImage(id.into()))?;
        Ok((img, label))
    }
}

/// Held-out membership check run on every training batch.
#[derive(Debug, Clone)]
pub struct LeakageGuard {
    forbidden: BTreeSet<String>,
    violations: u64,
}

impl LeakageGuard {
    /// Forbids the validation ids and every test-split id of the manifest.
    pub fn new(manifest: &DatasetManifest, val_ids: &[String]) -> Self {
        let mut forbidden: BTreeSet<String> = val_ids.iter().cloned().collect();
        forbidden.extend(manifest.ids_in(Split::Test).map(str::to_string));
        Self { forbidden, violations: 0 }
    }

    pub fn check(&mut self, batch: &[String]) -> u64 {
        let hits = batch.iter().filter(|id| self.forbidden.contains(*id)).count() as u64;
        self.violations += hits;
        hits
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }
}

const MAX_SHARDS: usize = 8;
const GRADIENT_BUDGET_BYTES: u64 = 1 << 30;

fn shard_count(trainable: u64) -> usize {
    let per = (trainable * 8).max(1);
    ((GRADIENT_BUDGET_BYTES / per) as usize).clamp(1, MAX_SHARDS)
}

struct PassStats {
    loss: f64,
    correct: usize,
    n: usize,
}

impl PassStats {
    fn new() -> Self {
        Self { loss: 0.0, correct: 0, n: 0 }
    }

    fn add(&mut self, s: &SampleLoss, target: usize) {
        self.loss += s.loss;
        let predicted = crate::zoo::label_for_score(s.probabilities[Label::Fertile.index()]);
        self.correct += (predicted.index() == target) as usize;
        self.n += 1;
    }

    fn loss(&self) -> f64 {
        self.loss / self.n as f64
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n as f64
    }
}

fn batch_gradients(model: &ClassifierModel, inputs: &[(Tensor, usize)], shards: usize) -> (Gradients, Vec<SampleLoss>) {
    let net = model.network();
    let chunk = inputs.len().div_ceil(shards).max(1);
    let parts: Vec<(Gradients, Vec<SampleLoss>)> = inputs
        .par_chunks(chunk)
        .map(|c| {
            let mut g = net.zero_gradients();
            let losses = c.iter().map(|(x, t)| net.accumulate(x, *t, &mut g)).collect();
            (g, losses)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut total, mut losses) = iter.next().expect("non-empty batch");
    for (g, l) in iter {
        total.add(&g);
        losses.extend(l);
    }
    total.scale(1.0 / inputs.len() as f64);
    (total, losses)
}

/// Mean cross-entropy and accuracy in inference mode, without augmentation.
pub fn evaluate_ids(model: &ClassifierModel, ids: &[String], data: TrainingData<'_>) -> Result<(f64, f64)> {
    let results = ids
        .par_iter()
        .map(|id| {
            let (img, label) = data.sample(id)?;
            let x = model.input_tensor(img)?;
            let logits = model.network().logits(&x);
            let probabilities = crate::nn::softmax(logits.data());
            let loss = crate::nn::cross_entropy(logits.data(), label.index());
            Ok((SampleLoss { loss, probabilities }, label.index()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = PassStats::new();
    for (s, t) in &results {
        stats.add(s, *t);
    }
    Ok((stats.loss(), stats.accuracy()))
}

/// Trains `model` in place on `train_ids`, validating on `val_ids` after
/// every epoch. Only training ids are augmented.
pub fn train_fold(
    model: &mut ClassifierModel,
    fold_index: usize,
    train_ids: &[String],
    val_ids: &[String],
    data: TrainingData<'_>,
    policy: &AugmentationPolicy,
    hp: &Hyperparams,
) -> Result<TrainingRun> {
    hp.validate()?;
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(TrainError::InvalidSplit("training and validation ids must both be non-empty".into()));
    }
    let val_set: BTreeSet<&str> = val_ids.iter().map(String::as_str).collect();
    if let Some(id) = train_ids.iter().find(|id| val_set.contains(id.as_str())) {
        return Err(TrainError::InvalidSplit(format!("{id} is in both the training and validation ids")));
    }
    let start = Instant::now();
    let fold_seed = seed::derive_seed(hp.seed, fold_index as u64);
    let mut sampler = TransformSampler::for_worker(*policy, hp.seed, fold_index as u64)?;
    let mut order_rng = seed::stream_rng(fold_seed, 1);
    let mut optimizer = Optimizer::new(hp.optimizer, hp.learning_rate, hp.momentum, hp.weight_decay);
    let mut guard = LeakageGuard::new(data.manifest, val_ids);
    let shards = shard_count(model.network().trainable_count());
    let size = model.input_size();
    let mut order: Vec<String> = train_ids.to_vec();
    let mut history = Vec::with_capacity(hp.epochs);

    for epoch in 1..=hp.epochs {
        order.shuffle(&mut order_rng);
        let mut stats = PassStats::new();
        for batch in order.chunks(hp.batch_size) {
            if guard.check(batch) > 0 {
                return Err(TrainError::Leakage { count: guard.violations() });
            }
            let transforms: Vec<_> = batch.iter().map(|_| sampler.sample(size)).collect();
            let inputs = batch
                .par_iter()
                .zip(&transforms)
                .map(|(id, t)| {
                    let (img, label) = data.sample(id)?;
                    let augmented = augment::apply(img, t, policy.fill_value)?;
                    Ok((model.input_tensor(&augmented)?, label.index()))
                })
                .collect::<Result<Vec<_>>>()?;
            let (grads, losses) = batch_gradients(model, &inputs, shards);
            for (s, (_, t)) in losses.iter().zip(&inputs) {
                stats.add(s, *t);
            }
            if !grads.is_finite() || losses.iter().any(|s| !s.loss.is_finite()) {
                return Err(TrainError::Diverged { fold: fold_index, last_good_epoch: epoch - 1, history });
            }
            optimizer.step(model.network_mut(), &grads);
        }
        let (val_loss, val_accuracy) = evaluate_ids(model, val_ids, data)?;
        let record = EpochRecord {
            epoch,
            train_loss: stats.loss(),
            train_accuracy: stats.accuracy(),
            val_loss,
            val_accuracy,
        };
        if !(record.train_loss.is_finite() && record.val_loss.is_finite()) {
            return Err(TrainError::Diverged { fold: fold_index, last_good_epoch: epoch - 1, history });
        }
        log::info!(
            "{} fold {fold_index} epoch {epoch}: loss {:.4} acc {:.3} | val loss {:.4} acc {:.3}",
            model.backbone.name,
            record.train_loss,
            record.train_accuracy,
            record.val_loss,
            record.val_accuracy
        );
        history.push(record);
    }
    Ok(TrainingRun {
        backbone: model.backbone.name,
        fold_index,
        hyperparams: *hp,
        history,
        final_model: None,
        wall_time_s: start.elapsed().as_secs_f64(),
        stop_reason: None,
        train_size: train_ids.len(),
        val_ids: val_ids.to_vec(),
        leakage_violations: guard.violations(),
    })
}

/// Output layout under a run root: `<root>/<backbone>/...`.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn backbone_dir(&self, b: BackboneName) -> PathBuf {
        self.root.join(b.as_str())
    }

    pub fn fold_dir(&self, b: BackboneName, fold: usize) -> PathBuf {
        self.backbone_dir(b).join(format!("fold{fold}"))
    }

    pub fn final_dir(&self, b: BackboneName) -> PathBuf {
        self.backbone_dir(b).join("final")
    }

    pub fn crossval_file(&self, b: BackboneName) -> PathBuf {
        self.backbone_dir(b).join("crossval.json")
    }
}

pub const HISTORY_FILE: &str = "history.jsonl";
pub const MODEL_FILE: &str = "model.safetensors";
pub const RUN_FILE: &str = "run.json";

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in history {
        serde_json::to_writer(&mut w, r).map_err(|e| TrainError::Format { path: path.into(), reason: e.to_string() })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TrainError::Format { path: path.into(), reason: e.to_string() })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| TrainError::Format { path: path.into(), reason: e.to_string() })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| TrainError::Format { path: path.into(), reason: e.to_string() })
}

/// Writes `history.jsonl`, `run.json` and the checkpoint into `dir`.
pub fn persist_run(dir: &Path, run: &mut TrainingRun, model: Option<&ClassifierModel>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_history(&dir.join(HISTORY_FILE), &run.history)?;
    if let Some(model) = model {
        let path = dir.join(MODEL_FILE);
        save_checkpoint(model, &path)?;
        run.final_model = Some(path);
    }
    write_json(&dir.join(RUN_FILE), run)
}

fn diverged_run(backbone: BackboneName, fold: usize, hp: &Hyperparams, val: &[String], train: usize, history: Vec<EpochRecord>, last: usize) -> TrainingRun {
    TrainingRun {
        backbone,
        fold_index: fold,
        hyperparams: *hp,
        history,
        final_model: None,
        wall_time_s: 0.0,
        stop_reason: Some(format!("diverged after epoch {last}")),
        train_size: train,
        val_ids: val.to_vec(),
        leakage_violations: 0,
    }
}

/// Trains a fresh model per fold (run `i` validates on fold `i`). A diverged
/// fold is recorded and the remaining folds still run. With `layout`, each
/// fold's history and checkpoint plus `crossval.json` are written.
#[allow(clippy::too_many_arguments)]
pub fn run_cross_validation(
    data: TrainingData<'_>,
    factory: &ModelFactory,
    backbone: BackboneName,
    plan: &FoldPlan,
    policy: &AugmentationPolicy,
    hp: &Hyperparams,
    layout: Option<&RunLayout>,
) -> Result<CrossValReport> {
    hp.validate()?;
    let mut runs = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let mut model = factory.build(backbone, hp.seed)?;
        let train_ids = plan.training_ids(fold);
        let val_ids = plan.fold_ids(fold);
        let (mut run, trained) = match train_fold(&mut model, fold, &train_ids, &val_ids, data, policy, hp) {
            Ok(run) => (run, true),
            Err(TrainError::Diverged { history, last_good_epoch, .. }) => {
                log::warn!("{backbone} fold {fold} diverged after epoch {last_good_epoch}");
                (diverged_run(model.backbone.name, fold, hp, &val_ids, train_ids.len(), history, last_good_epoch), false)
            }
            Err(e) => return Err(e),
        };
        if let Some(layout) = layout {
            persist_run(&layout.fold_dir(run.backbone, fold), &mut run, trained.then_some(&model))?;
        }
        runs.push(run);
    }
    let name = runs.first().map_or(backbone, |r| r.backbone);
    let report = CrossValReport::from_runs(name, runs);
    if let Some(layout) = layout {
        write_json(&layout.crossval_file(name), &report)?;
    }
    Ok(report)
}

/// Trains on every training-split id and validates on the test split.
pub fn train_final(
    data: TrainingData<'_>,
    factory: &ModelFactory,
    backbone: BackboneName,
    policy: &AugmentationPolicy,
    hp: &Hyperparams,
    layout: Option<&RunLayout>,
) -> Result<(TrainingRun, ClassifierModel)> {
    let train_ids: Vec<String> = data.manifest.ids_in(Split::Train).map(str::to_string).collect();
    let test_ids: Vec<String> = data.manifest.ids_in(Split::Test).map(str::to_string).collect();
    let mut model = factory.build(backbone, hp.seed)?;
    let mut run = train_fold(&mut model, 0, &train_ids, &test_ids, data, policy, hp)?;
    if let Some(layout) = layout {
        persist_run(&layout.final_dir(run.backbone), &mut run, Some(&model))?;
    }
    Ok((run, model))
}

fn ranks_above(a: (&Hyperparams, &MetricValue), b: (&Hyperparams, &MetricValue)) -> bool {
    match (a.1.value(), b.1.value()) {
        (Some(_), None) => true,
        (None, _) => false,
        (Some(x), Some(y)) if x != y => x > y,
        _ => (a.0.learning_rate, a.0.batch_size) < (b.0.learning_rate, b.0.batch_size),
    }
}

/// Picks the grid point with the highest cross-validated mean accuracy;
/// ties go to the lower learning rate, then the smaller batch, then grid order.
pub fn select_best(table: &[(Hyperparams, MetricValue)]) -> Result<Hyperparams> {
    let mut best = table.first().ok_or(TrainError::EmptyGrid)?;
    for entry in &table[1..] {
        if ranks_above((&entry.0, &entry.1), (&best.0, &best.1)) {
            best = entry;
        }
    }
    Ok(best.0)
}

pub fn tune_hyperparameters(
    data: TrainingData<'_>,
    factory: &ModelFactory,
    backbone: BackboneName,
    grid: &[Hyperparams],
    plan: &FoldPlan,
    policy: &AugmentationPolicy,
) -> Result<(Hyperparams, Vec<(Hyperparams, MetricValue)>)> {
    if grid.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let mut table = Vec::with_capacity(grid.len());
    for hp in grid {
        let report = run_cross_validation(data, factory, backbone, plan, policy, hp, None)?;
        table.push((*hp, report.mean_accuracy));
    }
    Ok((select_best(&table)?, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_folds, preprocess, render_pair, ImageSample, PreprocessPolicy, SyntheticSpec};
    use crate::zoo::build_reference_cnn;
    use std::collections::BTreeMap;

    const SIDE: u32 = 24;

    fn dataset(n: usize) -> (DatasetManifest, ImageStore) {
        let spec = SyntheticSpec::new(n, n, (64, 64), 5);
        let policy = PreprocessPolicy::new((SIDE, SIDE));
        let mut samples = Vec::new();
        let mut images = BTreeMap::new();
        for i in 0..n {
            let (f, inf) = render_pair(&spec, i);
            for (label, img) in [(Label::Fertile, f), (Label::Infertile, inf)] {
                let id = format!("{label}/{i:03}");
                images.insert(id.clone(), preprocess(&img, &policy).unwrap());
                samples.push(ImageSample { id, path: format!("{label}/{i:03}.png").into(), label });
            }
        }
        let m = DatasetManifest::new(samples).unwrap();
        let m = crate::data::split_train_test(&m, 0.8, 1, true).unwrap();
        (m, ImageStore::from_images(images))
    }

    fn ids(m: &DatasetManifest, s: Split) -> Vec<String> {
        m.ids_in(s).map(str::to_string).collect()
    }

    fn hp(epochs: usize) -> Hyperparams {
        Hyperparams { learning_rate: 1e-3, batch_size: 4, epochs, optimizer: OptimizerKind::Adam, ..Default::default() }
    }

    fn factory() -> ModelFactory {
        ModelFactory { reference_input: (SIDE, SIDE), ..Default::default() }
    }

    #[test]
    fn history_has_one_record_per_epoch() {
        let (m, store) = dataset(5);
        let data = TrainingData { manifest: &m, images: &store };
        let mut model = build_reference_cnn((SIDE, SIDE), 0);
        let run = train_fold(&mut model, 0, &ids(&m, Split::Train), &ids(&m, Split::Test), data, &Default::default(), &hp(3)).unwrap();
        assert_eq!(run.history.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        for r in &run.history {
            assert!((0.0..=1.0).contains(&r.train_accuracy) && (0.0..=1.0).contains(&r.val_accuracy));
            assert!(r.train_loss >= 0.0 && r.val_loss >= 0.0);
        }
        assert_eq!(run.leakage_violations, 0);
    }

    #[test]
    fn zero_learning_rate_keeps_the_head() {
        let (m, store) = dataset(4);
        let data = TrainingData { manifest: &m, images: &store };
        let mut model = build_reference_cnn((SIDE, SIDE), 3);
        let before = model.network().values().to_vec();
        let hp = Hyperparams { learning_rate: 0.0, epochs: 2, batch_size: 3, ..Default::default() };
        train_fold(&mut model, 0, &ids(&m, Split::Train), &ids(&m, Split::Test), data, &Default::default(), &hp).unwrap();
        for id in model.head_param_ids() {
            assert_eq!(model.network().value(id), before[id].as_slice());
        }
    }

    #[test]
    fn training_is_reproducible() {
        let (m, store) = dataset(5);
        let data = TrainingData { manifest: &m, images: &store };
        let run = || {
            let mut model = build_reference_cnn((SIDE, SIDE), 1);
            train_fold(&mut model, 2, &ids(&m, Split::Train), &ids(&m, Split::Test), data, &Default::default(), &hp(2))
                .unwrap()
                .history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn held_out_ids_never_reach_a_batch() {
        let (m, store) = dataset(4);
        let data = TrainingData { manifest: &m, images: &store };
        let mut model = build_reference_cnn((SIDE, SIDE), 0);
        let mut train = ids(&m, Split::Train);
        let val = train.split_off(train.len() - 2);
        train.push(ids(&m, Split::Test)[0].clone());
        let err = train_fold(&mut model, 0, &train, &val, data, &Default::default(), &hp(1)).unwrap_err();
        assert!(matches!(err, TrainError::Leakage { count: 1 }), "{err}");
        let overlap = train_fold(&mut model, 0, &val, &val, data, &Default::default(), &hp(1)).unwrap_err();
        assert!(matches!(overlap, TrainError::InvalidSplit(_)));
    }

    #[test]
    fn divergence_is_reported_with_history() {
        let (m, store) = dataset(4);
        let data = TrainingData { manifest: &m, images: &store };
        let mut model = build_reference_cnn((SIDE, SIDE), 0);
        let hp = Hyperparams { learning_rate: 1e300, momentum: 0.0, epochs: 3, batch_size: 2, ..Default::default() };
        let err = train_fold(&mut model, 1, &ids(&m, Split::Train), &ids(&m, Split::Test), data, &Default::default(), &hp).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { fold: 1, .. }), "{err}");
    }

    #[test]
    fn cross_validation_rotates_folds() {
        let (m, store) = dataset(5);
        let data = TrainingData { manifest: &m, images: &store };
        let plan = make_folds(&m, 4, 2, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let layout = RunLayout::new(dir.path());
        let report =
            run_cross_validation(data, &factory(), BackboneName::Reference, &plan, &Default::default(), &hp(1), Some(&layout))
                .unwrap();
        assert_eq!(report.runs.len(), 4);
        for (i, run) in report.runs.iter().enumerate() {
            assert_eq!(run.val_ids, plan.fold_ids(i));
            assert_eq!(run.train_size, plan.training_ids(i).len());
            let fold = layout.fold_dir(BackboneName::Reference, i);
            assert_eq!(read_history(&fold.join(HISTORY_FILE)).unwrap(), run.history);
            assert!(fold.join(MODEL_FILE).is_file());
        }
        let back: CrossValReport = read_json(&layout.crossval_file(BackboneName::Reference)).unwrap();
        assert_eq!(back, report);
        let accs: Vec<f64> = report.fold_val_accuracies.iter().map(|v| v.value().unwrap()).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((report.mean_accuracy.value().unwrap() - mean).abs() <= 1e-12);
    }

    fn run_with(acc: f64) -> TrainingRun {
        TrainingRun {
            backbone: BackboneName::Vgg16,
            fold_index: 0,
            hyperparams: Hyperparams::default(),
            history: vec![EpochRecord { epoch: 1, train_loss: 0.1, train_accuracy: 1.0, val_loss: 0.1, val_accuracy: acc }],
            final_model: None,
            wall_time_s: 0.0,
            stop_reason: None,
            train_size: 1,
            val_ids: vec![],
            leakage_violations: 0,
        }
    }

    #[test]
    fn fold_mean_and_std() {
        let runs = [0.98, 0.98, 0.98, 0.985, 0.9765].map(run_with).to_vec();
        let report = CrossValReport::from_runs(BackboneName::Vgg16, runs);
        assert!((report.mean_accuracy.value().unwrap() - 0.9803).abs() < 1e-12);
        let flat = CrossValReport::from_runs(BackboneName::Vgg16, vec![run_with(0.9); 5]);
        assert_eq!(flat.std_accuracy, MetricValue::Defined(0.0));
        assert!((flat.mean_accuracy.value().unwrap() - 0.9).abs() < 1e-15);
        let mut broken = vec![run_with(0.9); 3];
        broken[1].stop_reason = Some("diverged".into());
        let r = CrossValReport::from_runs(BackboneName::Vgg16, broken);
        assert_eq!(r.mean_accuracy, MetricValue::Undefined);
        assert_eq!(r.best_fold(), Some(0));
    }

    #[test]
    fn grid_selection_ties_and_errors() {
        let a = Hyperparams { learning_rate: 1e-3, ..Default::default() };
        let b = Hyperparams { learning_rate: 1e-4, ..Default::default() };
        let c = Hyperparams { learning_rate: 1e-4, batch_size: 8, ..Default::default() };
        assert_eq!(select_best(&[(a, MetricValue::Defined(0.5))]).unwrap(), a);
        assert_eq!(select_best(&[(a, MetricValue::Defined(0.9)), (b, MetricValue::Defined(0.9))]).unwrap(), b);
        assert_eq!(select_best(&[(b, MetricValue::Defined(0.9)), (c, MetricValue::Defined(0.9))]).unwrap(), c);
        assert_eq!(select_best(&[(b, MetricValue::Undefined), (a, MetricValue::Defined(0.1))]).unwrap(), a);
        assert!(matches!(select_best(&[]), Err(TrainError::EmptyGrid)));
        let (m, store) = dataset(3);
        let plan = make_folds(&m, 2, 0, true).unwrap();
        let data = TrainingData { manifest: &m, images: &store };
        let err = tune_hyperparameters(data, &factory(), BackboneName::Reference, &[], &plan, &Default::default());
        assert!(matches!(err, Err(TrainError::EmptyGrid)));
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        for bad in [
            Hyperparams { learning_rate: -1.0, ..Default::default() },
            Hyperparams { batch_size: 0, ..Default::default() },
            Hyperparams { epochs: 0, ..Default::default() },
            Hyperparams { momentum: 1.0, ..Default::default() },
            Hyperparams { weight_decay: f64::NAN, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
