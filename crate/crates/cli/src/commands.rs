use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use candling::augment::{self, TransformSampler};
use candling::data::{self, DataError, DatasetManifest, FoldPlan, ImageStore, Split};
use candling::metrics::{self, MetricsReport};
use candling::report::{self, Phase, TableFormat, TableRow};
use candling::trainer::{self, CrossValReport, RunLayout, TrainError, TrainingData, TrainingRun, MODEL_FILE};
use candling::zoo::{self, BackboneName, ModelFactory, ZooError};
use candling::Label;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{require, Failure};

type Result<T = (), E = Failure> = std::result::Result<T, E>;

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Encode { .. } => Failure::Other(e.into()),
            e => Failure::Input(e.to_string()),
        }
    }
}

impl From<ZooError> for Failure {
    fn from(e: ZooError) -> Self {
        match &e {
            ZooError::WeightsUnavailable { .. } => Failure::Missing(PathBuf::from("pretrained weights"), e.to_string()),
            ZooError::WeightsMismatch { .. } | ZooError::InvalidFineTune(_) | ZooError::UnknownBackbone(_) => {
                Failure::Input(e.to_string())
            }
            _ => Failure::Other(e.into()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Failure::Diverged(e.to_string()),
            TrainError::Zoo(z) => z.into(),
            TrainError::InvalidHyperparams(_) | TrainError::InvalidSplit(_) | TrainError::Augment(_) => {
                Failure::Input(e.to_string())
            }
            e => Failure::Other(e.into()),
        }
    }
}

impl From<augment::AugmentError> for Failure {
    fn from(e: augment::AugmentError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<report::ReportError> for Failure {
    fn from(e: report::ReportError) -> Self {
        Failure::Other(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result {
    cfg.write_into(dir).with_context(|| format!("writing config into {}", dir.display()))?;
    Ok(())
}

/// The backbone actually trained: the configured one, or the reference CNN
/// when offline mode leaves a pretrained backbone without weights.
fn resolve_backbone(cfg: &RunConfig) -> Result<BackboneName> {
    let name = cfg.backbone;
    if name == BackboneName::Reference {
        return Ok(name);
    }
    if cfg.models.offline {
        log::warn!("offline mode: {name} replaced by the reference CNN");
        return Ok(BackboneName::Reference);
    }
    let Some(cache) = &cfg.models.cache_dir else {
        return Err(Failure::Input(format!("backbone {name} needs models.cache_dir (or run with --offline)")));
    };
    let file = zoo::backbone_spec(name).weights_file(cache);
    require(&file, &format!("pretrained weights for {name}"))?;
    Ok(name)
}

pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let root = cfg.synthetic_root();
    let manifest = data::generate_synthetic(&cfg.synthetic_spec(), &root)?;
    fs::write(root.join(".config.toml"), cfg.to_toml()).context("writing synthetic config")?;
    println!("synthesised {} images under {}", manifest.len(), root.display());
    Ok(root)
}

pub fn prepare(cfg: &RunConfig, synthetic: bool) -> Result {
    let root = if synthetic {
        synth(cfg)?
    } else {
        cfg.data.root.clone().ok_or_else(|| Failure::Input("data.root is not set (or use --synthetic)".into()))?
    };
    if !root.is_dir() {
        return Err(Failure::Input(format!("data root {} is not a directory", root.display())));
    }
    let manifest = data::ingest_directory(&root, cfg.data.labeling)?;
    let backbone = resolve_backbone(cfg)?;
    let input = cfg.factory().spec(backbone).input_size;
    // Fails early on any image the segmenter cannot handle.
    ImageStore::load(&manifest, &cfg.preprocess_policy(input))?;
    let manifest = data::split_train_test(&manifest, cfg.data.train_fraction, cfg.data.seed, cfg.data.stratified)?;
    let plan = data::make_folds(&manifest, cfg.data.k, cfg.data.seed, cfg.data.stratified)?;
    let manifest = manifest.with_folds(&plan)?;
    let path = cfg.manifest_path();
    fs::create_dir_all(cfg.data_dir()).context("creating data directory")?;
    data::write_manifest(&manifest, &path)?;
    write_config(cfg, &cfg.data_dir())?;
    let n_train = manifest.ids_in(Split::Train).count();
    println!(
        "manifest {}: {} samples, {} train / {} test, {} folds",
        path.display(),
        manifest.len(),
        n_train,
        manifest.len() - n_train,
        plan.k
    );
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg.manifest_path();
    require(&path, "manifest (run `prepare` first)")?;
    Ok(data::read_manifest(&path, cfg.data.seed)?)
}

pub fn augment_preview(cfg: &RunConfig, n: usize) -> Result {
    if n == 0 {
        return Err(Failure::Input("--n must be at least 1".into()));
    }
    let manifest = load_manifest(cfg)?;
    let backbone = resolve_backbone(cfg)?;
    let input = cfg.factory().spec(backbone).input_size;
    let sample = &manifest.samples()[0];
    let store = ImageStore::load_ids(&manifest, &[sample.id.as_str()], &cfg.preprocess_policy(input))?;
    let source = store.get(&sample.id).expect("loaded sample");
    let policy = cfg.augmentation();
    let mut sampler = TransformSampler::new(policy, cfg.augment.seed)?;
    let mut tiles = Vec::with_capacity(n);
    let mut transforms = String::new();
    for _ in 0..n {
        let t = sampler.sample(input);
        tiles.push(augment::apply(source, &t, policy.fill_value)?);
        transforms.push_str(&serde_json::to_string(&t).context("serialising transform")?);
        transforms.push('\n');
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let dir = cfg.preview_dir();
    fs::create_dir_all(&dir).context("creating preview directory")?;
    let path = dir.join("augment_preview.png");
    augment::contact_sheet(&tiles, cols).save(&path).with_context(|| format!("writing {}", path.display()))?;
    fs::write(dir.join("augment_preview.jsonl"), transforms).context("writing transform list")?;
    write_config(cfg, &dir)?;
    println!("{} tiles of {} in {}", n, sample.id, path.display());
    Ok(())
}

struct Prepared {
    manifest: DatasetManifest,
    plan: FoldPlan,
    store: ImageStore,
    backbone: BackboneName,
    factory: ModelFactory,
}

fn load_training(cfg: &RunConfig) -> Result<Prepared> {
    let manifest = load_manifest(cfg)?;
    let backbone = resolve_backbone(cfg)?;
    let factory = cfg.factory();
    let input = factory.spec(backbone).input_size;
    let plan = manifest
        .fold_plan(cfg.data.stratified)
        .ok_or_else(|| Failure::Input(format!("manifest {} has no fold assignment", cfg.manifest_path().display())))?;
    let store = ImageStore::load(&manifest, &cfg.preprocess_policy(input))?;
    Ok(Prepared { manifest, plan, store, backbone, factory })
}

fn history_trend(run: &TrainingRun) -> String {
    match (run.history.first(), run.history.last()) {
        (Some(a), Some(b)) => format!("loss {:.4} -> {:.4}", a.train_loss, b.train_loss),
        _ => "no epochs".into(),
    }
}

pub fn crossval(cfg: &RunConfig) -> Result {
    let p = load_training(cfg)?;
    let layout = RunLayout::new(cfg.runs_dir());
    let data = TrainingData { manifest: &p.manifest, images: &p.store };
    let report = trainer::run_cross_validation(
        data,
        &p.factory,
        p.backbone,
        &p.plan,
        &cfg.augmentation(),
        &cfg.hyperparams(),
        Some(&layout),
    )?;
    write_config(cfg, &layout.backbone_dir(report.backbone))?;
    for run in &report.runs {
        println!("fold {}: {}, {}", run.fold_index, history_trend(run), run.final_val_accuracy());
    }
    print!("{}", report::emit_crossval_summary(&report));
    if !report.diverged_folds.is_empty() {
        return Err(Failure::Diverged(format!("folds {:?} diverged", report.diverged_folds)));
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result {
    let p = load_training(cfg)?;
    let layout = RunLayout::new(cfg.runs_dir());
    let data = TrainingData { manifest: &p.manifest, images: &p.store };
    let (run, _) = trainer::train_final(data, &p.factory, p.backbone, &cfg.augmentation(), &cfg.hyperparams(), Some(&layout))?;
    write_config(cfg, &layout.final_dir(run.backbone))?;
    println!("final model: {}, held-out accuracy {}", history_trend(&run), run.final_val_accuracy());
    Ok(())
}

/// Contents of `metrics.json` and `metrics_train.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub backbone: BackboneName,
    pub checkpoint: PathBuf,
    pub split: Split,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

fn default_checkpoint(cfg: &RunConfig, backbone: BackboneName) -> Result<PathBuf> {
    let layout = RunLayout::new(cfg.runs_dir());
    let final_model = layout.final_dir(backbone).join(MODEL_FILE);
    if final_model.is_file() {
        return Ok(final_model);
    }
    let crossval = layout.crossval_file(backbone);
    if crossval.is_file() {
        let report: CrossValReport = trainer::read_json(&crossval)?;
        if let Some(best) = report.best_fold() {
            let path = layout.fold_dir(backbone, best).join(MODEL_FILE);
            require(&path, "fold checkpoint")?;
            return Ok(path);
        }
    }
    Err(Failure::Missing(final_model, "checkpoint (run `train` or `crossval` first)".into()))
}

fn score_split(
    model: &zoo::ClassifierModel,
    manifest: &DatasetManifest,
    split: Split,
    cfg: &RunConfig,
) -> Result<(MetricsReport, zoo::PredictionBatch, Vec<Label>)> {
    let ids: Vec<&str> = manifest.ids_in(split).collect();
    if ids.is_empty() {
        return Err(Failure::Input(format!("the {} split is empty", split.as_str())));
    }
    let store = ImageStore::load_ids(manifest, &ids, &cfg.preprocess_policy(model.input_size()))?;
    let ids: Vec<String> = ids.into_iter().map(String::from).collect();
    let images: Vec<_> = ids.iter().map(|id| store.get(id).expect("loaded").clone()).collect();
    let labels: Vec<Label> = ids.iter().map(|id| manifest.sample(id).expect("listed").label).collect();
    let batch = zoo::predict(model, &ids, &images)?;
    let report = metrics::evaluate(&labels, &batch.predicted, &batch.scores).context("computing metrics")?;
    Ok((report, batch, labels))
}

pub fn evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result {
    let manifest = load_manifest(cfg)?;
    let path = match checkpoint {
        Some(p) => {
            require(p, "checkpoint")?;
            p.to_path_buf()
        }
        None => default_checkpoint(cfg, resolve_backbone(cfg)?)?,
    };
    let model = zoo::load_checkpoint(&path)?;
    let backbone = model.backbone.name;
    let dir = cfg.eval_dir(backbone);
    fs::create_dir_all(&dir).context("creating evaluation directory")?;
    for (split, file) in [(Split::Test, "metrics.json"), (Split::Train, "metrics_train.json")] {
        let (metrics, batch, labels) = score_split(&model, &manifest, split, cfg)?;
        let record = EvaluationRecord { backbone, checkpoint: path.clone(), split, metrics };
        trainer::write_json(&dir.join(file), &record)?;
        if split == Split::Test {
            write_predictions(&dir.join("predictions.csv"), &batch, &labels)?;
            println!("{} on {} test samples: accuracy {}, auc {}", backbone.display(), labels.len(), record.metrics.accuracy, record.metrics.auc);
        }
    }
    write_config(cfg, &dir)?;
    Ok(())
}

fn write_predictions(path: &Path, batch: &zoo::PredictionBatch, labels: &[Label]) -> Result {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["id", "label", "score", "predicted"]).context("writing predictions")?;
    for (i, id) in batch.ids.iter().enumerate() {
        let rec = [id.clone(), labels[i].to_string(), batch.scores[i].to_string(), batch.predicted[i].to_string()];
        w.write_record(&rec).context("writing predictions")?;
    }
    w.flush().context("writing predictions")?;
    Ok(())
}

const ALL_BACKBONES: [BackboneName; 5] = [
    BackboneName::Vgg16,
    BackboneName::Resnet50,
    BackboneName::Inceptionnet,
    BackboneName::Mobilenet,
    BackboneName::Reference,
];

pub fn report(cfg: &RunConfig) -> Result {
    let layout = RunLayout::new(cfg.runs_dir());
    let dir = cfg.reports_dir();
    fs::create_dir_all(&dir).context("creating reports directory")?;
    let mut found = false;
    let mut rows = Vec::new();
    for b in ALL_BACKBONES {
        let crossval = layout.crossval_file(b);
        if crossval.is_file() {
            found = true;
            let cv: CrossValReport = trainer::read_json(&crossval)?;
            for run in cv.runs.iter().filter(|r| !r.history.is_empty()) {
                report::emit_curves(run, &dir, &report::curve_stem(b.as_str(), run.fold_index))?;
            }
            let path = dir.join(format!("crossval_{}.txt", b.as_str()));
            fs::write(&path, report::emit_crossval_summary(&cv)).with_context(|| format!("writing {}", path.display()))?;
        }
        let eval = cfg.eval_dir(b);
        for (phase, file) in [(Phase::Training, "metrics_train.json"), (Phase::Testing, "metrics.json")] {
            let path = eval.join(file);
            if path.is_file() {
                found = true;
                let rec: EvaluationRecord = trainer::read_json(&path)?;
                rows.push(TableRow::from_report(b.display(), phase, &rec.metrics));
            }
        }
    }
    if !found {
        let b = resolve_backbone(cfg).unwrap_or(cfg.backbone);
        return Err(Failure::Missing(layout.crossval_file(b), "cross-validation results (run `crossval` first)".into()));
    }
    if !rows.is_empty() {
        for (format, ext) in [(TableFormat::Markdown, "md"), (TableFormat::Csv, "csv")] {
            let path = dir.join(format!("table1.{ext}"));
            fs::write(&path, report::emit_table(&rows, format)?).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    write_config(cfg, &dir)?;
    println!("reports written to {}", dir.display());
    Ok(())
}
