//! Curve plots with exact sidecars, metric tables and cross-validation
//! summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use serde::{Deserialize, Serialize};

use crate::metrics::{MetricValue, MetricsReport};
use crate::trainer::{CrossValReport, EpochRecord, TrainingRun};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("cannot report an empty history")]
    EmptyHistory,
    #[error("cannot render an empty table")]
    EmptyTable,
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed table: {0}")]
    Parse(String),
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| ReportError::Io { path: path.into(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesName {
    TrainAccuracy,
    ValAccuracy,
    TrainLoss,
    ValLoss,
}

impl SeriesName {
    pub const ALL: [SeriesName; 4] =
        [SeriesName::TrainAccuracy, SeriesName::ValAccuracy, SeriesName::TrainLoss, SeriesName::ValLoss];

    fn pick(self, r: &EpochRecord) -> f64 {
        match self {
            SeriesName::TrainAccuracy => r.train_accuracy,
            SeriesName::ValAccuracy => r.val_accuracy,
            SeriesName::TrainLoss => r.train_loss,
            SeriesName::ValLoss => r.val_loss,
        }
    }

    fn label(self) -> &'static str {
        match self {
            SeriesName::TrainAccuracy => "train accuracy",
            SeriesName::ValAccuracy => "validation accuracy",
            SeriesName::TrainLoss => "train loss",
            SeriesName::ValLoss => "validation loss",
        }
    }

    fn colour(self) -> [u8; 3] {
        match self {
            SeriesName::TrainAccuracy | SeriesName::TrainLoss => [31, 119, 180],
            SeriesName::ValAccuracy | SeriesName::ValLoss => [230, 120, 20],
        }
    }
}

/// One plotted line and its exact points; also the sidecar record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub name: SeriesName,
    pub points: Vec<(usize, f64)>,
    pub min: f64,
    pub max: f64,
}

impl CurveSeries {
    pub fn from_history(name: SeriesName, history: &[EpochRecord]) -> Self {
        let points: Vec<(usize, f64)> = history.iter().map(|r| (r.epoch, name.pick(r))).collect();
        let min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        Self { name, points, min, max }
    }
}

pub fn curve_series(history: &[EpochRecord]) -> Vec<CurveSeries> {
    SeriesName::ALL.iter().map(|&n| CurveSeries::from_history(n, history)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurveFiles {
    pub png: PathBuf,
    pub svg: PathBuf,
    pub sidecar: PathBuf,
}

const PANEL_W: f64 = 400.0;
const PANEL_H: f64 = 300.0;
const PAD: f64 = 40.0;

/// Axis mapping of one panel, in image pixels.
struct Panel {
    x0: f64,
    epochs: (usize, usize),
    range: (f64, f64),
}

impl Panel {
    fn new(index: usize, epochs: (usize, usize), range: (f64, f64)) -> Self {
        Self { x0: index as f64 * PANEL_W, epochs, range }
    }

    fn map(&self, epoch: usize, v: f64) -> (f32, f32) {
        let (e0, e1) = self.epochs;
        let fx = if e1 > e0 { (epoch - e0) as f64 / (e1 - e0) as f64 } else { 0.5 };
        let (lo, hi) = self.range;
        let fy = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let x = self.x0 + PAD + fx * (PANEL_W - 2.0 * PAD);
        let y = PANEL_H - PAD - fy * (PANEL_H - 2.0 * PAD);
        (x as f32, y as f32)
    }

    fn frame(&self) -> (f64, f64, f64, f64) {
        (self.x0 + PAD, PAD, PANEL_W - 2.0 * PAD, PANEL_H - 2.0 * PAD)
    }
}

fn panels(history: &[EpochRecord], series: &[CurveSeries]) -> [Panel; 2] {
    let epochs = (history[0].epoch, history[history.len() - 1].epoch);
    let loss_max = series
        .iter()
        .filter(|s| matches!(s.name, SeriesName::TrainLoss | SeriesName::ValLoss))
        .map(|s| s.max)
        .fold(0.0, f64::max);
    let loss_top = if loss_max > 0.0 { loss_max * 1.05 } else { 1.0 };
    [Panel::new(0, epochs, (0.0, 1.0)), Panel::new(1, epochs, (0.0, loss_top))]
}

fn panel_of(name: SeriesName) -> usize {
    match name {
        SeriesName::TrainAccuracy | SeriesName::ValAccuracy => 0,
        SeriesName::TrainLoss | SeriesName::ValLoss => 1,
    }
}

fn render_png(history: &[EpochRecord], series: &[CurveSeries]) -> RgbImage {
    let mut img = RgbImage::from_pixel((2.0 * PANEL_W) as u32, PANEL_H as u32, Rgb([255, 255, 255]));
    let panels = panels(history, series);
    let grid = Rgb([225, 225, 225]);
    for p in &panels {
        let (x, y, w, h) = p.frame();
        for i in 1..4 {
            let gy = (y + h * i as f64 / 4.0) as f32;
            draw_line_segment_mut(&mut img, (x as f32, gy), ((x + w) as f32, gy), grid);
        }
        draw_hollow_rect_mut(&mut img, Rect::at(x as i32, y as i32).of_size(w as u32 + 1, h as u32 + 1), Rgb([90, 90, 90]));
    }
    for s in series {
        let p = &panels[panel_of(s.name)];
        let colour = Rgb(s.name.colour());
        let pts: Vec<(f32, f32)> = s.points.iter().map(|&(e, v)| p.map(e, v)).collect();
        for w in pts.windows(2) {
            draw_line_segment_mut(&mut img, w[0], w[1], colour);
        }
        if matches!(s.name, SeriesName::ValAccuracy | SeriesName::ValLoss) || pts.len() == 1 {
            for &(x, y) in &pts {
                draw_filled_circle_mut(&mut img, (x.round() as i32, y.round() as i32), 2, colour);
            }
        }
    }
    img
}

fn render_svg(title: &str, history: &[EpochRecord], series: &[CurveSeries]) -> String {
    let panels = panels(history, series);
    let mut s = String::new();
    let (w, h) = (2.0 * PANEL_W, PANEL_H);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, xml_escape(title));
    for (p, label) in panels.iter().zip(["accuracy", "loss"]) {
        let (x, y, pw, ph) = p.frame();
        let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{pw}" height="{ph}" fill="none" stroke="#5a5a5a"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{label}</text>"#, x + pw / 2.0, y - 6.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">epoch</text>"#, x + pw / 2.0, y + ph + 28.0);
        for (v, anchor) in [(p.range.0, y + ph), (p.range.1, y)] {
            let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{:.2}</text>"#, x - 4.0, anchor + 4.0, v);
        }
        for e in [p.epochs.0, p.epochs.1] {
            let (ex, _) = p.map(e, p.range.0);
            let _ = writeln!(s, r#"<text x="{ex}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{e}</text>"#, y + ph + 14.0);
        }
    }
    for (i, series) in series.iter().enumerate() {
        let p = &panels[panel_of(series.name)];
        let [r, g, b] = series.name.colour();
        let dash = if matches!(series.name, SeriesName::ValAccuracy | SeriesName::ValLoss) { r#" stroke-dasharray="5,3""# } else { "" };
        let pts: Vec<String> = series.points.iter().map(|&(e, v)| p.map(e, v)).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="rgb({r},{g},{b})" stroke-width="1.5"{dash} points="{}"/>"#, pts.join(" "));
        let (lx, ly) = (p.x0 + PAD + 8.0, PAD + 14.0 + 14.0 * (i % 2) as f64);
        let _ = writeln!(s, r#"<text x="{lx}" y="{ly}" font-family="sans-serif" font-size="10" fill="rgb({r},{g},{b})">{}</text>"#, series.name.label());
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<stem>.png`, `<stem>.svg` and the `<stem>.jsonl` sidecar (one
/// series per line) into `out_dir`.
pub fn emit_curves(run: &TrainingRun, out_dir: &Path, stem: &str) -> Result<CurveFiles> {
    if run.history.is_empty() {
        return Err(ReportError::EmptyHistory);
    }
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io { path: out_dir.into(), source })?;
    let series = curve_series(&run.history);
    let files = CurveFiles {
        png: out_dir.join(format!("{stem}.png")),
        svg: out_dir.join(format!("{stem}.svg")),
        sidecar: out_dir.join(format!("{stem}.jsonl")),
    };
    let mut sidecar = String::new();
    for s in &series {
        sidecar.push_str(&serde_json::to_string(s).expect("series serialise"));
        sidecar.push('\n');
    }
    write_file(&files.sidecar, sidecar)?;
    let title = format!("{} fold {}", run.backbone.display(), run.fold_index);
    write_file(&files.svg, render_svg(&title, &run.history, &series))?;
    render_png(&run.history, &series)
        .save(&files.png)
        .map_err(|source| ReportError::Image { path: files.png.clone(), source })?;
    Ok(files)
}

pub fn curve_stem(backbone: &str, fold: usize) -> String {
    format!("curves_{backbone}_fold{fold}")
}

pub fn read_sidecar(path: &Path) -> Result<Vec<CurveSeries>> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io { path: path.into(), source })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ReportError::Parse(e.to_string())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Testing,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Training => "Training",
            Phase::Testing => "Testing",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub phase: Phase,
    pub auc: MetricValue,
    pub accuracy: MetricValue,
    pub recall: MetricValue,
    pub specificity: MetricValue,
    pub precision: MetricValue,
}

impl TableRow {
    pub fn from_report(model: &str, phase: Phase, r: &MetricsReport) -> Self {
        Self {
            model: model.to_string(),
            phase,
            auc: r.auc,
            accuracy: r.accuracy,
            recall: r.recall,
            specificity: r.specificity,
            precision: r.precision,
        }
    }

    fn values(&self) -> [MetricValue; 5] {
        [self.auc, self.accuracy, self.recall, self.specificity, self.precision]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Markdown,
    Csv,
}

const METRIC_COLUMNS: [&str; 5] = ["AUC", "Accuracy", "Recall", "Specificity", "Precision"];

/// Markdown rounds to two decimals; CSV keeps full precision so that
/// [`parse_table_csv`] inverts it exactly. Undefined cells read `NaN`.
pub fn emit_table(rows: &[TableRow], format: TableFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(ReportError::EmptyTable);
    }
    let mut out = String::new();
    match format {
        TableFormat::Markdown => {
            out.push_str("| Model | Phase | ");
            out.push_str(&METRIC_COLUMNS.join(" | "));
            out.push_str(" |\n|---|---|");
            out.push_str(&"---|".repeat(METRIC_COLUMNS.len()));
            out.push('\n');
            for r in rows {
                let cells: Vec<String> = r.values().iter().map(|v| v.render(2)).collect();
                let _ = writeln!(out, "| {} | {} | {} |", r.model, r.phase.as_str(), cells.join(" | "));
            }
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["Model", "Phase"];
            header.extend(METRIC_COLUMNS);
            w.write_record(&header).expect("in-memory write");
            for r in rows {
                let mut rec = vec![r.model.clone(), r.phase.as_str().to_string()];
                rec.extend(r.values().iter().map(|v| v.to_string()));
                w.write_record(&rec).expect("in-memory write");
            }
            out = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output");
        }
    }
    Ok(out)
}

fn parse_metric(s: &str) -> Result<MetricValue> {
    if s == "NaN" {
        return Ok(MetricValue::Undefined);
    }
    s.parse().map(MetricValue::Defined).map_err(|_| ReportError::Parse(format!("bad metric cell {s:?}")))
}

pub fn parse_table_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| ReportError::Parse(e.to_string()))?;
        if rec.len() != 7 {
            return Err(ReportError::Parse(format!("expected 7 cells, found {}", rec.len())));
        }
        let phase = match &rec[1] {
            "Training" => Phase::Training,
            "Testing" => Phase::Testing,
            p => return Err(ReportError::Parse(format!("unknown phase {p:?}"))),
        };
        rows.push(TableRow {
            model: rec[0].to_string(),
            phase,
            auc: parse_metric(&rec[2])?,
            accuracy: parse_metric(&rec[3])?,
            recall: parse_metric(&rec[4])?,
            specificity: parse_metric(&rec[5])?,
            precision: parse_metric(&rec[6])?,
        });
    }
    Ok(rows)
}

fn percent(v: &MetricValue) -> String {
    match v.value() {
        Some(x) => format!("{:.2}%", x * 100.0),
        None => "NaN".into(),
    }
}

/// One line per fold, then the mean and population standard deviation.
pub fn emit_crossval_summary(report: &CrossValReport) -> String {
    let mut out = format!("{} {}-fold cross-validation\n", report.backbone.display(), report.k);
    for (i, acc) in report.fold_val_accuracies.iter().enumerate() {
        let note = if report.diverged_folds.contains(&i) { " (diverged)" } else { "" };
        let _ = writeln!(out, "fold {i}: {}{note}", percent(acc));
    }
    let _ = writeln!(out, "mean {}", percent(&report.mean_accuracy));
    let _ = writeln!(out, "std {}", percent(&report.std_accuracy));
    out
}
