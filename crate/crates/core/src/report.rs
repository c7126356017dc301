//! Learning-curve and confusion-matrix images plus the results table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ReportConfig;
use crate::error::{Error, Result};
use crate::evaluate::{round_half_up_2dp, ConfusionMatrix, MetricValues, PublishedRow};
use crate::trainer::TrainingHistory;

/// Environment variable naming a TrueType font for plot text.
pub const FONT_ENV: &str = "CXRBENCH_FONT";

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

static FONT_READY: OnceLock<bool> = OnceLock::new();

fn font_candidates(explicit: Option<&Path>) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = explicit.map(Path::to_path_buf).into_iter().collect();
    if let Some(p) = std::env::var_os(FONT_ENV).filter(|v| !v.is_empty()) {
        out.push(PathBuf::from(p));
    }
    out.extend(FONT_CANDIDATES.iter().map(PathBuf::from));
    out
}

/// Registers the first loadable font as "sans-serif". Returns whether
/// text can be drawn; without a font, plots are rendered without labels.
/// Only the first call has an effect.
pub fn init_fonts(explicit: Option<&Path>) -> bool {
    *FONT_READY.get_or_init(|| {
        for path in font_candidates(explicit) {
            let Ok(bytes) = std::fs::read(&path) else { continue };
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                log::debug!("plot font: {}", path.display());
                return true;
            }
        }
        log::warn!("no usable TrueType font found (set {FONT_ENV}); plots will have no text");
        false
    })
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveKind {
    Accuracy,
    Loss,
}

impl CurveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveKind::Accuracy => "accuracy",
            CurveKind::Loss => "loss",
        }
    }

    fn title(self) -> &'static str {
        match self {
            CurveKind::Accuracy => "Accuracy",
            CurveKind::Loss => "Loss",
        }
    }
}

/// One named line.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Epoch-wise mean over repetitions, truncated to the shortest history.
pub fn mean_history(histories: &[TrainingHistory]) -> TrainingHistory {
    let n = histories.iter().map(TrainingHistory::len).min().unwrap_or(0);
    let k = histories.len() as f64;
    let records = (0..n)
        .map(|i| {
            let mut r = histories[0].records[i].clone();
            let mean = |f: &dyn Fn(&crate::trainer::EpochRecord) -> f64| {
                histories.iter().map(|h| f(&h.records[i])).sum::<f64>() / k
            };
            r.train_loss = mean(&|r| r.train_loss);
            r.train_accuracy = mean(&|r| r.train_accuracy);
            r.val_loss = mean(&|r| r.val_loss);
            r.val_accuracy = mean(&|r| r.val_accuracy);
            r
        })
        .collect();
    TrainingHistory { records }
}

pub fn curve_series(history: &TrainingHistory, kind: CurveKind) -> [Series; 2] {
    let pick = |train: bool| -> Vec<(f64, f64)> {
        history
            .records
            .iter()
            .map(|r| {
                let y = match (kind, train) {
                    (CurveKind::Accuracy, true) => r.train_accuracy,
                    (CurveKind::Accuracy, false) => r.val_accuracy,
                    (CurveKind::Loss, true) => r.train_loss,
                    (CurveKind::Loss, false) => r.val_loss,
                };
                (r.epoch as f64, y)
            })
            .collect()
    };
    [
        Series {
            name: "train".into(),
            points: pick(true),
        },
        Series {
            name: "validation".into(),
            points: pick(false),
        },
    ]
}

/// Line chart of the given series with epoch on the x axis.
pub fn plot_series(path: &Path, title: &str, kind: CurveKind, series: &[Series], cfg: &ReportConfig) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::EmptyHistory(title.to_string()));
    }
    ensure_parent(path)?;
    let text = init_fonts(cfg.font.as_deref());
    let max_epoch = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(1.0f64, f64::max)
        .max(2.0);
    let y_max = match kind {
        CurveKind::Accuracy => 1.0,
        CurveKind::Loss => {
            let m = series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.1))
                .filter(|v| v.is_finite())
                .fold(0.0f64, f64::max);
            (m * 1.05).max(1e-3)
        }
    };
    let root = BitMapBackend::new(path, (cfg.width, cfg.height)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if text {
        builder
            .caption(title, ("sans-serif", 26))
            .x_label_area_size(48)
            .y_label_area_size(64);
    }
    let mut chart = builder
        .build_cartesian_2d(1.0..max_epoch, 0.0..y_max)
        .map_err(plot_err)?;
    if text {
        chart
            .configure_mesh()
            .x_desc("Epoch")
            .y_desc(kind.title())
            .label_style(("sans-serif", 16))
            .draw()
            .map_err(plot_err)?;
    } else {
        chart
            .plotting_area()
            .draw(&Rectangle::new([(1.0, 0.0), (max_epoch, y_max)], BLACK))
            .map_err(plot_err)?;
    }
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let drawn = chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?;
        if text {
            drawn
                .label(s.name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .position(match kind {
                CurveKind::Accuracy => SeriesLabelPosition::LowerRight,
                CurveKind::Loss => SeriesLabelPosition::UpperRight,
            })
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .label_font(("sans-serif", 16))
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Train and validation curves of one (mean) history.
pub fn plot_curves(history: &TrainingHistory, kind: CurveKind, title: &str, path: &Path, cfg: &ReportConfig) -> Result<()> {
    if history.is_empty() {
        return Err(Error::EmptyHistory(title.to_string()));
    }
    plot_series(path, title, kind, &curve_series(history, kind), cfg)
}

/// Validation curves of several architectures on one chart.
pub fn plot_overlay(
    histories: &[(String, TrainingHistory)],
    kind: CurveKind,
    path: &Path,
    cfg: &ReportConfig,
) -> Result<()> {
    let series: Vec<Series> = histories
        .iter()
        .filter(|(_, h)| !h.is_empty())
        .map(|(name, h)| Series {
            name: name.clone(),
            points: curve_series(h, kind)[1].points.clone(),
        })
        .collect();
    if series.is_empty() {
        return Err(Error::EmptyHistory("overlay".into()));
    }
    let title = format!("Validation {} by architecture", kind.as_str());
    plot_series(path, &title, kind, &series, cfg)
}

/// 2x2 heatmap: rows actual, columns predicted, positive class first.
pub fn plot_confusion(cm: &ConfusionMatrix, title: &str, path: &Path, cfg: &ReportConfig) -> Result<()> {
    ensure_parent(path)?;
    let text = init_fonts(cfg.font.as_deref());
    let side = cfg.height.min(cfg.width).max(200);
    let root = BitMapBackend::new(path, (side, side)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder
            .caption(title, ("sans-serif", 22))
            .x_label_area_size(56)
            .y_label_area_size(96);
    }
    let mut chart = builder.build_cartesian_2d(0.0..2.0, 0.0..2.0).map_err(plot_err)?;
    let pos = cm.positive_class;
    let classes = [pos, pos.other()];
    // cells[row][col]: row = actual, col = predicted
    let cells = [[cm.tp, cm.fn_], [cm.fp, cm.tn]];
    let max = cells.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for (r, row) in cells.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let shade = v as f64 / max;
            let color = RGBColor(
                (255.0 - 200.0 * shade) as u8,
                (255.0 - 150.0 * shade) as u8,
                255,
            );
            let y0 = 1.0 - r as f64;
            chart
                .draw_series(std::iter::once(Rectangle::new(
                    [(c as f64, y0), (c as f64 + 1.0, y0 + 1.0)],
                    color.filled(),
                )))
                .map_err(plot_err)?;
            if text {
                let ink = if shade > 0.6 { WHITE } else { BLACK };
                let style = ("sans-serif", 28).into_font().color(&ink).pos(plotters::style::text_anchor::Pos::new(
                    plotters::style::text_anchor::HPos::Center,
                    plotters::style::text_anchor::VPos::Center,
                ));
                chart
                    .draw_series(std::iter::once(Text::new(
                        v.to_string(),
                        (c as f64 + 0.5, y0 + 0.5),
                        style,
                    )))
                    .map_err(plot_err)?;
            }
        }
    }
    if text {
        let names = classes.map(|l| l.as_str().to_string());
        let (xn, yn) = (names.clone(), names);
        chart
            .configure_mesh()
            .disable_mesh()
            .x_labels(2)
            .y_labels(2)
            .x_desc("Predicted")
            .y_desc("Actual")
            .x_label_formatter(&move |x: &f64| {
                let i = x.floor() as usize;
                if (*x - i as f64 - 0.5).abs() < 0.26 && i < 2 {
                    xn[i].clone()
                } else {
                    String::new()
                }
            })
            .y_label_formatter(&move |y: &f64| {
                let i = y.floor() as usize;
                if (*y - i as f64 - 0.5).abs() < 0.26 && i < 2 {
                    yn[1 - i].clone()
                } else {
                    String::new()
                }
            })
            .label_style(("sans-serif", 18))
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One results-table row, columns in published order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    #[serde(rename = "Model")]
    pub model: String,
    #[serde(rename = "TP")]
    pub tp: u64,
    #[serde(rename = "TN")]
    pub tn: u64,
    #[serde(rename = "FN")]
    pub fn_: u64,
    #[serde(rename = "FP")]
    pub fp: u64,
    #[serde(rename = "Accuracy")]
    pub accuracy: f64,
    #[serde(rename = "Sensitivity")]
    pub sensitivity: f64,
    #[serde(rename = "Specificity")]
    pub specificity: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "F1 score")]
    pub f1: f64,
}

impl ResultsRow {
    /// Metrics are stored rounded to two decimals.
    pub fn new(model: impl Into<String>, cm: &ConfusionMatrix, metrics: &MetricValues) -> Self {
        let m = metrics.rounded();
        Self {
            model: model.into(),
            tp: cm.tp,
            tn: cm.tn,
            fn_: cm.fn_,
            fp: cm.fp,
            accuracy: m.accuracy,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            precision: m.precision,
            f1: m.f1,
        }
    }

    pub fn from_published(row: &PublishedRow) -> Self {
        Self::new(row.model, &row.confusion(), &row.published)
    }
}

const HEADER: [&str; 10] = [
    "Model",
    "TP",
    "TN",
    "FN",
    "FP",
    "Accuracy",
    "Sensitivity",
    "Specificity",
    "Precision",
    "F1 score",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultsRow>,
}

impl ResultsTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.tp.to_string(),
                r.tn.to_string(),
                r.fn_.to_string(),
                r.fp.to_string(),
                format!("{:.2}", r.accuracy),
                format!("{:.2}", r.sensitivity),
                format!("{:.2}", r.specificity),
                format!("{:.2}", r.precision),
                format!("{:.2}", r.f1),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != HEADER {
            return Err(Error::Config(format!("unexpected results header {header:?}")));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<ResultsRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Fixed-width text with the same columns as the CSV.
    pub fn render_text(&self) -> String {
        let cells: Vec<[String; 10]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    r.tp.to_string(),
                    r.tn.to_string(),
                    r.fn_.to_string(),
                    r.fp.to_string(),
                    format!("{:.2}", r.accuracy),
                    format!("{:.2}", r.sensitivity),
                    format!("{:.2}", r.specificity),
                    format!("{:.2}", r.precision),
                    format!("{:.2}", r.f1),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..10)
            .map(|c| cells.iter().map(|row| row[c].len()).chain([HEADER[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |items: &[&str]| -> String {
            let mut s = String::new();
            for (c, item) in items.iter().enumerate() {
                if c == 0 {
                    let _ = write!(s, "{:<w$}", item, w = widths[c]);
                } else {
                    let _ = write!(s, "  {:>w$}", item, w = widths[c]);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = line(&HEADER);
        out.push('\n');
        out.push_str(&"-".repeat(out.trim_end().len()));
        out.push('\n');
        for row in &cells {
            let refs: Vec<&str> = row.iter().map(String::as_str).collect();
            out.push_str(&line(&refs));
            out.push('\n');
        }
        out
    }

    pub fn published() -> Self {
        Self {
            rows: crate::evaluate::PUBLISHED_RESULTS.iter().map(ResultsRow::from_published).collect(),
        }
    }
}

/// Mean confusion counts over repetitions, rounded to whole samples.
pub fn mean_confusion(matrices: &[ConfusionMatrix]) -> Option<ConfusionMatrix> {
    let first = matrices.first()?;
    let k = matrices.len() as f64;
    let mean = |f: fn(&ConfusionMatrix) -> u64| -> u64 {
        round_half_up_2dp(matrices.iter().map(|m| f(m) as f64).sum::<f64>() / k).round() as u64
    };
    Some(ConfusionMatrix::new(
        mean(|m| m.tp),
        mean(|m| m.tn),
        mean(|m| m.fn_),
        mean(|m| m.fp),
        first.positive_class,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_table_round_trips_through_csv() {
        let t = ResultsTable::published();
        assert_eq!(ResultsTable::from_csv(&t.to_csv().unwrap()).unwrap(), t);
    }

    #[test]
    fn text_table_has_header_and_one_line_per_row() {
        let t = ResultsTable::published();
        let text = t.render_text();
        assert_eq!(text.lines().count(), 2 + 9);
        assert!(text.lines().next().unwrap().starts_with("Model"));
        assert!(text.contains("96.61"));
    }
}
