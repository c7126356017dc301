//! Confusion matrices and the five classification metrics.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::preprocess::PreparedSet;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub positive_class: Label,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fn_: u64, fp: u64, positive_class: Label) -> Self {
        Self {
            tp,
            tn,
            fp,
            fn_,
            positive_class,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// The same predictions counted with the other class as positive.
    pub fn with_swapped_positive(&self) -> Self {
        Self {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
            positive_class: self.positive_class.other(),
        }
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self {
            tp: self.tp * k,
            tn: self.tn * k,
            fp: self.fp * k,
            fn_: self.fn_ * k,
            positive_class: self.positive_class,
        }
    }
}

/// Sigmoid outputs to labels: Pneumonia iff `p >= threshold`.
pub fn labels_from_probabilities(probabilities: &[f32], threshold: f32) -> Vec<Label> {
    probabilities
        .iter()
        .map(|&p| if p >= threshold { Label::Pneumonia } else { Label::Normal })
        .collect()
}

/// Pneumonia probability for every sample of `set`, in order.
pub fn predict_probabilities(model: &Model, set: &PreparedSet, batch_size: usize) -> Vec<f32> {
    let batch_size = batch_size.max(1);
    let indices: Vec<usize> = (0..set.len()).collect();
    indices
        .chunks(batch_size)
        .flat_map(|chunk| model.predict_proba(&set.batch(chunk).inputs))
        .collect()
}

pub fn predict_labels(model: &Model, set: &PreparedSet, threshold: f32, batch_size: usize) -> Result<Vec<Label>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    Ok(labels_from_probabilities(&predict_probabilities(model, set, batch_size), threshold))
}

pub fn confusion_matrix(predicted: &[Label], actual: &[Label], positive_class: Label) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(Error::LengthMismatch {
            predicted: predicted.len(),
            actual: actual.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(0, 0, 0, 0, positive_class);
    for (&p, &a) in predicted.iter().zip(actual) {
        match (a == positive_class, p == positive_class) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fn_ += 1,
            (false, true) => cm.fp += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Sensitivity,
    Specificity,
    Precision,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Accuracy,
        Metric::Sensitivity,
        Metric::Specificity,
        Metric::Precision,
        Metric::F1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Precision => "precision",
            Metric::F1 => "f1",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Marks a metric whose denominator was zero; its value is reported as 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricFlag {
    pub metric: Metric,
    pub reason: String,
}

/// The five metrics as percentages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
}

impl MetricValues {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::Sensitivity => self.sensitivity,
            Metric::Specificity => self.specificity,
            Metric::Precision => self.precision,
            Metric::F1 => self.f1,
        }
    }

    fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::Accuracy => self.accuracy = v,
            Metric::Sensitivity => self.sensitivity = v,
            Metric::Specificity => self.specificity = v,
            Metric::Precision => self.precision = v,
            Metric::F1 => self.f1 = v,
        }
    }

    /// Arithmetic mean, metric by metric.
    pub fn mean(values: &[MetricValues]) -> MetricValues {
        let mut out = MetricValues::default();
        if values.is_empty() {
            return out;
        }
        for m in Metric::ALL {
            out.set(m, values.iter().map(|v| v.get(m)).sum::<f64>() / values.len() as f64);
        }
        out
    }

    pub fn rounded(&self) -> MetricValues {
        let mut out = *self;
        for m in Metric::ALL {
            out.set(m, round_half_up_2dp(self.get(m)));
        }
        out
    }
}

/// Counts, rounded percentages, unrounded percentages and zero-denominator
/// flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub positive_class: Label,
    pub tp: u64,
    pub tn: u64,
    pub fn_count: u64,
    pub fp: u64,
    pub total: u64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub raw: MetricValues,
    pub flags: Vec<MetricFlag>,
}

impl MetricsReport {
    pub fn values(&self) -> MetricValues {
        MetricValues {
            accuracy: self.accuracy,
            sensitivity: self.sensitivity,
            specificity: self.specificity,
            precision: self.precision,
            f1: self.f1,
        }
    }

    pub fn confusion(&self) -> ConfusionMatrix {
        ConfusionMatrix::new(self.tp, self.tn, self.fn_count, self.fp, self.positive_class)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::io::write_string(path, &(self.to_json_pretty()? + "\n"))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// `100 * num / den` rounded half-up to two decimals using integer
/// arithmetic, so ties are decided exactly.
pub fn percent_2dp(num: u64, den: u64) -> f64 {
    assert!(den > 0);
    let (num, den) = (num as u128, den as u128);
    let hundredths = (num * 20_000 + den) / (2 * den);
    hundredths as f64 / 100.0
}

pub fn round_half_up_2dp(x: f64) -> f64 {
    (x * 100.0 + 0.5 + 1e-9).floor() / 100.0
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let ConfusionMatrix { tp, tn, fp, fn_, .. } = *cm;
    let fractions = [
        (Metric::Accuracy, tp + tn, cm.total()),
        (Metric::Sensitivity, tp, tp + fn_),
        (Metric::Specificity, tn, tn + fp),
        (Metric::Precision, tp, tp + fp),
        (Metric::F1, 2 * tp, 2 * tp + fp + fn_),
    ];
    let mut rounded = MetricValues::default();
    let mut raw = MetricValues::default();
    let mut flags = Vec::new();
    for (metric, num, den) in fractions {
        if den == 0 {
            flags.push(MetricFlag {
                metric,
                reason: "zero denominator; reported as 0".into(),
            });
            continue;
        }
        rounded.set(metric, percent_2dp(num, den));
        raw.set(metric, 100.0 * num as f64 / den as f64);
    }
    MetricsReport {
        positive_class: cm.positive_class,
        tp,
        tn,
        fn_count: fn_,
        fp,
        total: cm.total(),
        accuracy: rounded.accuracy,
        sensitivity: rounded.sensitivity,
        specificity: rounded.specificity,
        precision: rounded.precision,
        f1: rounded.f1,
        raw,
        flags,
    }
}

/// Everything produced by evaluating a model on one split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub probabilities: Vec<f32>,
    pub predicted: Vec<Label>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

pub fn evaluate_model(
    model: &Model,
    set: &PreparedSet,
    threshold: f32,
    positive_class: Label,
    batch_size: usize,
) -> Result<Evaluation> {
    let predicted = predict_labels(model, set, threshold, batch_size)?;
    let probabilities = predict_probabilities(model, set, batch_size);
    let confusion = confusion_matrix(&predicted, set.labels(), positive_class)?;
    Ok(Evaluation {
        probabilities,
        predicted,
        metrics: compute_metrics(&confusion),
        confusion,
    })
}

/// Writes the 2x2 matrix: rows are actual classes, columns predicted,
/// positive class first.
pub fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix) -> Result<()> {
    let pos = cm.positive_class;
    let neg = pos.other();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["actual\\predicted", pos.as_str(), neg.as_str()])?;
    w.write_record([pos.as_str(), &cm.tp.to_string(), &cm.fn_.to_string()])?;
    w.write_record([neg.as_str(), &cm.fp.to_string(), &cm.tn.to_string()])?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::io::write_bytes(path, &bytes)
}

pub fn read_confusion_csv(path: &Path) -> Result<ConfusionMatrix> {
    let bad = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
    if rows.len() != 3 || rows.iter().any(|r| r.len() != 3) {
        return Err(bad("expected a 3x3 grid"));
    }
    let pos: Label = rows[0][1].parse().map_err(|_| bad("unknown class in header"))?;
    if rows[0][2].parse::<Label>().ok() != Some(pos.other())
        || rows[1][0].parse::<Label>().ok() != Some(pos)
        || rows[2][0].parse::<Label>().ok() != Some(pos.other())
    {
        return Err(bad("row/column classes out of order"));
    }
    let n = |s: &str| s.trim().parse::<u64>().map_err(|_| bad("non-integer count"));
    Ok(ConfusionMatrix {
        tp: n(&rows[1][1])?,
        fn_: n(&rows[1][2])?,
        fp: n(&rows[2][1])?,
        tn: n(&rows[2][2])?,
        positive_class: pos,
    })
}

/// One published results row: counts and the five printed percentages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedRow {
    pub model: &'static str,
    pub tp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub fp: u64,
    pub published: MetricValues,
}

impl PublishedRow {
    /// The published counts use Normal as the positive class.
    pub fn confusion(&self) -> ConfusionMatrix {
        ConfusionMatrix::new(self.tp, self.tn, self.fn_, self.fp, Label::Normal)
    }
}

const fn row(model: &'static str, c: [u64; 4], m: [f64; 5]) -> PublishedRow {
    PublishedRow {
        model,
        tp: c[0],
        tn: c[1],
        fn_: c[2],
        fp: c[3],
        published: MetricValues {
            accuracy: m[0],
            sensitivity: m[1],
            specificity: m[2],
            precision: m[3],
            f1: m[4],
        },
    }
}

/// Published validation counts and metrics for the nine networks.
pub const PUBLISHED_RESULTS: [PublishedRow; 9] = [
    row("CNN", [1634, 1277, 452, 95], [84.18, 78.33, 93.07, 94.05, 85.66]),
    row("VGG16", [1517, 1466, 263, 212], [86.26, 85.22, 87.36, 87.73, 86.46]),
    row("VGG19", [1390, 1582, 147, 339], [85.94, 90.43, 82.35, 80.39, 85.11]),
    row("Inception_V3", [1621, 1650, 79, 108], [94.59, 95.35, 93.85, 93.75, 94.54]),
    row("Xception", [1656, 1219, 510, 73], [83.14, 76.45, 94.34, 95.77, 85.03]),
    row("DensNet201", [1712, 1527, 202, 17], [93.66, 89.44, 98.89, 99.01, 93.98]),
    row("MobileNet_V2", [1696, 1634, 95, 33], [96.27, 94.61, 98.02, 98.06, 96.30]),
    row("Inception_Resnet_V2", [1705, 1618, 111, 24], [96.09, 93.88, 98.53, 98.61, 96.19]),
    row("Resnet50", [1703, 1638, 91, 26], [96.61, 94.92, 98.43, 98.49, 96.67]),
];

/// The one published cell that disagrees with its own counts
/// (1634 / 1729 = 94.51%, printed as 94.05).
pub const PUBLISHED_ERRATUM: (&str, Metric) = ("CNN", Metric::Precision);
