//! The command-line workflow as library functions: prepare, train,
//! evaluate, report and metrics-from-counts. Every file is written below
//! the configured output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{CheckpointChoice, ExperimentConfig};
use crate::dataset::{
    balance_by_oversampling, rebalance_by_oversampling, scan_dataset, stratified_split, Label, LabeledDataset,
    ScanSummary,
};
use crate::error::{Error, Result};
use crate::evaluate::{
    compute_metrics, evaluate_model, write_confusion_csv, ConfusionMatrix, MetricValues, MetricsReport,
    PUBLISHED_ERRATUM, PUBLISHED_RESULTS,
};
use crate::io::{write_json, write_string};
use crate::model_zoo::{load_checkpoint, Architecture};
use crate::preprocess::{PreparedSet, PreprocessConfig};
use crate::report::{
    mean_confusion, mean_history, plot_confusion, plot_curves, plot_overlay, CurveKind, ResultsRow, ResultsTable,
};
use crate::trainer::{
    config_hash, repetition_dir, run_experiment, RunContext, TrainingData, TrainingHistory, BEST_CHECKPOINT,
    HISTORY_FILE, LAST_CHECKPOINT,
};

pub const PREPARE_DIR: &str = "prepare";
pub const RUNS_DIR: &str = "runs";
pub const EVALUATION_DIR: &str = "evaluation";
pub const REPORT_DIR: &str = "report";
pub const FROZEN_CONFIG: &str = "config.toml";

pub const SCAN_FILE: &str = "scan.json";
pub const SPLIT_FILE: &str = "split.json";
pub const TRAIN_SET_FILE: &str = "train_set.json";
pub const VALIDATION_SET_FILE: &str = "validation_set.json";

pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Layout of the output directory.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.output_dir.clone(),
        }
    }

    pub fn prepare(&self) -> PathBuf {
        self.root.join(PREPARE_DIR)
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join(RUNS_DIR)
    }

    pub fn run(&self, arch: Architecture, repetition: usize) -> PathBuf {
        repetition_dir(&self.runs(), arch, repetition)
    }

    pub fn evaluation(&self, arch: Architecture) -> PathBuf {
        self.root.join(EVALUATION_DIR).join(arch.name())
    }

    pub fn report(&self) -> PathBuf {
        self.root.join(REPORT_DIR)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset_root: PathBuf,
    pub subset_fraction: Option<f64>,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub scanned: usize,
    pub skipped: usize,
    pub used: BTreeMap<Label, usize>,
    pub train: BTreeMap<Label, usize>,
    pub validation: BTreeMap<Label, usize>,
    pub train_balanced: BTreeMap<Label, usize>,
    pub validation_balanced: BTreeMap<Label, usize>,
    pub files: Vec<PathBuf>,
}

/// Scans, optionally subsets, splits and rebalances the dataset, writing
/// the manifests under `<output>/prepare/`. Reruns produce identical files.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<PrepareSummary> {
    cfg.validate()?;
    let layout = OutputLayout::new(cfg);
    let (scanned, scan) = scan_dataset(&cfg.dataset_root)?;
    let used = match cfg.data.subset_fraction {
        Some(f) if f < 1.0 => stratified_split(&scanned, f, crate::seed::derive(cfg.data.split_seed, &[0x5355_4253]))?.train,
        _ => scanned,
    };
    let splits = stratified_split(&used, cfg.data.train_fraction, cfg.data.split_seed)?;
    let train = rebalance_by_oversampling(
        &splits.train,
        &cfg.augmentation,
        cfg.data.oversample_copies,
        crate::seed::derive(cfg.data.split_seed, &[0x5452_4e42]),
    )?;
    let validation = if cfg.data.balance_validation {
        balance_by_oversampling(
            &splits.validation,
            &cfg.augmentation,
            crate::seed::derive(cfg.data.split_seed, &[0x5641_4c42]),
        )?
    } else {
        splits.validation.clone()
    };
    let dir = layout.prepare();
    let files = vec![
        dir.join(SCAN_FILE),
        dir.join(SPLIT_FILE),
        dir.join(TRAIN_SET_FILE),
        dir.join(VALIDATION_SET_FILE),
    ];
    write_json(&files[0], &scan)?;
    write_json(
        &files[1],
        &SplitManifest {
            dataset_root: cfg.dataset_root.clone(),
            subset_fraction: cfg.data.subset_fraction,
            train_fraction: cfg.data.train_fraction,
            split_seed: cfg.data.split_seed,
            train: splits.train.clone(),
            validation: splits.validation.clone(),
        },
    )?;
    write_json(&files[2], &train)?;
    write_json(&files[3], &validation)?;
    Ok(PrepareSummary {
        scanned: scan.total,
        skipped: scan.skipped.len(),
        used: used.class_counts().clone(),
        train: splits.train.class_counts().clone(),
        validation: splits.validation.class_counts().clone(),
        train_balanced: train.class_counts().clone(),
        validation_balanced: validation.class_counts().clone(),
        files,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{} not found; run `prepare` first",
            path.display()
        )));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn load_scan_summary(cfg: &ExperimentConfig) -> Result<ScanSummary> {
    read_json(&OutputLayout::new(cfg).prepare().join(SCAN_FILE))
}

pub fn load_split_manifest(cfg: &ExperimentConfig) -> Result<SplitManifest> {
    read_json(&OutputLayout::new(cfg).prepare().join(SPLIT_FILE))
}

/// The rebalanced training and (optionally balanced) validation sets.
pub fn load_prepared_sets(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let dir = OutputLayout::new(cfg).prepare();
    Ok((read_json(&dir.join(TRAIN_SET_FILE))?, read_json(&dir.join(VALIDATION_SET_FILE))?))
}

/// Decodes and preprocesses both sets at one input size.
pub fn build_training_data(
    train: &LabeledDataset,
    validation: &LabeledDataset,
    pre: &PreprocessConfig,
    cfg: &ExperimentConfig,
) -> Result<TrainingData> {
    Ok(TrainingData {
        train: PreparedSet::build(train, pre)?,
        validation: PreparedSet::build(validation, pre)?.with_input_scale(cfg.augmentation.rescale),
        augmentation: cfg.augmentation.clone(),
    })
}

/// Caches preprocessed data for the most recent input size.
struct DataCache<'a> {
    cfg: &'a ExperimentConfig,
    train: &'a LabeledDataset,
    validation: &'a LabeledDataset,
    current: Option<(usize, TrainingData)>,
}

impl<'a> DataCache<'a> {
    fn get(&mut self, size: usize) -> Result<&TrainingData> {
        if self.current.as_ref().map(|(s, _)| *s) != Some(size) {
            self.current = None;
            let pre = self.cfg.preprocess.at_size(size);
            log::info!("preprocessing {} + {} images at {size}px", self.train.len(), self.validation.len());
            let data = build_training_data(self.train, self.validation, &pre, self.cfg)?;
            self.current = Some((size, data));
        }
        Ok(&self.current.as_ref().expect("just filled").1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionSummary {
    pub repetition: usize,
    pub seed: u64,
    pub epochs: usize,
    pub wall_time_secs: f64,
    pub final_metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub architecture: Architecture,
    pub config_hash: String,
    pub repetitions: Vec<RepetitionSummary>,
    /// Arithmetic mean of the unrounded per-repetition percentages.
    pub mean_metrics: MetricValues,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandOutcome {
    pub completed: Vec<Architecture>,
    pub failed: Vec<(Architecture, String)>,
}

impl CommandOutcome {
    pub fn is_success(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Hash of everything that influences training results.
pub fn experiment_hash(cfg: &ExperimentConfig) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        data: &'a crate::config::DataConfig,
        preprocess: &'a crate::config::PreprocessOptions,
        augmentation: &'a crate::augment::AugmentationConfig,
        train: &'a crate::trainer::TrainConfig,
        models: &'a BTreeMap<String, crate::config::ModelOverride>,
    }
    config_hash(&Key {
        data: &cfg.data,
        preprocess: &cfg.preprocess,
        augmentation: &cfg.augmentation,
        train: &cfg.train,
        models: &cfg.models,
    })
}

/// Trains every configured architecture in turn. Failures are logged and
/// collected; the remaining architectures still run.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<CommandOutcome> {
    cfg.validate()?;
    let archs = cfg.architecture_list()?;
    let specs = archs
        .iter()
        .map(|&a| cfg.spec_for(a))
        .collect::<Result<Vec<_>>>()?;
    let (train, validation) = load_prepared_sets(cfg)?;
    let layout = OutputLayout::new(cfg);
    std::fs::create_dir_all(&layout.root)?;
    write_string(&layout.root.join(FROZEN_CONFIG), &cfg.to_toml_string()?)?;
    let ctx = RunContext {
        runs_dir: Some(layout.runs()),
        weights_dir: cfg.weights_dir(),
        config_hash: experiment_hash(cfg)?,
        threshold: cfg.evaluation.threshold,
        positive_class: cfg.evaluation.positive_class,
    };
    let mut cache = DataCache {
        cfg,
        train: &train,
        validation: &validation,
        current: None,
    };
    let mut outcome = CommandOutcome::default();
    for spec in &specs {
        let result = cache
            .get(spec.input_size)
            .and_then(|data| run_experiment(spec, data, &cfg.train, &ctx));
        match result {
            Ok(run) => {
                let summary = ExperimentSummary {
                    architecture: spec.name,
                    config_hash: ctx.config_hash.clone(),
                    repetitions: run
                        .repetitions
                        .iter()
                        .map(|r| RepetitionSummary {
                            repetition: r.repetition,
                            seed: r.seed,
                            epochs: r.history.len(),
                            wall_time_secs: r.wall_time_secs,
                            final_metrics: r.final_metrics.clone(),
                        })
                        .collect(),
                    mean_metrics: run.mean_metrics,
                };
                write_json(&layout.runs().join(spec.name.name()).join(SUMMARY_FILE), &summary)?;
                outcome.completed.push(spec.name);
            }
            Err(e) => {
                log::error!("{}: training failed: {e}", spec.name);
                outcome.failed.push((spec.name, e.to_string()));
            }
        }
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub architecture: Architecture,
    pub checkpoint: CheckpointChoice,
    pub repetitions: Vec<MetricsReport>,
    pub mean_metrics: MetricValues,
    pub mean_confusion: ConfusionMatrix,
}

fn checkpoint_path(layout: &OutputLayout, arch: Architecture, rep: usize, which: CheckpointChoice) -> PathBuf {
    layout.run(arch, rep).join(match which {
        CheckpointChoice::Last => LAST_CHECKPOINT,
        CheckpointChoice::Best => BEST_CHECKPOINT,
    })
}

fn evaluate_architecture(
    cfg: &ExperimentConfig,
    arch: Architecture,
    validation: &LabeledDataset,
    cache: &mut Option<(usize, PreparedSet)>,
) -> Result<EvaluationSummary> {
    let layout = OutputLayout::new(cfg);
    let which = cfg.evaluation.checkpoint;
    let mut reports = Vec::new();
    for rep in 0..cfg.train.repetitions {
        let path = checkpoint_path(&layout, arch, rep, which);
        if !path.is_file() {
            return Err(Error::MissingCheckpoint {
                run: format!("{}/rep{rep}", arch.name()),
                path,
            });
        }
        let (spec, model) = load_checkpoint(&path)?;
        if cache.as_ref().map(|(s, _)| *s) != Some(spec.input_size) {
            *cache = None;
            let pre = cfg.preprocess.at_size(spec.input_size);
            let set = PreparedSet::build(validation, &pre)?.with_input_scale(cfg.augmentation.rescale);
            *cache = Some((spec.input_size, set));
        }
        let set = &cache.as_ref().expect("filled").1;
        let eval = evaluate_model(
            &model,
            set,
            cfg.evaluation.threshold,
            cfg.evaluation.positive_class,
            cfg.evaluation.batch_size,
        )?;
        let dir = layout.evaluation(arch).join(format!("rep{rep}"));
        eval.metrics.write_json(&dir.join(METRICS_FILE))?;
        write_confusion_csv(&dir.join(CONFUSION_FILE), &eval.confusion)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "label", "probability", "predicted"])?;
        for ((sample, p), pred) in validation.samples().iter().zip(&eval.probabilities).zip(&eval.predicted) {
            w.write_record([
                sample.path.display().to_string(),
                sample.label.to_string(),
                format!("{p:.6}"),
                pred.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        crate::io::write_bytes(&dir.join(PREDICTIONS_FILE), &bytes)?;
        reports.push(eval.metrics);
    }
    let confusions: Vec<ConfusionMatrix> = reports.iter().map(MetricsReport::confusion).collect();
    let raws: Vec<MetricValues> = reports.iter().map(|r| r.raw).collect();
    let summary = EvaluationSummary {
        architecture: arch,
        checkpoint: which,
        mean_metrics: MetricValues::mean(&raws).rounded(),
        mean_confusion: mean_confusion(&confusions).expect("at least one repetition"),
        repetitions: reports,
    };
    write_json(&layout.evaluation(arch).join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Evaluates each repetition's checkpoint on the validation set and writes
/// metrics JSON, confusion CSV and predictions per repetition plus a mean
/// summary per architecture.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<(CommandOutcome, Vec<EvaluationSummary>)> {
    cfg.validate()?;
    let archs = cfg.architecture_list()?;
    let (_, validation) = load_prepared_sets(cfg)?;
    let mut cache = None;
    let mut outcome = CommandOutcome::default();
    let mut summaries = Vec::new();
    for arch in archs {
        match evaluate_architecture(cfg, arch, &validation, &mut cache) {
            Ok(s) => {
                outcome.completed.push(arch);
                summaries.push(s);
            }
            Err(e) => {
                log::error!("{arch}: evaluation failed: {e}");
                outcome.failed.push((arch, e.to_string()));
            }
        }
    }
    Ok((outcome, summaries))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub table: ResultsTable,
}

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_TXT: &str = "results.txt";

fn load_histories(layout: &OutputLayout, arch: Architecture, repetitions: usize) -> Result<Vec<TrainingHistory>> {
    let mut out = Vec::new();
    for rep in 0..repetitions {
        let path = layout.run(arch, rep).join(HISTORY_FILE);
        if path.is_file() {
            let h = TrainingHistory::read_csv(&path)?;
            if h.is_empty() {
                return Err(Error::EmptyHistory(format!("{} ({})", arch.name(), path.display())));
            }
            out.push(h);
        }
    }
    Ok(out)
}

/// Curves, confusion-matrix images, overlays and the results table under
/// `<output>/report/`. Architectures without artifacts are listed as
/// warnings; an empty history file is an error.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<ReportSummary> {
    cfg.validate()?;
    let layout = OutputLayout::new(cfg);
    let dir = layout.report();
    let mut summary = ReportSummary::default();
    let mut overlay = Vec::new();
    for arch in cfg.architecture_list()? {
        let histories = load_histories(&layout, arch, cfg.train.repetitions)?;
        if histories.is_empty() {
            summary.warnings.push(format!("{arch}: no training history found"));
        } else {
            if histories.len() < cfg.train.repetitions {
                summary.warnings.push(format!(
                    "{arch}: {} of {} repetitions have histories",
                    histories.len(),
                    cfg.train.repetitions
                ));
            }
            let mean = mean_history(&histories);
            for kind in [CurveKind::Accuracy, CurveKind::Loss] {
                let path = dir.join(arch.name()).join(format!("{}.png", kind.as_str()));
                let title = format!("{arch} {}", kind.as_str());
                plot_curves(&mean, kind, &title, &path, &cfg.report)?;
                summary.files.push(path);
            }
            overlay.push((arch.name().to_string(), mean));
        }
        let eval_path = layout.evaluation(arch).join(SUMMARY_FILE);
        if eval_path.is_file() {
            let eval: EvaluationSummary = serde_json::from_str(&std::fs::read_to_string(&eval_path)?)?;
            let path = dir.join(arch.name()).join("confusion.png");
            plot_confusion(&eval.mean_confusion, &format!("{arch} confusion matrix"), &path, &cfg.report)?;
            summary.files.push(path);
            summary
                .table
                .rows
                .push(ResultsRow::new(arch.name(), &eval.mean_confusion, &eval.mean_metrics));
        } else {
            summary.warnings.push(format!("{arch}: no evaluation summary found"));
        }
    }
    if overlay.is_empty() && summary.table.rows.is_empty() {
        return Err(Error::EmptyHistory("no architecture has training or evaluation artifacts".into()));
    }
    if !overlay.is_empty() {
        for kind in [CurveKind::Accuracy, CurveKind::Loss] {
            let path = dir.join(format!("overlay_{}.png", kind.as_str()));
            plot_overlay(&overlay, kind, &path, &cfg.report)?;
            summary.files.push(path);
        }
    }
    let csv_path = dir.join(RESULTS_CSV);
    write_string(&csv_path, &summary.table.to_csv()?)?;
    let mut text = summary.table.render_text();
    if !summary.warnings.is_empty() {
        text.push_str("\nWarnings:\n");
        for w in &summary.warnings {
            text.push_str(&format!("  - {w}\n"));
        }
    }
    let txt_path = dir.join(RESULTS_TXT);
    write_string(&txt_path, &text)?;
    summary.files.push(csv_path);
    summary.files.push(txt_path);
    Ok(summary)
}

/// Metrics straight from confusion counts.
pub fn metrics_from_counts(tp: u64, tn: u64, fn_: u64, fp: u64, positive_class: Label) -> MetricsReport {
    compute_metrics(&ConfusionMatrix::new(tp, tn, fn_, fp, positive_class))
}

/// One recomputed cell of the published table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenCell {
    pub model: String,
    pub metric: crate::evaluate::Metric,
    pub published: f64,
    pub computed: f64,
    pub difference: f64,
    pub erratum: bool,
}

/// Recomputes every published metric cell from its counts.
pub fn published_table_check() -> (ResultsTable, Vec<GoldenCell>) {
    let mut table = ResultsTable::default();
    let mut cells = Vec::new();
    for row in &PUBLISHED_RESULTS {
        let report = compute_metrics(&row.confusion());
        table.rows.push(ResultsRow::new(row.model, &row.confusion(), &report.values()));
        for metric in crate::evaluate::Metric::ALL {
            let (published, computed) = (row.published.get(metric), report.values().get(metric));
            cells.push(GoldenCell {
                model: row.model.to_string(),
                metric,
                published,
                computed,
                difference: computed - published,
                erratum: (row.model, metric) == PUBLISHED_ERRATUM,
            });
        }
    }
    (table, cells)
}
