//! Training loop, learning-rate decay, histories and repeated experiments.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_stream, AugmentationConfig};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_model, MetricValues, MetricsReport, DEFAULT_THRESHOLD};
use crate::model_zoo::{build_model, save_checkpoint, Architecture, ArchitectureSpec};
use crate::nn::{Adam, Model};
use crate::preprocess::PreparedSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecayPolicy {
    /// Multiply by `decay_factor` after `plateau_patience` epochs without a
    /// validation-loss improvement.
    Plateau,
    /// Multiply by `decay_factor` once, after epoch `decay_epoch`.
    FixedStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub train_steps_per_epoch: usize,
    pub val_steps_per_epoch: usize,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_epsilon: f32,
    pub lr_initial: f32,
    pub lr_floor: f32,
    pub lr_decay_policy: LrDecayPolicy,
    pub decay_factor: f32,
    pub plateau_patience: usize,
    pub decay_epoch: usize,
    /// Overrides the architecture's L2 coefficient when set.
    pub l2_coefficient: Option<f32>,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 300,
            train_steps_per_epoch: 159,
            val_steps_per_epoch: 109,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-7,
            lr_initial: 1e-5,
            lr_floor: 1e-6,
            lr_decay_policy: LrDecayPolicy::Plateau,
            decay_factor: 0.1,
            plateau_patience: 10,
            decay_epoch: 150,
            l2_coefficient: None,
            repetitions: 3,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 || self.train_steps_per_epoch == 0 || self.val_steps_per_epoch == 0 {
            return fail("batch_size and steps per epoch must be positive");
        }
        if self.repetitions == 0 {
            return fail("repetitions must be positive");
        }
        let unit = |b: f32| b > 0.0 && b < 1.0;
        if !unit(self.adam_beta1) || !unit(self.adam_beta2) {
            return fail("Adam betas must lie in (0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return fail("adam_epsilon must be positive");
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_initial && self.lr_initial.is_finite()) {
            return fail("need 0 < lr_floor <= lr_initial");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail("decay_factor must lie in (0, 1]");
        }
        if self.plateau_patience == 0 {
            return fail("plateau_patience must be positive");
        }
        if let Some(l2) = self.l2_coefficient {
            if !(l2.is_finite() && l2 >= 0.0) {
                return fail("l2_coefficient must be >= 0");
            }
        }
        Ok(())
    }

    pub fn l2_for(&self, spec: &ArchitectureSpec) -> f32 {
        self.l2_coefficient.unwrap_or(spec.l2_coefficient)
    }

    /// Seed of repetition `r` (zero based).
    pub fn repetition_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

/// Mutable state of the learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrScheduleState {
    pub lr: f32,
    pub best_val_loss: f64,
    pub epochs_without_improvement: usize,
    pub epochs_completed: usize,
}

impl LrScheduleState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr_initial,
            best_val_loss: f64::INFINITY,
            epochs_without_improvement: 0,
            epochs_completed: 0,
        }
    }
}

/// Records one finished epoch and returns the learning rate for the next.
/// Never goes below `lr_floor`.
pub fn decay_learning_rate(state: &mut LrScheduleState, cfg: &TrainConfig, val_loss: f64) -> f32 {
    state.epochs_completed += 1;
    let reduce = |lr: f32| ((lr as f64) * cfg.decay_factor as f64).max(cfg.lr_floor as f64) as f32;
    match cfg.lr_decay_policy {
        LrDecayPolicy::Plateau => {
            if val_loss < state.best_val_loss {
                state.best_val_loss = val_loss;
                state.epochs_without_improvement = 0;
            } else {
                state.epochs_without_improvement += 1;
                if state.epochs_without_improvement >= cfg.plateau_patience {
                    state.lr = reduce(state.lr);
                    state.epochs_without_improvement = 0;
                }
            }
        }
        LrDecayPolicy::FixedStep => {
            state.best_val_loss = state.best_val_loss.min(val_loss);
            if state.epochs_completed == cfg.decay_epoch {
                state.lr = reduce(state.lr);
            }
        }
    }
    state.lr = state.lr.max(cfg.lr_floor);
    state.lr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "train_acc")]
    pub train_accuracy: f64,
    pub val_loss: f64,
    #[serde(rename = "val_acc")]
    pub val_accuracy: f64,
    #[serde(rename = "lr")]
    pub learning_rate: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Epoch record with the highest validation accuracy (earliest on ties).
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_accuracy >= r.val_accuracy => Some(b),
                _ => Some(r),
            })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"])?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, &self.to_csv()?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { records })
    }
}

/// Preprocessed training and validation sets at the model's input size.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub train: PreparedSet,
    pub validation: PreparedSet,
    pub augmentation: AugmentationConfig,
}

fn accuracy_count(probabilities: &[f32], targets: &[f32]) -> usize {
    probabilities
        .iter()
        .zip(targets)
        .filter(|(&p, &t)| (p >= DEFAULT_THRESHOLD) == (t >= 0.5))
        .count()
}

/// Loss (with L2 term) and accuracy over `steps` unaugmented batches that
/// walk the set in order, wrapping around.
pub fn validate_model(model: &Model, set: &PreparedSet, batch_size: usize, steps: usize, l2: f32) -> (f64, f64) {
    let n = set.len();
    let (mut loss, mut correct, mut seen) = (0.0, 0usize, 0usize);
    for step in 0..steps {
        let indices: Vec<usize> = (0..batch_size).map(|i| (step * batch_size + i) % n).collect();
        let batch = set.batch(&indices);
        let (l, probs) = model.evaluate_batch(&batch.inputs, &batch.labels, l2);
        loss += l;
        correct += accuracy_count(&probs, &batch.labels);
        seen += indices.len();
    }
    (loss / steps as f64, correct as f64 / seen as f64)
}

/// Trains `model` in place for `cfg.epochs` epochs. `on_epoch` runs after
/// each completed epoch with the history so far, so callers can persist
/// progress; an error from it stops training.
pub fn train(
    model: &mut Model,
    data: &TrainingData,
    cfg: &TrainConfig,
    l2: f32,
    seed: u64,
    mut on_epoch: impl FnMut(&TrainingHistory, &Model) -> Result<()>,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    let mut history = TrainingHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if data.validation.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let [h, w, c] = model.input_shape();
    let plane = data.train.plane(0);
    if (plane.height(), plane.width(), data.train.channels()) != (h, w, c) {
        return Err(Error::Config(format!(
            "model expects {h}x{w}x{c} inputs but data is {}x{}x{}",
            plane.height(),
            plane.width(),
            data.train.channels()
        )));
    }
    let mut stream = augment_stream(&data.train, &data.augmentation, cfg.batch_size, seed)?;
    let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let mut schedule = LrScheduleState::new(cfg);
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for step in 1..=cfg.train_steps_per_epoch {
            let batch = stream.next().expect("stream is endless");
            let out = model.loss_and_grads(&batch.inputs, &batch.labels, l2);
            if !out.total().is_finite() || !out.grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, lr });
            }
            adam.step(model.params_mut(), &out.grads, lr);
            loss_sum += out.total();
            correct += accuracy_count(&out.probabilities, &batch.labels);
            seen += batch.labels.len();
        }
        let (val_loss, val_accuracy) =
            validate_model(model, &data.validation, cfg.batch_size, cfg.val_steps_per_epoch, l2);
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: cfg.train_steps_per_epoch,
                lr,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / cfg.train_steps_per_epoch as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_loss,
            val_accuracy,
            learning_rate: lr,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4} lr {:.1e}",
            cfg.epochs,
            record.train_loss,
            record.train_accuracy,
            record.val_loss,
            record.val_accuracy,
            lr
        );
        history.records.push(record);
        decay_learning_rate(&mut schedule, cfg, val_loss);
        on_epoch(&history, model)?;
    }
    Ok(history)
}

/// SHA-256 of the value's JSON encoding, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

/// Where one experiment writes its artifacts, and what to evaluate with.
#[derive(Clone, Debug)]
pub struct RunContext {
    /// Root for `<architecture>/rep<k>/` directories; nothing is written
    /// when `None`.
    pub runs_dir: Option<PathBuf>,
    pub weights_dir: PathBuf,
    pub config_hash: String,
    pub threshold: f32,
    pub positive_class: Label,
}

impl RunContext {
    pub fn in_memory(weights_dir: impl Into<PathBuf>) -> Self {
        Self {
            runs_dir: None,
            weights_dir: weights_dir.into(),
            config_hash: String::new(),
            threshold: DEFAULT_THRESHOLD,
            positive_class: Label::Pneumonia,
        }
    }
}

pub fn repetition_dir(runs_dir: &Path, arch: Architecture, repetition: usize) -> PathBuf {
    runs_dir.join(arch.name()).join(format!("rep{repetition}"))
}

pub const HISTORY_FILE: &str = "history.csv";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const RUN_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub architecture: Architecture,
    pub repetition: usize,
    pub seed: u64,
    pub config_hash: String,
    pub started_unix: u64,
    pub wall_time_secs: f64,
    pub epochs_completed: usize,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub parameter_count: usize,
    pub trainable_parameter_count: usize,
    pub history: String,
    pub last_checkpoint: String,
    pub best_checkpoint: String,
    pub final_metrics: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub seed: u64,
    pub history: TrainingHistory,
    pub final_metrics: MetricsReport,
    pub model: Model,
    pub dir: Option<PathBuf>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub architecture: Architecture,
    pub repetitions: Vec<RepetitionResult>,
    pub mean_metrics: MetricValues,
}

impl RunResult {
    pub fn histories(&self) -> Vec<&TrainingHistory> {
        self.repetitions.iter().map(|r| &r.history).collect()
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Trains `cfg.repetitions` independent models with seeds `seed + r`,
/// evaluates each final model on the full validation set and averages the
/// metrics. A failing repetition aborts; artifacts already written stay.
pub fn run_experiment(
    spec: &ArchitectureSpec,
    data: &TrainingData,
    cfg: &TrainConfig,
    ctx: &RunContext,
) -> Result<RunResult> {
    cfg.validate()?;
    spec.validate()?;
    let l2 = cfg.l2_for(spec);
    let mut repetitions = Vec::with_capacity(cfg.repetitions);
    for r in 0..cfg.repetitions {
        let seed = cfg.repetition_seed(r);
        let started = Instant::now();
        let started_unix = now_unix();
        log::info!("{}: repetition {}/{} (seed {seed})", spec.name, r + 1, cfg.repetitions);
        let mut model = build_model(spec, &ctx.weights_dir, seed)?;
        let dir = ctx.runs_dir.as_ref().map(|d| repetition_dir(d, spec.name, r));
        if let Some(dir) = &dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut best_acc = f64::NEG_INFINITY;
        let history = train(&mut model, data, cfg, l2, seed, |history, model| {
            let Some(dir) = &dir else { return Ok(()) };
            history.write_csv(&dir.join(HISTORY_FILE))?;
            let last = history.last().expect("called after an epoch");
            let meta = [("epoch", last.epoch.to_string()), ("seed", seed.to_string())];
            if last.val_accuracy > best_acc {
                best_acc = last.val_accuracy;
                save_checkpoint(model, spec, &meta, &dir.join(BEST_CHECKPOINT))?;
            }
            save_checkpoint(model, spec, &meta, &dir.join(LAST_CHECKPOINT))
        })?;
        let eval = evaluate_model(
            &model,
            &data.validation,
            ctx.threshold,
            ctx.positive_class,
            cfg.batch_size,
        )?;
        let wall_time_secs = started.elapsed().as_secs_f64();
        if let Some(dir) = &dir {
            if history.is_empty() {
                history.write_csv(&dir.join(HISTORY_FILE))?;
                let meta = [("epoch", "0".to_string()), ("seed", seed.to_string())];
                save_checkpoint(&model, spec, &meta, &dir.join(LAST_CHECKPOINT))?;
                save_checkpoint(&model, spec, &meta, &dir.join(BEST_CHECKPOINT))?;
            }
            let best = history.best();
            let manifest = RunManifest {
                architecture: spec.name,
                repetition: r,
                seed,
                config_hash: ctx.config_hash.clone(),
                started_unix,
                wall_time_secs,
                epochs_completed: history.len(),
                best_epoch: best.map(|b| b.epoch),
                best_val_accuracy: best.map(|b| b.val_accuracy),
                parameter_count: model.parameter_count(),
                trainable_parameter_count: model.trainable_parameter_count(),
                history: HISTORY_FILE.into(),
                last_checkpoint: LAST_CHECKPOINT.into(),
                best_checkpoint: BEST_CHECKPOINT.into(),
                final_metrics: eval.metrics.clone(),
            };
            crate::io::write_json(&dir.join(RUN_MANIFEST), &manifest)?;
        }
        repetitions.push(RepetitionResult {
            repetition: r,
            seed,
            history,
            final_metrics: eval.metrics,
            model,
            dir,
            wall_time_secs,
        });
    }
    let values: Vec<MetricValues> = repetitions.iter().map(|r| r.final_metrics.raw).collect();
    Ok(RunResult {
        architecture: spec.name,
        mean_metrics: MetricValues::mean(&values),
        repetitions,
    })
}
