use std::path::Path;

use cxrbench::augment::AugmentationConfig;
use cxrbench::commands::{self, cmd_evaluate, cmd_prepare, cmd_report, cmd_train};
use cxrbench::config::{ExperimentConfig, ModelOverride};
use cxrbench::dataset::Label;
use cxrbench::evaluate::{read_confusion_csv, MetricValues};
use cxrbench::model_zoo::{build_baseline_cnn, Architecture, ArchitectureSpec};
use cxrbench::preprocess::{min_max_normalize, PreparedSet};
use cxrbench::synth::{synth_image, write_synthetic_dataset, SynthConfig};
use cxrbench::trainer::{run_experiment, train, RunContext, TrainConfig, TrainingData, HISTORY_FILE};
use cxrbench::Error;

fn tiny_set(size: usize, per_class: usize) -> PreparedSet {
    let mut planes = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class {
        for label in Label::ALL {
            planes.push(min_max_normalize(&synth_image(label, size, 5, i as u64)));
            labels.push(label);
        }
    }
    PreparedSet::from_planes(planes, labels, 3).unwrap()
}

fn tiny_data(size: usize) -> TrainingData {
    TrainingData {
        train: tiny_set(size, 4),
        validation: tiny_set(size, 3),
        augmentation: AugmentationConfig::default(),
    }
}

fn baseline(size: usize) -> ArchitectureSpec {
    let mut spec = ArchitectureSpec::default_for(Architecture::BaselineCnn);
    spec.input_size = size;
    spec
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 2,
        train_steps_per_epoch: 2,
        val_steps_per_epoch: 1,
        repetitions: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let spec = baseline(16);
    let mut model = build_baseline_cnn(&spec, 1).unwrap();
    let before = model.params().clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..quick_train()
    };
    let history = train(&mut model, &tiny_data(16), &cfg, 1e-4, 1, |_, _| Ok(())).unwrap();
    assert!(history.is_empty());
    for ((_, a), (_, b)) in before.iter().zip(model.params().iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let spec = baseline(16);
    let data = tiny_data(16);
    let run = |seed| {
        let mut model = build_baseline_cnn(&spec, seed).unwrap();
        train(&mut model, &data, &quick_train(), 1e-4, seed, |_, _| Ok(())).unwrap()
    };
    assert_eq!(run(3), run(3));
}

#[test]
fn repetitions_are_counted_and_averaged() {
    let spec = baseline(16);
    let result = run_experiment(&spec, &tiny_data(16), &quick_train(), &RunContext::in_memory("unused")).unwrap();
    assert_eq!(result.repetitions.len(), 3);
    let seeds: Vec<u64> = result.repetitions.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, [42, 43, 44]);
    for r in &result.repetitions {
        assert_eq!(r.history.len(), 2);
        assert_eq!(r.final_metrics.total, 6);
    }
    let raws: Vec<MetricValues> = result.repetitions.iter().map(|r| r.final_metrics.raw).collect();
    assert_eq!(result.mean_metrics, MetricValues::mean(&raws));
}

#[test]
fn mismatched_input_size_is_rejected() {
    let spec = baseline(16);
    let mut model = build_baseline_cnn(&spec, 1).unwrap();
    let err = train(&mut model, &tiny_data(24), &quick_train(), 0.0, 1, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn diverging_loss_aborts_with_diagnostics() {
    let spec = baseline(16);
    let mut model = build_baseline_cnn(&spec, 1).unwrap();
    let cfg = TrainConfig {
        lr_initial: 1e30,
        epochs: 5,
        ..quick_train()
    };
    let mut persisted = 0;
    let err = train(&mut model, &tiny_data(16), &cfg, 0.0, 1, |h, _| {
        persisted = h.len();
        Ok(())
    })
    .unwrap_err();
    match err {
        Error::NonFiniteLoss { epoch, lr, .. } => {
            assert_eq!(lr, 1e30);
            assert_eq!(persisted, epoch - 1);
        }
        other => panic!("unexpected error {other}"),
    }
}

fn smoke_config(data: &Path, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset_root: data.to_path_buf(),
        output_dir: out.to_path_buf(),
        architectures: vec!["BaselineCNN".into()],
        ..ExperimentConfig::default()
    };
    cfg.models.insert(
        "BaselineCNN".into(),
        ModelOverride {
            input_size: Some(16),
            ..ModelOverride::default()
        },
    );
    cfg.train = TrainConfig {
        repetitions: 2,
        ..quick_train()
    };
    cfg
}

#[test]
fn commands_fail_cleanly_on_missing_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic_dataset(
        &data,
        &SynthConfig {
            normal: 8,
            pneumonia: 12,
            size: 24,
            seed: 1,
        },
    )
    .unwrap();
    let cfg = smoke_config(&data, &tmp.path().join("out"));

    let missing_root = smoke_config(&tmp.path().join("nowhere"), &tmp.path().join("out2"));
    assert!(matches!(cmd_prepare(&missing_root), Err(Error::MissingRoot(_))));

    cmd_prepare(&cfg).unwrap();
    let (outcome, _) = cmd_evaluate(&cfg).unwrap();
    assert!(!outcome.is_success());
    assert!(outcome.failed[0].1.contains("BaselineCNN/rep0"), "{:?}", outcome.failed);

    assert!(cmd_train(&cfg).unwrap().is_success());
    let (outcome, summaries) = cmd_evaluate(&cfg).unwrap();
    assert!(outcome.is_success());
    let conf = cfg.output_dir.join(commands::EVALUATION_DIR).join("BaselineCNN/rep1").join(commands::CONFUSION_FILE);
    assert_eq!(read_confusion_csv(&conf).unwrap(), summaries[0].repetitions[1].confusion());

    let history = cfg.output_dir.join(commands::RUNS_DIR).join("BaselineCNN/rep0").join(HISTORY_FILE);
    std::fs::write(&history, "epoch,train_loss,train_acc,val_loss,val_acc,lr\n").unwrap();
    assert!(matches!(cmd_report(&cfg), Err(Error::EmptyHistory(_))));
}
