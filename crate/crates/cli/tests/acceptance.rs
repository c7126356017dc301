//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line each; exits nonzero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cxrbench::augment::{
    apply_transform, augment_stream, flip_horizontal, sample_transform, AugmentationConfig, FillMode,
    TransformDraw,
};
use cxrbench::commands::{self, ExperimentSummary};
use cxrbench::config::{ExperimentConfig, ModelOverride};
use cxrbench::dataset::{rebalance_by_oversampling, ImageSample, Label, LabeledDataset};
use cxrbench::evaluate::{
    compute_metrics, read_confusion_csv, ConfusionMatrix, Metric, MetricsReport, PUBLISHED_RESULTS,
};
use cxrbench::model_zoo::{
    build_baseline_cnn, build_finetuned, read_checkpoint_spec, write_synthetic_weights, Architecture,
    ArchitectureSpec,
};
use cxrbench::nn::optim::Adam;
use cxrbench::plane::Plane;
use cxrbench::preprocess::{clahe, min_max_normalize, PreparedSet};
use cxrbench::synth::{synth_image, write_synthetic_dataset, SynthConfig};
use cxrbench::tensor::Tensor;
use cxrbench::trainer::{
    train, LrDecayPolicy, RunManifest, TrainConfig, TrainingData, TrainingHistory, BEST_CHECKPOINT,
    HISTORY_FILE, LAST_CHECKPOINT, RUN_MANIFEST,
};

type Check = fn() -> Result<String>;

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .is_test(true)
        .try_init();
    let criteria: [(u32, &str, Check); 11] = [
        (1, "published metrics golden suite", c01_golden_table),
        (2, "published confusion counts consistency", c02_count_consistency),
        (3, "min-max normalization properties", c03_normalization),
        (4, "CLAHE properties", c04_clahe),
        (5, "augmentation properties", c05_augmentation),
        (6, "minority oversampling", c06_oversampling),
        (7, "desk-scale training sanity", c07_training_sanity),
        (8, "head gradient check", c08_gradient_check),
        (9, "freeze contract", c09_freeze_contract),
        (10, "desk-scale substitute run", c10_desk_scale_run),
        (11, "CLI round trip", c11_cli_round_trip),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    let mut lines = Vec::new();
    for (id, name, check) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(anyhow!("panicked: {}", panic_text(&p))));
        let secs = t.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(detail) => format!("PASS  criterion {id:>2}  {name} ({secs:.1}s): {detail}"),
            Err(e) => {
                failed += 1;
                format!("FAIL  criterion {id:>2}  {name} ({secs:.1}s): {e:#}")
            }
        };
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "non-string panic".into())
}

// Published results, transcribed from the source table. The Xception F1
// cell is printed without its decimal point ("8503").
const GOLDEN: &str = "\
CNN	1634	1277	452	95	84.18	78.33	93.07	94.05	85.66
VGG16	1517	1466	263	212	86.26	85.22	87.36	87.73	86.46
VGG19	1390	1582	147	339	85.94	90.43	82.35	80.39	85.11
Inception_V3	1621	1650	79	108	94.59	95.35	93.85	93.75	94.54
Xception	1656	1219	510	73	83.14	76.45	94.34	95.77	85.03
DensNet201	1712	1527	202	17	93.66	89.44	98.89	99.01	93.98
MobileNet_V2	1696	1634	95	33	96.27	94.61	98.02	98.06	96.30
Inception_Resnet_V2	1705	1618	111	24	96.09	93.88	98.53	98.61	96.19
Resnet50	1703	1638	91	26	96.61	94.92	98.43	98.49	96.67";

struct GoldenRow {
    model: String,
    counts: [u64; 4],
    metrics: [f64; 5],
}

fn golden_rows() -> Vec<GoldenRow> {
    GOLDEN
        .lines()
        .map(|line| {
            let cells: Vec<&str> = line.split('\t').collect();
            assert_eq!(cells.len(), 10, "malformed golden row {line:?}");
            GoldenRow {
                model: cells[0].to_string(),
                counts: std::array::from_fn(|i| cells[1 + i].parse().unwrap()),
                metrics: std::array::from_fn(|i| cells[5 + i].parse().unwrap()),
            }
        })
        .collect()
}

const METRIC_ORDER: [Metric; 5] = [
    Metric::Accuracy,
    Metric::Sensitivity,
    Metric::Specificity,
    Metric::Precision,
    Metric::F1,
];

fn c01_golden_table() -> Result<String> {
    let t = Instant::now();
    let mut exclusions = Vec::new();
    let mut worst = 0.0f64;
    let rows = golden_rows();
    for row in &rows {
        let [tp, tn, fn_, fp] = row.counts;
        let report = compute_metrics(&ConfusionMatrix::new(tp, tn, fn_, fp, Label::Normal));
        for (metric, &published) in METRIC_ORDER.iter().zip(&row.metrics) {
            let computed = report.values().get(*metric);
            let diff = (computed - published).abs();
            if diff > 0.15 + 1e-9 {
                exclusions.push((row.model.clone(), *metric, published, computed));
            } else {
                worst = worst.max(diff);
            }
        }
    }
    let elapsed = t.elapsed().as_secs_f64();
    ensure!(
        exclusions.len() == 1,
        "expected exactly one cell outside tolerance, got {exclusions:?}"
    );
    let (model, metric, published, computed) = &exclusions[0];
    ensure!(
        model == "CNN" && *metric == Metric::Precision && *published == 94.05 && *computed == 94.51,
        "unexpected exclusion {exclusions:?}"
    );
    ensure!(elapsed < 1.0, "golden suite took {elapsed:.3}s");
    ensure!(rows.len() == PUBLISHED_RESULTS.len(), "library fixture has {} rows", PUBLISHED_RESULTS.len());
    for (row, lib) in rows.iter().zip(&PUBLISHED_RESULTS) {
        let c = lib.confusion();
        ensure!(
            row.model == lib.model && row.counts == [c.tp, c.tn, c.fn_, c.fp],
            "library fixture differs for {}",
            row.model
        );
        for (metric, &v) in METRIC_ORDER.iter().zip(&row.metrics) {
            ensure!(lib.published.get(*metric) == v, "library fixture {} {metric:?}", row.model);
        }
    }
    Ok(format!(
        "44 cells within 0.15 (max deviation {worst:.2}), excluded CNN precision {published:.2} vs {computed:.2}, {:.1} ms",
        elapsed * 1e3
    ))
}

fn c02_count_consistency() -> Result<String> {
    for row in golden_rows() {
        let [tp, tn, fn_, fp] = row.counts;
        ensure!(tp + tn + fn_ + fp == 3458, "{}: row sums to {}", row.model, tp + tn + fn_ + fp);
        // The published columns pair TP with FP and TN with FN per class.
        ensure!(tp + fp == 1729, "{}: TP+FP = {}", row.model, tp + fp);
        ensure!(tn + fn_ == 1729, "{}: TN+FN = {}", row.model, tn + fn_);
    }
    Ok("9 rows sum to 3458 with class totals 1729/1729".into())
}

fn plane_strategy(values: impl Strategy<Value = f32> + Clone) -> impl Strategy<Value = Plane> {
    (1usize..24, 1usize..24).prop_flat_map(move |(w, h)| {
        prop::collection::vec(values.clone(), w * h).prop_map(move |d| Plane::new(w, h, d).unwrap())
    })
}

fn c03_normalization() -> Result<String> {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        plane_strategy((0u32..=255).prop_map(|v| v as f32)),
        -4i32..=4,
        -64i32..=64,
        0.05f32..20.0,
        -500.0f32..500.0,
        -1000.0f32..1000.0,
    );
    runner
        .run(&strategy, |(img, k, b, a_real, b_real, c)| {
            let n = min_max_normalize(&img);
            let (lo, hi) = img.min_max();
            // Range.
            prop_assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
            // Idempotence.
            prop_assert_eq!(min_max_normalize(&n), n.clone());
            if lo == hi {
                prop_assert!(n.data().iter().all(|&v| v == 0.0));
            } else {
                prop_assert_eq!(n.min_max(), (0.0, 1.0));
                // Dyadic scale and integer shift are exact in f32, so the
                // invariance is exact.
                let a = 2f32.powi(k);
                let exact = min_max_normalize(&img.map(|v| a * v + b as f32));
                prop_assert_eq!(exact, n.clone());
                // General positive affine maps agree up to f32 rounding.
                let moved = min_max_normalize(&img.map(|v| a_real * v + b_real));
                let scale = (a_real * 255.0).abs() + b_real.abs();
                let bound = 8.0 * f32::EPSILON * scale / (a_real * (hi - lo)) + 1e-6;
                for (x, y) in moved.data().iter().zip(n.data()) {
                    prop_assert!((x - y).abs() <= bound, "{x} vs {y}, bound {bound}");
                }
            }
            // Constant-image convention.
            let flat = Plane::filled(img.width(), img.height(), c);
            prop_assert!(min_max_normalize(&flat).data().iter().all(|&v| v == 0.0));
            Ok(())
        })
        .map_err(|e| anyhow!("{e}"))?;
    Ok("1000 cases: idempotence, range, exact and rounded affine invariance, constant images".into())
}

/// Global histogram equalization over 256 bins: each pixel maps to the
/// fraction of pixels in its bin or below.
fn global_equalization(img: &Plane) -> Vec<f32> {
    let bin = |v: f32| (v * 255.0).round() as usize;
    let mut counts = [0usize; 256];
    for &v in img.data() {
        counts[bin(v)] += 1;
    }
    let n = img.data().len() as f64;
    img.data()
        .iter()
        .map(|&v| (counts[..=bin(v)].iter().sum::<usize>() as f64 / n) as f32)
        .collect()
}

fn c04_clahe() -> Result<String> {
    for &c in &[0.0f32, 0.1, 0.37, 0.5, 0.9, 1.0] {
        for (w, h) in [(16, 16), (64, 40), (5, 3)] {
            let img = Plane::filled(w, h, c);
            ensure!(clahe(&img, 2.0, [8, 8]) == img, "constant {c} at {w}x{h} changed");
        }
    }
    let mut runner = TestRunner::new(PropConfig {
        cases: 200,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (plane_strategy(0.0f32..=1.0), 0.5f32..8.0, 1usize..9, 1usize..9);
    runner
        .run(&strategy, |(img, clip, tx, ty)| {
            let out = clahe(&img, clip, [tx, ty]);
            prop_assert_eq!((out.width(), out.height()), (img.width(), img.height()));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            Ok(())
        })
        .map_err(|e| anyhow!("{e}"))?;
    let mut worst = 0.0f32;
    for (w, h, curve) in [(256usize, 4usize, 2.0f32), (97, 31, 0.5), (40, 40, 3.0)] {
        let ramp = Plane::from_fn(w, h, |x, y| {
            let t = (x + y * w) as f32 / (w * h - 1) as f32;
            ((t.powf(curve) * 255.0).round() / 255.0).clamp(0.0, 1.0)
        });
        let out = clahe(&ramp, 1e6, [1, 1]);
        let oracle = global_equalization(&ramp);
        for (a, b) in out.data().iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst <= 1.0 / 255.0, "single-tile CLAHE deviates from global equalization by {worst}");
    Ok(format!(
        "constant fixpoint, range over 200 random images, single-tile max deviation {worst:.2e} <= 1/255"
    ))
}

fn random_plane(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Plane {
    Plane::new(w, h, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn c05_augmentation() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let identity = AugmentationConfig::identity();
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let img = random_plane(w, h, &mut rng);
        let draw = sample_transform(&identity, &mut rng);
        ensure!(draw.is_identity(), "identity config drew {draw:?}");
        ensure!(apply_transform(&img, &draw, FillMode::Nearest) == img, "identity changed a {w}x{h} image");

        let mut twice = img.clone();
        flip_horizontal(&mut twice);
        flip_horizontal(&mut twice);
        ensure!(twice == img, "double flip changed a {w}x{h} image");
        let flip = TransformDraw {
            flip: true,
            ..TransformDraw::identity()
        };
        let once = apply_transform(&img, &flip, FillMode::Nearest);
        ensure!(apply_transform(&once, &flip, FillMode::Nearest) == img, "double flip draw");
    }
    let quarter = TransformDraw {
        rotation_deg: 90.0,
        ..TransformDraw::identity()
    };
    for n in [1usize, 2, 7, 8, 33] {
        let img = random_plane(n, n, &mut rng);
        let out = apply_transform(&img, &quarter, FillMode::Nearest);
        for y in 0..n {
            for x in 0..n {
                // Counterclockwise quarter turn as an index permutation.
                let expected = img.get(n - 1 - y, x);
                ensure!(
                    (out.get(x, y) - expected).abs() <= 1e-5,
                    "rot90 mismatch at ({x},{y}) for n={n}"
                );
            }
        }
    }

    let planes: Vec<Plane> = (0..10).map(|_| random_plane(12, 12, &mut rng)).collect();
    let labels: Vec<Label> = (0..10).map(|i| if i % 3 == 0 { Label::Normal } else { Label::Pneumonia }).collect();
    let set = PreparedSet::from_planes(planes, labels, 3)?;
    let cfg = AugmentationConfig::default();
    let take = |seed| -> Result<Vec<_>> { Ok(augment_stream(&set, &cfg, 4, seed)?.take(6).collect()) };
    ensure!(take(9)? == take(9)?, "same seed gave different batches");
    ensure!(take(9)? != take(10)?, "different seeds gave identical batches");
    Ok("identity no-op, double flip, rot90 oracle for n in {1,2,7,8,33}, reproducible streams".into())
}

fn c06_oversampling() -> Result<String> {
    let mut samples = Vec::new();
    for i in 0..11 {
        samples.push(ImageSample::in_memory(format!("n{i}.png"), Label::Normal, Plane::filled(8, 8, i as f32 / 20.0)));
    }
    for i in 0..29 {
        samples.push(ImageSample::in_memory(format!("p{i}.png"), Label::Pneumonia, Plane::filled(8, 8, 0.5)));
    }
    let ds = LabeledDataset::new(samples);
    let out = rebalance_by_oversampling(&ds, &AugmentationConfig::default(), 2, 3)?;
    ensure!(out.count(Label::Normal) == 3 * 11, "Normal count {}", out.count(Label::Normal));
    ensure!(out.count(Label::Pneumonia) == 29, "Pneumonia count {}", out.count(Label::Pneumonia));
    let before: Vec<_> = ds.samples().iter().filter(|s| s.label == Label::Pneumonia).collect();
    let after: Vec<_> = out.samples().iter().filter(|s| s.label == Label::Pneumonia).collect();
    ensure!(before == after, "majority samples changed");
    ensure!(
        out.samples()[..ds.len()] == *ds.samples(),
        "original samples are not kept verbatim"
    );
    Ok("11 Normal -> 33, 29 Pneumonia untouched".into())
}

fn fixture_set(per_class: usize, size: usize, seed: u64) -> Result<PreparedSet> {
    let mut planes = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class {
        for label in [Label::Normal, Label::Pneumonia] {
            planes.push(min_max_normalize(&synth_image(label, size, seed, i as u64)));
            labels.push(label);
        }
    }
    Ok(PreparedSet::from_planes(planes, labels, 3)?)
}

fn baseline_spec(size: usize) -> ArchitectureSpec {
    let mut spec = ArchitectureSpec::default_for(Architecture::BaselineCnn);
    spec.input_size = size;
    spec
}

fn head_weight_norm(model: &cxrbench::nn::Model) -> f64 {
    ["head.hidden.weight", "head.output.weight"]
        .iter()
        .map(|name| {
            let id = model.params().find(name).expect("head weight");
            model.params().value(id).iter().map(|&w| (w as f64).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

fn c07_training_sanity() -> Result<String> {
    let set = fixture_set(8, 32, 77)?;
    let data = TrainingData {
        train: set.clone(),
        validation: set.clone(),
        augmentation: AugmentationConfig::identity(),
    };
    let spec = baseline_spec(32);
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 200,
        train_steps_per_epoch: 1,
        val_steps_per_epoch: 1,
        lr_initial: 1e-3,
        lr_floor: 1e-6,
        lr_decay_policy: LrDecayPolicy::FixedStep,
        decay_epoch: 200,
        ..TrainConfig::default()
    };
    let run = |l2: f32| -> Result<(TrainingHistory, cxrbench::nn::Model)> {
        let mut model = build_baseline_cnn(&spec, 7)?;
        let history = train(&mut model, &data, &cfg, l2, 7, |_, _| Ok(()))?;
        Ok((history, model))
    };
    let t = Instant::now();
    let (history, model) = run(0.0)?;
    let secs = t.elapsed().as_secs_f64();
    let first_full = history.records.iter().find(|r| r.train_accuracy == 1.0).map(|r| r.epoch);
    let Some(first_full) = first_full else {
        bail!(
            "train accuracy never reached 1.0 (last {:.3})",
            history.last().map_or(0.0, |r| r.train_accuracy)
        );
    };
    let probs = model.predict_proba(&set.batch(&(0..set.len()).collect::<Vec<_>>()).inputs);
    let correct = probs
        .iter()
        .zip(set.labels())
        .filter(|(&p, &l)| (p >= 0.5) == (l == Label::Pneumonia))
        .count();
    ensure!(correct == set.len(), "final model fits {correct}/16");
    ensure!(secs < 300.0, "overfit run took {secs:.0}s");
    let (_, regularized) = run(1.0)?;
    let (plain, heavy) = (head_weight_norm(&model), head_weight_norm(&regularized));
    ensure!(heavy < plain, "head norm with l2=1 ({heavy:.4}) not below l2=0 ({plain:.4})");
    Ok(format!(
        "train accuracy 1.0 from epoch {first_full}, 16/16 fitted in {secs:.1}s; head norm {heavy:.3} (l2=1) < {plain:.3} (l2=0)"
    ))
}

/// Head of the baseline network in f64: flatten, dense + ReLU, dense,
/// mean binary cross-entropy plus the L2 term on both kernels.
struct HeadOracle<'a> {
    features: &'a [Vec<f64>],
    targets: &'a [f64],
    n_in: usize,
    n_hidden: usize,
    l2: f64,
}

impl HeadOracle<'_> {
    fn loss(&self, w1: &[f64], b1: &[f64], w2: &[f64], b2: f64) -> (f64, f64) {
        let mut data = 0.0;
        for (x, &t) in self.features.iter().zip(self.targets) {
            let mut z = b2;
            for o in 0..self.n_hidden {
                let mut a = b1[o];
                for i in 0..self.n_in {
                    a += x[i] * w1[i * self.n_hidden + o];
                }
                z += a.max(0.0) * w2[o];
            }
            let p = 1.0 / (1.0 + (-z).exp());
            data -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        data /= self.features.len() as f64;
        let penalty = self.l2 * (w1.iter().chain(w2).map(|w| w * w).sum::<f64>());
        (data, data + penalty)
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn c08_gradient_check() -> Result<String> {
    let size = 16;
    let spec = baseline_spec(size);
    let model = build_baseline_cnn(&spec, 3)?;
    let l2 = spec.l2_coefficient;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::new(
        [2, size, size, 3],
        (0..2 * size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
    );
    let targets = [0.0f32, 1.0];
    let out = model.loss_and_grads(&x, &targets, l2);

    let feats = model.forward_prefix(&x, model.blocks().len() - 1);
    let features: Vec<Vec<f64>> = (0..2).map(|n| feats.sample(n).iter().map(|&v| v as f64).collect()).collect();
    let ps = model.params();
    let get = |name: &str| -> Vec<f64> { ps.value(ps.find(name).unwrap()).iter().map(|&v| v as f64).collect() };
    let grad = |name: &str| -> Vec<f64> {
        out.grads.get(ps.find(name).unwrap()).expect("head is trainable").iter().map(|&v| v as f64).collect()
    };
    let (w1, b1, w2, b2) = (
        get("head.hidden.weight"),
        get("head.hidden.bias"),
        get("head.output.weight"),
        get("head.output.bias")[0],
    );
    let n_hidden = b1.len();
    let oracle = HeadOracle {
        features: &features,
        targets: &[0.0, 1.0],
        n_in: features[0].len(),
        n_hidden,
        l2: l2 as f64,
    };
    ensure!(w1.len() == oracle.n_in * n_hidden, "unexpected head shape");
    let (data_loss, _) = oracle.loss(&w1, &b1, &w2, b2);
    ensure!(
        (data_loss - out.data_loss).abs() <= 1e-5 * data_loss.abs().max(1.0),
        "oracle loss {data_loss} differs from model loss {}",
        out.data_loss
    );

    let h = 1e-6;
    let central = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
    let mut report = Vec::new();

    let g_w1 = grad("head.hidden.weight");
    let mut picks: Vec<usize> = (0..200).map(|_| rng.gen_range(0..w1.len())).collect();
    let mut by_size: Vec<usize> = (0..w1.len()).collect();
    by_size.sort_by(|&a, &b| g_w1[b].abs().total_cmp(&g_w1[a].abs()));
    picks.extend(&by_size[..100]);
    let numeric: Vec<f64> = picks
        .iter()
        .map(|&k| {
            central(&|d| {
                let mut w = w1.clone();
                w[k] += d;
                oracle.loss(&w, &b1, &w2, b2).1
            })
        })
        .collect();
    let analytic: Vec<f64> = picks.iter().map(|&k| g_w1[k]).collect();
    report.push(("head.hidden.weight", rel_error(&analytic, &numeric)));

    let numeric: Vec<f64> = (0..n_hidden)
        .map(|k| {
            central(&|d| {
                let mut b = b1.clone();
                b[k] += d;
                oracle.loss(&w1, &b, &w2, b2).1
            })
        })
        .collect();
    report.push(("head.hidden.bias", rel_error(&grad("head.hidden.bias"), &numeric)));

    let numeric: Vec<f64> = (0..n_hidden)
        .map(|k| {
            central(&|d| {
                let mut w = w2.clone();
                w[k] += d;
                oracle.loss(&w1, &b1, &w, b2).1
            })
        })
        .collect();
    report.push(("head.output.weight", rel_error(&grad("head.output.weight"), &numeric)));

    let numeric = [central(&|d| oracle.loss(&w1, &b1, &w2, b2 + d).1)];
    report.push(("head.output.bias", rel_error(&grad("head.output.bias"), &numeric)));

    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    let text: Vec<String> = report.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    ensure!(worst <= 1e-3, "relative errors {}", text.join(", "));
    Ok(format!("2-sample batch, relative errors {}", text.join(", ")))
}

fn c09_freeze_contract() -> Result<String> {
    let weights = tempfile::tempdir()?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = Vec::new();
    for arch in Architecture::ALL.into_iter().filter(|a| a.is_pretrained_backbone()) {
        write_synthetic_weights(arch, weights.path(), 1)?;
        let spec = ArchitectureSpec::default_for(arch);
        let mut model = build_finetuned(&spec, weights.path(), 4)?;
        let before = model.params().clone();
        let s = spec.input_size;
        let x = Tensor::new([2, s, s, 3], (0..2 * s * s * 3).map(|_| rng.gen_range(0.0..1.0)).collect());
        let out = model.loss_and_grads(&x, &[0.0, 1.0], spec.l2_coefficient);
        let mut adam = Adam::new(0.9, 0.999, 1e-7);
        adam.step(model.params_mut(), &out.grads, 1e-3);

        let top = arch.top_block();
        let mut allowed = Vec::new();
        for (i, b) in model.blocks().iter().enumerate() {
            if b.name == top || b.name == "head" {
                allowed.extend(model.block_params(i));
            }
        }
        let (mut frozen, mut moved) = (0usize, 0usize);
        for ((id, old), (_, new)) in before.iter().zip(model.params().iter()) {
            ensure!(old.trainable == allowed.contains(&id), "{arch}: {} has the wrong trainable flag", old.name);
            if !old.trainable {
                frozen += 1;
                let same = old.value.iter().zip(&new.value).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure!(same, "{arch}: frozen {} changed", old.name);
            } else if old.value != new.value {
                moved += 1;
            }
        }
        ensure!(frozen > 0, "{arch}: nothing frozen");
        ensure!(moved > 0, "{arch}: no trainable parameter moved");
        checked.push(format!("{arch} {frozen} frozen/{moved} moved"));
    }
    Ok(checked.join(", "))
}

fn base_config(dataset: &Path, output: &Path, weights: Option<&Path>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset_root = dataset.to_path_buf();
    cfg.output_dir = output.to_path_buf();
    cfg.weights_dir = weights.map(Path::to_path_buf);
    cfg
}

fn check_run_artifacts(cfg: &ExperimentConfig, arch: Architecture, epochs: usize) -> Result<()> {
    let runs = cfg.output_dir.join(commands::RUNS_DIR).join(arch.name());
    let summary: ExperimentSummary = serde_json::from_str(&std::fs::read_to_string(runs.join(commands::SUMMARY_FILE))?)
        .with_context(|| format!("{arch} summary.json"))?;
    ensure!(summary.architecture == arch, "summary names {}", summary.architecture);
    ensure!(summary.repetitions.len() == cfg.train.repetitions, "{arch}: repetition count");
    for rep in 0..cfg.train.repetitions {
        let dir = runs.join(format!("rep{rep}"));
        let history = TrainingHistory::read_csv(&dir.join(HISTORY_FILE))?;
        ensure!(history.len() == epochs, "{arch}: {} history rows", history.len());
        for (i, r) in history.records.iter().enumerate() {
            ensure!(r.epoch == i + 1, "{arch}: epoch column");
            ensure!(r.train_loss.is_finite() && r.val_loss.is_finite(), "{arch}: non-finite loss");
            ensure!((0.0..=1.0).contains(&r.train_accuracy) && (0.0..=1.0).contains(&r.val_accuracy));
            ensure!(r.learning_rate >= cfg.train.lr_floor, "{arch}: lr below floor");
        }
        let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(RUN_MANIFEST))?)
            .with_context(|| format!("{arch} manifest.json"))?;
        ensure!(manifest.architecture == arch && manifest.repetition == rep);
        ensure!(manifest.epochs_completed == epochs, "{arch}: manifest epochs");
        ensure!(manifest.config_hash == summary.config_hash, "{arch}: config hash");
        ensure!(manifest.final_metrics == summary.repetitions[rep].final_metrics);
        let cm = manifest.final_metrics.confusion();
        ensure!(compute_metrics(&cm) == manifest.final_metrics, "{arch}: manifest metrics");
        for ckpt in [LAST_CHECKPOINT, BEST_CHECKPOINT] {
            let spec = read_checkpoint_spec(&dir.join(ckpt))?;
            ensure!(spec == cfg.spec_for(arch)?, "{arch}: {ckpt} spec");
        }
    }
    Ok(())
}

fn c10_desk_scale_run() -> Result<String> {
    let tmp = tempfile::tempdir()?;

    // Subset run: five epochs of the baseline on a tenth of the data.
    let data = tmp.path().join("full");
    write_synthetic_dataset(
        &data,
        &SynthConfig {
            size: 96,
            ..SynthConfig::default()
        },
    )?;
    let mut cfg = base_config(&data, &tmp.path().join("subset_out"), None);
    cfg.architectures = vec!["BaselineCNN".into()];
    cfg.data.subset_fraction = Some(0.1);
    cfg.models.insert(
        "BaselineCNN".into(),
        ModelOverride {
            input_size: Some(64),
            ..ModelOverride::default()
        },
    );
    cfg.train.epochs = 5;
    cfg.train.train_steps_per_epoch = 17;
    cfg.train.val_steps_per_epoch = 11;
    cfg.train.repetitions = 1;
    let prepared = commands::cmd_prepare(&cfg)?;
    let outcome = commands::cmd_train(&cfg)?;
    ensure!(outcome.is_success(), "subset run failed: {:?}", outcome.failed);
    check_run_artifacts(&cfg, Architecture::BaselineCnn, 5)?;
    let runs = cfg.output_dir.join(commands::RUNS_DIR).join("BaselineCNN");
    let summary: ExperimentSummary = serde_json::from_str(&std::fs::read_to_string(runs.join(commands::SUMMARY_FILE))?)?;
    let report = &summary.repetitions[0].final_metrics;
    let val = &prepared.validation_balanced;
    ensure!(val[&Label::Normal] == val[&Label::Pneumonia], "validation is not balanced: {val:?}");
    ensure!(
        report.accuracy >= 60.0,
        "subset accuracy {:.2}% does not beat the 50% majority baseline by 10 points",
        report.accuracy
    );
    let subset_line = format!(
        "subset accuracy {:.2}% on {} balanced validation images",
        report.accuracy, report.total
    );

    // Every architecture at its configured input size for two epochs.
    let small = tmp.path().join("small");
    write_synthetic_dataset(
        &small,
        &SynthConfig {
            normal: 20,
            pneumonia: 30,
            size: 96,
            seed: 3,
        },
    )?;
    let weights = tmp.path().join("weights");
    for arch in Architecture::ALL.into_iter().filter(|a| a.is_pretrained_backbone()) {
        write_synthetic_weights(arch, &weights, 0)?;
    }
    let mut cfg = base_config(&small, &tmp.path().join("all_out"), Some(&weights));
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.train_steps_per_epoch = 2;
    cfg.train.val_steps_per_epoch = 2;
    cfg.train.repetitions = 1;
    cfg.evaluation.batch_size = 8;
    ensure!(cfg.architecture_list()?.len() == 9, "default config does not select all nine architectures");
    commands::cmd_prepare(&cfg)?;
    let outcome = commands::cmd_train(&cfg)?;
    ensure!(outcome.is_success(), "full-config path failed: {:?}", outcome.failed);
    let mut sizes = BTreeMap::new();
    for arch in Architecture::ALL {
        check_run_artifacts(&cfg, arch, 2)?;
        sizes.insert(cfg.spec_for(arch)?.input_size, ());
    }
    ensure!(sizes.contains_key(&224) && sizes.contains_key(&299), "input sizes {:?}", sizes.keys());
    Ok(format!("{subset_line}; 9 architectures x 2 epochs at 224/299 px with valid artifacts"))
}

fn cli(args: &[&str], envs: &[(&str, &Path)]) -> Result<String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cxrbench"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output()?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        bail!(
            "`cxrbench {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        );
    }
    Ok(stdout)
}

fn declared_files(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let root = &cfg.output_dir;
    let mut files = vec![root.join(commands::FROZEN_CONFIG)];
    for f in [commands::SCAN_FILE, commands::SPLIT_FILE, commands::TRAIN_SET_FILE, commands::VALIDATION_SET_FILE] {
        files.push(root.join(commands::PREPARE_DIR).join(f));
    }
    let report = root.join(commands::REPORT_DIR);
    for arch in cfg.architecture_list()? {
        let runs = root.join(commands::RUNS_DIR).join(arch.name());
        let eval = root.join(commands::EVALUATION_DIR).join(arch.name());
        files.push(runs.join(commands::SUMMARY_FILE));
        files.push(eval.join(commands::SUMMARY_FILE));
        for rep in 0..cfg.train.repetitions {
            for f in [HISTORY_FILE, LAST_CHECKPOINT, BEST_CHECKPOINT, RUN_MANIFEST] {
                files.push(runs.join(format!("rep{rep}")).join(f));
            }
            for f in [commands::METRICS_FILE, commands::CONFUSION_FILE, commands::PREDICTIONS_FILE] {
                files.push(eval.join(format!("rep{rep}")).join(f));
            }
        }
        for f in ["accuracy.png", "loss.png", "confusion.png"] {
            files.push(report.join(arch.name()).join(f));
        }
    }
    for f in ["overlay_accuracy.png", "overlay_loss.png", commands::RESULTS_CSV, commands::RESULTS_TXT] {
        files.push(report.join(f));
    }
    Ok(files)
}

fn c11_cli_round_trip() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let weights = root.join("cache");
    let env = [("CXRBENCH_WEIGHTS", weights.as_path())];
    cli(
        &["synth-dataset", "--root", root.join("data").to_str().unwrap(), "--normal", "18", "--pneumonia", "30", "--size", "64"],
        &[],
    )?;
    cli(&["seed-weights", "--arch", "MobileNet_V2"], &env)?;
    ensure!(weights.join("MobileNet_V2.safetensors").is_file(), "weights env var was not used");

    let config_path = root.join("smoke.toml");
    cli(&["init-config", "--output", config_path.to_str().unwrap()], &[])?;
    let sets = [
        format!("dataset_root={:?}", root.join("data").display().to_string()),
        format!("output_dir={:?}", root.join("out").display().to_string()),
        "architectures=[\"BaselineCNN\", \"MobileNet_V2\"]".to_string(),
        "models.BaselineCNN.input_size=32".into(),
        "models.MobileNet_V2.input_size=32".into(),
        "train.epochs=2".into(),
        "train.batch_size=8".into(),
        "train.train_steps_per_epoch=2".into(),
        "train.val_steps_per_epoch=2".into(),
        "train.repetitions=2".into(),
    ];
    let mut args: Vec<&str> = vec!["--config", config_path.to_str().unwrap()];
    for s in &sets {
        args.push("--set");
        args.push(s);
    }
    let step = |name: &str| -> Result<String> {
        let mut a = vec![name];
        a.extend(&args);
        cli(&a, &env)
    };
    step("prepare")?;
    step("train")?;
    step("evaluate")?;
    let table = step("report")?;

    let mut cfg = ExperimentConfig::load_with_overrides(Some(&config_path), &sets)?;
    cfg.weights_dir = Some(weights.clone());
    let files = declared_files(&cfg)?;
    let missing: Vec<_> = files.iter().filter(|f| !f.is_file()).collect();
    ensure!(missing.is_empty(), "missing outputs: {missing:?}");

    let mut reports = 0;
    for arch in cfg.architecture_list()? {
        for rep in 0..cfg.train.repetitions {
            let dir = cfg.output_dir.join(commands::EVALUATION_DIR).join(arch.name()).join(format!("rep{rep}"));
            let from_json = MetricsReport::read_json(&dir.join(commands::METRICS_FILE))?;
            let cm = read_confusion_csv(&dir.join(commands::CONFUSION_FILE))?;
            ensure!(compute_metrics(&cm) == from_json, "{arch} rep{rep}: metrics JSON differs from confusion CSV");
            reports += 1;
        }
        ensure!(table.contains(arch.name()), "results table lacks {arch}");
    }
    for png in files.iter().filter(|f| f.extension().is_some_and(|e| e == "png")) {
        let img = image::open(png).with_context(|| format!("decoding {}", png.display()))?;
        let expected = if png.ends_with("confusion.png") {
            let side = cfg.report.width.min(cfg.report.height).max(200);
            (side, side)
        } else {
            (cfg.report.width, cfg.report.height)
        };
        ensure!(
            (img.width(), img.height()) == expected,
            "{} is {}x{}",
            png.display(),
            img.width(),
            img.height()
        );
    }

    let results = cfg.output_dir.join(commands::REPORT_DIR).join(commands::RESULTS_CSV);
    let before = std::fs::read(&results)?;
    step("report")?;
    ensure!(std::fs::read(&results)? == before, "report is not idempotent");
    let prepared = cfg.output_dir.join(commands::PREPARE_DIR).join(commands::SPLIT_FILE);
    let split_before = std::fs::read(&prepared)?;
    step("prepare")?;
    ensure!(std::fs::read(&prepared)? == split_before, "prepare is not idempotent");

    Ok(format!(
        "{} declared files present, {reports} metrics files re-derived exactly, report and prepare idempotent",
        files.len()
    ))
}
