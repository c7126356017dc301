use std::process::{Command, Output};

fn cxrbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxrbench"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn metrics_from_counts_prints_rounded_percentages() {
    let o = cxrbench(&["metrics-from-counts", "--tp", "1703", "--tn", "1638", "--fn", "91", "--fp", "26", "--positive", "normal"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("positive class: Normal"));
    assert!(text.contains("accuracy      96.62"), "{text}");
    assert!(text.contains("F1 score      96.68"), "{text}");
}

#[test]
fn metrics_json_flags_undefined_ratios() {
    let o = cxrbench(&["metrics-from-counts", "--tp", "0", "--tn", "4", "--fn", "0", "--fp", "0", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["accuracy"], 100.0);
    assert_eq!(v["sensitivity"], 0.0);
    assert_eq!(v["flags"].as_array().unwrap().len(), 3);
}

#[test]
fn published_mode_reports_the_erratum() {
    let o = cxrbench(&["metrics-from-counts", "--published"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("Resnet50")).count(), 1);
    assert!(text.contains("known erratum: CNN Precision published 94.05, recomputed 94.51"), "{text}");
}

#[test]
fn bad_arguments_exit_nonzero() {
    assert!(!cxrbench(&["metrics-from-counts", "--tp", "3"]).status.success());
    assert!(!cxrbench(&["metrics-from-counts", "--tp", "0", "--tn", "0", "--fn", "0", "--fp", "0"]).status.success());
    assert!(!cxrbench(&["metrics-from-counts", "--tp", "1", "--tn", "1", "--fn", "1", "--fp", "1", "--positive", "cat"])
        .status
        .success());
    assert!(!cxrbench(&["train", "--set", "train.epochs=oops"]).status.success());
    assert!(!cxrbench(&["train", "--set", "architectures=[\"AlexNet\"]"]).status.success());
    assert!(!cxrbench(&["frobnicate"]).status.success());
}

#[test]
fn init_config_round_trips_through_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    assert!(cxrbench(&["init-config", "--output", path.to_str().unwrap()]).status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    let parsed = cxrbench::config::ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(parsed, cxrbench::config::ExperimentConfig::default());
    let o = cxrbench(&["evaluate", "--config", path.to_str().unwrap(), "--set", "dataset_root=\"/nonexistent\""]);
    assert!(!o.status.success());
}

#[test]
fn missing_checkpoints_fail_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    let synth = cxrbench(&["synth-dataset", "--root", data.to_str().unwrap(), "--normal", "6", "--pneumonia", "8", "--size", "24"]);
    assert!(synth.status.success());
    let sets = [
        format!("dataset_root={:?}", data.display().to_string()),
        format!("output_dir={:?}", out.display().to_string()),
        "architectures=[\"BaselineCNN\"]".to_string(),
        "models.BaselineCNN.input_size=16".to_string(),
    ];
    let run = |cmd: &str| {
        let mut args = vec![cmd];
        for s in &sets {
            args.extend(["--set", s.as_str()]);
        }
        cxrbench(&args)
    };
    assert!(run("prepare").status.success());
    let o = run("evaluate");
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("BaselineCNN/rep0"));
}
