use std::path::Path;
use std::process::{Command, Output};

use distmatch::report::RunReport;
use distmatch::synthetic::load_condensed;

fn dmc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn condense_toy(dir: &Path, out: &str, iters: &str) -> Output {
    dmc(
        dir,
        &["condense", "--dataset", "toy", "--ipc", "1", "--iters", iters, "--lr", "1.0", "--seed", "0", "--out", out],
    )
}

#[test]
fn condense_then_eval_on_toy() {
    let dir = tempfile::tempdir().unwrap();
    let out = condense_toy(dir.path(), "s.dmc", "500");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let set = load_condensed(&dir.path().join("s.dmc")).unwrap();
    assert_eq!(set.labels().len(), 4);
    assert_eq!(set.meta.dataset, "toy");

    let report = RunReport::read(&dir.path().join("s.report.json")).unwrap();
    assert_eq!(report.command, "condense");
    assert_eq!(report.config["condense"]["iterations"], 500);
    report.verify_artifacts().unwrap();

    let out = dmc(
        dir.path(),
        &["eval", "--synthetic", "s.dmc", "--arch", "convnet3", "--repeats", "1", "--nets", "1", "--epochs", "20"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = RunReport::read(&dir.path().join("eval.report.json")).unwrap();
    let accs = report.results[0]["accuracies"].as_array().unwrap();
    assert_eq!(accs.len(), 1);
    let acc = accs[0].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));
}

#[test]
fn identical_invocations_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.dmc", "b.dmc"] {
        assert!(condense_toy(dir.path(), name, "30").status.success());
    }
    let a = std::fs::read(dir.path().join("a.dmc")).unwrap();
    let b = std::fs::read(dir.path().join("b.dmc")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn augmentation_log_has_one_transform_per_class_and_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmc(
        dir.path(),
        &["condense", "--dataset", "toy", "--ipc", "1", "--iters", "5", "--out", "s.dmc", "--log-aug", "aug.jsonl"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("aug.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["iteration"], i);
        // one sampled network, one transform per class
        assert_eq!(l["aug"].as_array().unwrap().len(), 1);
        assert_eq!(l["aug"][0].as_array().unwrap().len(), 4);
    }
}

#[test]
fn verify_appendix_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmc(dir.path(), &["verify-appendix"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("passed"));
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dmc(dir.path(), &["condense", "--ipc", "many"]).status.code(), Some(2));
    assert_eq!(dmc(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(dmc(dir.path(), &["eval"]).status.code(), Some(2));

    let out = dmc(dir.path(), &["eval", "--synthetic", "missing.dmc"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.dmc"));

    std::fs::write(dir.path().join("bad.dmc"), b"DMC1\x09").unwrap();
    let out = dmc(dir.path(), &["export-grid", "--synthetic", "bad.dmc"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "seed = 1\nspeed = 2\n[condense]\nipc = 1\nitres = 5\n",
    )
    .unwrap();
    let out = dmc(dir.path(), &["--config", "run.toml", "condense", "--dataset", "toy"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("speed") && err.contains("condense.itres"), "{err}");
}

#[test]
fn invalid_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmc(dir.path(), &["condense", "--dataset", "toy", "--lr=-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
}

#[test]
fn baseline_and_grid_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmc(
        dir.path(),
        &["baseline", "--dataset", "toy", "--method", "random", "--ipc", "3", "--out", "r.dmc"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let set = load_condensed(&dir.path().join("r.dmc")).unwrap();
    assert_eq!((set.ipc(), set.meta.method.as_str()), (3, "random"));
    assert_eq!(set.meta.selection.as_ref().map(Vec::len), Some(12));

    let out = dmc(dir.path(), &["export-grid", "--synthetic", "r.dmc", "--out", "g.png", "--zoom", "2"]);
    assert!(out.status.success());
    RunReport::read(&dir.path().join("g.report.json")).unwrap().verify_artifacts().unwrap();
}

#[test]
fn continual_curve_on_toy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmc(
        dir.path(),
        &[
            "cl", "--dataset", "toy", "--steps", "2", "--budget", "1", "--builder", "random", "--nets", "2", "--epochs",
            "10", "--out-dir", "cl",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cl/curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    RunReport::read(&dir.path().join("cl/report.json")).unwrap().verify_artifacts().unwrap();
}
