//! End-to-end checks of the `unsq` binary.

use std::path::Path;
use std::process::{Command, Output};

fn unsq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unsq"))
        .args(args)
        .output()
        .expect("spawn unsq")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = unsq(args);
    assert!(
        out.status.success(),
        "unsq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout(&out)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Parses the `IoU <x>` field of an `eval` line.
fn eval_iou(line: &str) -> f64 {
    line.split('\t')
        .find_map(|f| f.strip_prefix("IoU "))
        .expect("IoU field")
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn count_params_prints_table_values() {
    assert_eq!(
        ok(&["count-params", "--depth", "64", "--mode", "paper-compat"]).trim(),
        "31042434"
    );
    assert_eq!(
        ok(&["count-params", "--depth", "4", "--mode", "paper-compat"]).trim(),
        "122394"
    );
    assert_eq!(
        ok(&["count-params", "--depth", "2", "--mode", "paper-compat"]).trim(),
        "30902"
    );
    assert_eq!(ok(&["count-params", "--depth", "2"]).trim(), "30534");
    assert_eq!(ok(&["count-params", "--depth", "2", "--bn"]).trim(), "30782");
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(
        unsq(&["count-params", "--depth", "2", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(unsq(&["count-params"]).status.code(), Some(2));
    assert_eq!(
        unsq(&["count-params", "--depth", "2", "--mode", "fancy"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(unsq(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(
        unsq(&["eval", "--data", "m.json", "--depth", "2", "--checkpoint", "c"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(unsq(&["--help"]).status.code(), Some(0));

    let missing = unsq(&["eval", "--data", "/nonexistent/manifest.json", "--depth", "2"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing file"));
    assert_eq!(unsq(&["count-params", "--depth", "0"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = unsq(&["gen-data", "--out", path(dir.path()), "--height", "40"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn grad_check_passes_and_reports_error() {
    let out = ok(&["grad-check", "--seeds", "1"]);
    let line = out.lines().last().unwrap();
    assert!(line.contains(" 0 failed"), "{line}");
    let err: f64 = line
        .split("max relative error ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4, "{line}");
}

#[test]
fn fresh_model_iou_sits_at_the_chance_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "gen-data",
        "--out",
        path(d),
        "--num-train",
        "2",
        "--num-test",
        "8",
        "--seed",
        "5",
    ]);
    let sparse = d.join("test/manifest.json");
    let bal = d.join("bal");
    ok(&[
        "gen-data",
        "--out",
        path(&bal),
        "--num-train",
        "2",
        "--num-test",
        "8",
        "--seed",
        "5",
        "--foreground-fraction",
        "0.45",
    ]);
    let bal_test = bal.join("test/manifest.json");
    let fraction = unsq::data::DatasetManifest::read(&bal_test)
        .unwrap()
        .stats
        .fraction();
    for seed in 1..=6 {
        let s = seed.to_string();
        let sparse_iou = eval_iou(&ok(&[
            "eval",
            "--data",
            path(&sparse),
            "--depth",
            "2",
            "--model-seed",
            &s,
        ]));
        assert!(sparse_iou < 0.2, "seed {seed}: {sparse_iou}");
        // An input-blind predictor scores at most the foreground fraction,
        // reached by labelling everything foreground.
        let bal_iou = eval_iou(&ok(&[
            "eval",
            "--data",
            path(&bal_test),
            "--depth",
            "2",
            "--model-seed",
            &s,
        ]));
        assert!(
            bal_iou <= fraction + 0.02,
            "seed {seed}: {bal_iou} vs fraction {fraction}"
        );
    }
}

#[test]
fn train_soft_targets_distill_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "gen-data",
        "--out",
        path(d),
        "--num-train",
        "6",
        "--num-test",
        "3",
        "--seed",
        "2",
    ]);
    let (train, test) = (d.join("train/manifest.json"), d.join("test/manifest.json"));
    let teacher = d.join("teacher");
    ok(&[
        "train",
        "--depth",
        "2",
        "--train",
        path(&train),
        "--test",
        path(&test),
        "--iterations",
        "4",
        "--eval-every",
        "2",
        "--out",
        path(&teacher),
        "--quiet",
    ]);
    for f in ["best.ckpt", "train.csv", "run.json"] {
        assert!(teacher.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(teacher.join("train.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), unsq::distill::TRAIN_CSV_HEADER);
    assert_eq!(csv.lines().count(), 1 + 3);

    let soft = d.join("soft");
    ok(&[
        "make-soft-targets",
        "--teacher",
        path(&teacher.join("best.ckpt")),
        "--data",
        path(&train),
        "--temperature",
        "2",
        "--out",
        path(&soft),
    ]);
    assert!(soft.join("soft_targets.json").exists());

    let student = d.join("student");
    ok(&[
        "distill",
        "--depth",
        "1",
        "--bn",
        "--class-weights",
        "--soft-targets",
        path(&soft),
        "--train",
        path(&train),
        "--test",
        path(&test),
        "--iterations",
        "4",
        "--eval-every",
        "2",
        "--out",
        path(&student),
        "--quiet",
    ]);
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(student.join("run.json")).unwrap()).unwrap();
    assert!(run["teacher_hash"].is_string());

    // Soft targets at another temperature are rejected at runtime.
    let wrong_t = unsq(&[
        "distill",
        "--soft-targets",
        path(&soft),
        "--temperature",
        "5",
        "--train",
        path(&train),
        "--test",
        path(&test),
        "--iterations",
        "2",
        "--out",
        path(&d.join("x")),
        "--quiet",
    ]);
    assert_eq!(wrong_t.status.code(), Some(1));

    let line = ok(&[
        "eval",
        "--data",
        path(&test),
        "--checkpoint",
        path(&student.join("best.ckpt")),
    ]);
    let iou = eval_iou(&line);
    assert!((0.0..=1.0).contains(&iou));
}

#[test]
fn experiment_replays_from_its_own_spec() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    ok(&[
        "experiment",
        "--kind",
        "depth-sweep",
        "--depths",
        "2,1",
        "--iterations",
        "4",
        "--eval-every",
        "2",
        "--num-train",
        "4",
        "--num-test",
        "2",
        "--data-seed",
        "9",
        "--out",
        path(&first),
        "--quiet",
    ]);
    let spec = first.join("experiment.json");
    assert!(spec.exists());
    let second = dir.path().join("second");
    ok(&[
        "experiment",
        "--spec",
        path(&spec),
        "--out",
        path(&second),
        "--quiet",
    ]);
    let read = |p: &Path| std::fs::read_to_string(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&first), read(&second));
    assert_eq!(read(&first).lines().count(), 3);

    let dry = dir.path().join("dry");
    ok(&[
        "experiment",
        "--kind",
        "temperature-sweep",
        "--out",
        path(&dry),
        "--dry-run",
    ]);
    assert!(dry.join("experiment.json").exists());
    assert!(!dry.join("metrics.csv").exists());

    let no_teacher = unsq(&[
        "experiment",
        "--kind",
        "final-comparison",
        "--teacher",
        "/nonexistent.ckpt",
        "--out",
        path(&dir.path().join("nt")),
    ]);
    assert_eq!(no_teacher.status.code(), Some(1));
    assert!(!dir.path().join("nt").exists());
}
