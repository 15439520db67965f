use std::fs;
use std::path::Path;
use std::process::Command;

use app2s::cli::{self, verify, CliError, ModelRef, RunConfig};

fn tiny(out: &Path) -> RunConfig {
    RunConfig {
        out: out.to_path_buf(),
        seed: 3,
        n_classes: 20,
        samples_per_class: 10,
        patch_dim: 3,
        grid_h: 2,
        grid_w: 2,
        n_way: 3,
        k_shot: 2,
        n_query: 2,
        epochs: 2,
        tasks_per_epoch: 5,
        val_tasks: 2,
        channels: 4,
        lr: 0.01,
        temperature: 0.1,
        eval_epochs: 1,
        eval_tasks: 10,
        ..RunConfig::default()
    }
}

fn report_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .parse()
        .unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gyro"))
}

#[test]
fn gen_writes_a_reproducible_file() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = cli::cmd_gen(&tiny(&a)).unwrap();
    assert!(out.starts_with("wrote 200 samples"));
    cli::cmd_gen(&tiny(&b)).unwrap();
    let bytes = fs::read(a.join("dataset.bin")).unwrap();
    assert_eq!(bytes, fs::read(b.join("dataset.bin")).unwrap());
    let header = bytes.split(|&b| b == b'\n').next().unwrap();
    let header: serde_json::Value = serde_json::from_slice(header).unwrap();
    assert_eq!(header, serde_json::json!({"n_samples": 200, "H": 2, "W": 2, "C": 3, "n_classes": 20}));
    // the effective configuration is echoed next to the outputs
    let echoed = RunConfig::load(&a.join("config.json")).unwrap();
    assert_eq!(echoed, tiny(&a));
}

#[test]
fn gen_rejects_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        n_classes: 0,
        ..tiny(dir.path())
    };
    assert!(matches!(cli::cmd_gen(&cfg), Err(CliError::Config(_))));
}

#[test]
fn train_writes_its_outputs_and_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let straight = tiny(&dir.path().join("straight"));
    let report = cli::cmd_train(&straight).unwrap();
    for f in ["config.json", "metrics.csv", "checkpoint.bin", "last.bin", "report.txt"] {
        assert!(straight.out.join(f).is_file(), "{f} missing");
    }
    assert_eq!(report_value(&report, "epochs_completed"), 2.0);
    assert!(report.contains("variant=app2s"));
    let csv = fs::read_to_string(straight.out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);

    let split = dir.path().join("split");
    let first = RunConfig {
        stop_after: Some(1),
        ..tiny(&split)
    };
    let r = cli::cmd_train(&first).unwrap();
    assert_eq!(report_value(&r, "epochs_completed"), 1.0);
    let second = RunConfig {
        resume: true,
        ..tiny(&split)
    };
    cli::cmd_train(&second).unwrap();
    for f in ["metrics.csv", "checkpoint.bin", "last.bin"] {
        assert_eq!(fs::read(split.join(f)).unwrap(), fs::read(straight.out.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn resume_refuses_another_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        stop_after: Some(1),
        ..tiny(dir.path())
    };
    cli::cmd_train(&cfg).unwrap();
    let other = RunConfig {
        resume: true,
        variant: "prototype".into(),
        ..tiny(dir.path())
    };
    assert!(matches!(cli::cmd_train(&other), Err(CliError::Config(_))));
}

#[test]
fn bad_options_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        optimizer: "rmsprop".into(),
        ..tiny(dir.path())
    };
    let err = cli::cmd_train(&cfg).unwrap_err();
    assert_eq!((err.class(), err.exit_code()), ("usage", 2));
    let cfg = RunConfig {
        variant: "nearest".into(),
        ..tiny(dir.path())
    };
    assert!(matches!(cli::cmd_train(&cfg), Err(CliError::Usage(_))));
}

#[test]
fn eval_sits_at_chance_on_indistinguishable_classes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        class_spread: 1e-9,
        epochs: 0,
        variant: "prototype".into(),
        eval_epochs: 2,
        eval_tasks: 150,
        ..tiny(dir.path())
    };
    cli::cmd_train(&cfg).unwrap();
    let report = cli::cmd_eval(&cfg).unwrap();
    assert_eq!(report_value(&report, "tasks"), 300.0);
    let acc = report_value(&report, "mean_accuracy");
    assert!((acc - 1.0 / 3.0).abs() < 0.05, "{acc}");

    // the report summarises the per-task rows
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let accs: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(accs.len(), 300);
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - acc).abs() < 1e-12);
    assert_eq!(fs::read_to_string(dir.path().join("report.txt")).unwrap(), report);
}

#[test]
fn eval_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let err = cli::run_command(cli::Command::Eval, &tiny(dir.path())).unwrap_err();
    assert_eq!(err.class(), "io");
}

#[test]
fn eval_rejects_a_checkpoint_for_other_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        epochs: 0,
        ..tiny(dir.path())
    };
    cli::cmd_train(&cfg).unwrap();
    let wider = RunConfig {
        patch_dim: 5,
        ..cfg
    };
    assert!(matches!(cli::cmd_eval(&wider), Err(CliError::Config(_))));
}

#[test]
fn robustness_trains_and_scores_three_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        epochs: 1,
        samples_per_class: 20,
        ..tiny(dir.path())
    };
    let csv = cli::cmd_robustness(&cfg).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 15);
    for v in ["app2s", "prototype", "euclidean_ap2s"] {
        let counts: Vec<&str> = rows.iter().filter(|r| r[0] == v).map(|r| r[1]).collect();
        assert_eq!(counts, ["0", "1", "2", "3", "4"], "{v}");
        assert!(dir.path().join(v).join("checkpoint.bin").is_file());
    }
    assert_eq!(fs::read_to_string(dir.path().join("robustness.csv")).unwrap(), csv);
    assert_eq!(fs::read_to_string(dir.path().join("report.txt")).unwrap().lines().count(), 3);

    // the saved checkpoints can be scored again by reference
    let again = RunConfig {
        out: dir.path().join("again"),
        models: Some(vec![ModelRef {
            name: "app2s".into(),
            checkpoint: dir.path().join("app2s").join("checkpoint.bin"),
        }]),
        ..cfg.clone()
    };
    let rerun = cli::cmd_robustness(&again).unwrap();
    let first_five: Vec<&str> = csv.lines().take(6).collect();
    assert_eq!(rerun.lines().collect::<Vec<_>>(), first_five);
}

#[test]
fn robustness_rejects_empty_lists() {
    let dir = tempfile::tempdir().unwrap();
    let none = RunConfig {
        models: Some(vec![]),
        ..tiny(dir.path())
    };
    assert!(matches!(cli::cmd_robustness(&none), Err(CliError::Config(_))));
    let no_grid = RunConfig {
        outlier_grid: vec![],
        ..tiny(dir.path())
    };
    assert!(matches!(cli::cmd_robustness(&no_grid), Err(CliError::Config(_))));
}

fn flipped_mobius(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    // sign error in the cross term
    let xy: f64 = -x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let x2: f64 = x.iter().map(|a| a * a).sum();
    let y2: f64 = y.iter().map(|a| a * a).sum();
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    x.iter()
        .zip(y)
        .map(|(a, b)| ((1.0 + 2.0 * c * xy + c * y2) * a + (1.0 - c * x2) * b) / den)
        .collect()
}

#[test]
fn verify_passes_and_catches_a_broken_addition() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let report = cli::cmd_verify(&cfg).unwrap();
    let (summary, checks) = report.trim_end().rsplit_once('\n').map(|(a, b)| (b, a)).unwrap();
    assert_eq!(summary, "19 checks, 0 failed");
    assert!(checks.lines().all(|l| l.starts_with("PASS ") && l.contains("tolerance=")), "{report}");

    let err = cli::verify_with(&cfg, flipped_mobius).unwrap_err();
    assert_eq!(err.class(), "verify");
    let written = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(written.lines().any(|l| l.starts_with("FAIL ")));
    // the reference passes what the mutant fails
    let sample = verify::reference_mobius(&[0.1, 0.2], &[0.3, -0.1], 0.7);
    assert_ne!(sample, flipped_mobius(&[0.1, 0.2], &[0.3, -0.1], 0.7));
}

#[test]
fn config_files_are_strict_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"seed": 1, "n_classes": 10, "warmup": 3}"#).unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert_eq!(err.class(), "config");
    assert!(err.to_string().contains("warmup"));

    let out = dir.path().join("out");
    fs::write(&path, r#"{"seed": 1, "n_classes": 10, "samples_per_class": 4}"#).unwrap();
    let printed = cli::run_args([
        "gyro",
        "gen",
        "--config",
        path.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ])
    .unwrap();
    assert!(printed.starts_with("wrote 40 samples"));
    let echoed = RunConfig::load(&out.join("config.json")).unwrap();
    assert_eq!((echoed.seed, echoed.n_classes, echoed.out), (9, 10, out));
}

#[test]
fn parse_errors_and_help() {
    assert!(matches!(cli::run_args(["gyro", "fly"]), Err(CliError::Usage(_))));
    assert!(matches!(cli::run_args(["gyro"]), Err(CliError::Usage(_))));
    let help = cli::run_args(["gyro", "--help"]).unwrap();
    for cmd in ["gen", "train", "eval", "robustness", "verify"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn binary_exit_codes_and_error_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("fly").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"], "usage");

    let out = bin().args(["eval", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let line: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"], "io");
    assert!(line["message"].as_str().unwrap().contains("checkpoint"));

    let out = bin().args(["gen", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("wrote 1600 samples"));
}
