use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scs-supcon"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"{
  "n_classes": 4,
  "samples_per_class": 40,
  "content_dim": 4,
  "style_dim": 4,
  "observed_dim": 12,
  "class_gap": 5.0,
  "style_spread": 0.5,
  "noise_sigma": 0.1,
  "seed": 3
}"#;

fn small_config(loss: &str, lr: f64) -> String {
    format!(
        r#"{{
  "loss_kind": "{loss}",
  "model": {{ "encoder": [16], "partition": {{ "d_common": 6, "d_style": 2 }} }},
  "stage1": {{ "lr": {lr}, "epochs": 4, "batch_size": 32, "momentum": 0.9, "weight_decay": 0.0001 }},
  "stage2": {{ "lr": 0.5, "epochs": 5, "batch_size": 32 }},
  "seed": 5
}}"#
    )
}

/// A generated dataset and a config in a fresh directory.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(loss: &str) -> Self {
        Self::with_lr(loss, 0.1)
    }

    fn with_lr(loss: &str, lr: f64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("spec.json"), SMALL_SPEC).unwrap();
        fs::write(dir.path().join("config.json"), small_config(loss, lr)).unwrap();
        let o = run(&["generate", "--spec", p(&dir.path().join("spec.json")), "--out", p(&dir.path().join("data.csv"))]);
        assert!(o.status.success(), "{}", stderr(&o));
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn generate_preset_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = run(&["generate", "--spec", "easy", "--seed", "11", "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let header = fs::read_to_string(&a).unwrap().lines().next().unwrap().to_string();
    assert!(header.contains("label"), "{header}");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 11);
    assert!(manifest["outputs"][0]["hash"].as_str().unwrap().starts_with("sha256:"));
}

#[test]
fn generate_rejects_malformed_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    fs::write(&spec, "{ \"n_classes\": ").unwrap();
    let o = run(&["generate", "--spec", p(&spec), "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn train_writes_all_outputs() {
    let ws = Workspace::new("scs_supcon");
    let out = ws.path("run");
    let o = run(&["train", "--config", p(&ws.path("config.json")), "--data", p(&ws.path("data.csv")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("test accuracy"));
    for f in ["checkpoint.json", "trajectory.csv", "results.json", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let results: Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(results["loss_kind"], "scs_supcon");
    let acc = results["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(results["split"]["rows"], 160);
    assert_eq!(results["split"]["test_rows"], 32);
    // Header plus one row per epoch.
    assert_eq!(fs::read_to_string(out.join("trajectory.csv")).unwrap().lines().count(), 5);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn train_with_folds_reports_cross_validation() {
    let ws = Workspace::new("supcon");
    let out = ws.path("run");
    let o = run(&[
        "train",
        "--config",
        p(&ws.path("config.json")),
        "--data",
        p(&ws.path("data.csv")),
        "--out",
        p(&out),
        "--folds",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let results: Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(results["cross_validation"]["fold_accuracies"].as_array().unwrap().len(), 3);
}

#[test]
fn unknown_loss_kind_lists_valid_values() {
    let ws = Workspace::new("not_a_loss");
    let o = run(&["train", "--config", p(&ws.path("config.json")), "--data", p(&ws.path("data.csv")), "--out", p(&ws.path("run"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["supcon", "cs_supcon", "scs_supcon"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn divergent_training_exits_three() {
    let ws = Workspace::with_lr("scs_supcon", 1e9);
    let o = run(&["train", "--config", p(&ws.path("config.json")), "--data", p(&ws.path("data.csv")), "--out", p(&ws.path("run"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!ws.path("run/results.json").exists());
}

#[test]
fn sweep_writes_one_row_per_beta() {
    let ws = Workspace::new("scs_supcon");
    let out = ws.path("sweep.csv");
    let o = run(&[
        "sweep-beta",
        "--config",
        p(&ws.path("config.json")),
        "--data",
        p(&ws.path("data.csv")),
        "--betas",
        "0,0.001,0.01",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "beta,mean_accuracy,std_accuracy,seeds,mean_style_dist");
    assert_eq!(lines.len(), 4);
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[2].parse::<f64>().unwrap(), 0.0, "one seed has no spread: {line}");
        assert_eq!(cells[3], "1");
    }
}

#[test]
fn sweep_needs_two_betas() {
    let ws = Workspace::new("scs_supcon");
    let o = run(&[
        "sweep-beta",
        "--config",
        p(&ws.path("config.json")),
        "--data",
        p(&ws.path("data.csv")),
        "--betas",
        "0.01",
        "--out",
        p(&ws.path("sweep.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn search_defaults_to_thirty_trials() {
    let o = run(&["search", "--help"]);
    assert!(stdout(&o).contains("[default: 30]"), "{}", stdout(&o));
}

#[test]
fn search_never_sees_the_test_split() {
    let ws = Workspace::new("scs_supcon");
    let out = ws.path("search.json");
    let o = run(&[
        "search",
        "--config",
        p(&ws.path("config.json")),
        "--data",
        p(&ws.path("data.csv")),
        "--trials",
        "3",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["trials"], 3);
    assert_eq!(report["trial_log"].as_array().unwrap().len(), 3);
    assert_eq!(report["audit"]["test_rows_visible_to_search"], 0);
    assert_eq!(report["audit"]["test_rows"], 32);
    assert_eq!(report["audit"]["rows_visible_to_search"], 128);
    assert_eq!(report["reproduced"], true);
    let t0 = report["best"]["t0"].as_f64().unwrap();
    assert!((0.05..=0.2).contains(&t0));
}

#[test]
fn stats_on_method_comparison_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["stats", "--matrix", p(&fixture("method_comparison.csv")), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let cd = summary["report"]["cd"].as_f64().unwrap();
    assert!((cd - 8.76).abs() <= 0.01, "{cd}");
    let ranks = fs::read_to_string(dir.path().join("ranks.csv")).unwrap();
    assert_eq!(ranks.lines().nth(1).unwrap().split(',').nth(1).unwrap(), "SCS-SupCon");
    assert!(!dir.path().join("ttests.csv").exists());
    assert!(dir.path().join("manifest.json").is_file());
}

#[test]
fn stats_paired_tests_against_proposed() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "stats",
        "--matrix",
        p(&fixture("five_fold.csv")),
        "--proposed",
        "SCS-SupCon",
        "--out",
        p(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("ttests.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[0], "SCS-SupCon");
        assert!(cells[3].parse::<f64>().unwrap() < 0.05, "{row}");
    }
}

#[test]
fn stats_two_methods_compare_each_other() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    fs::write(&m, "method,a,b,c,d\nX,0.80,0.82,0.79,0.81\nY,0.75,0.76,0.74,0.77\n").unwrap();
    let o = run(&["stats", "--matrix", p(&m), "--out", p(&dir.path().join("out"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/ttests.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("X,Y,"));
}

#[test]
fn stats_needs_two_methods() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    fs::write(&m, "method,a,b\nX,0.8,0.9\n").unwrap();
    let o = run(&["stats", "--matrix", p(&m), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_groups_by_quantity() {
    let o = run(&["gradcheck", "--trials", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        for field in [" z ", " t' ", " b ", " network "] {
            assert!(line.contains(field), "{line}");
        }
        assert!(line.ends_with("PASS"), "{line}");
    }
}

#[test]
fn gradcheck_catches_corrupted_gradients() {
    let o = run(&["gradcheck", "--trials", "2", "--no-stack", "--corrupt-gradient"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).lines().all(|l| l.ends_with("FAIL")));
}
