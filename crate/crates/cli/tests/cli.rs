use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn hotspot(out_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hotspot"))
        .args(args)
        .env("HOTSPOT_OUT_ROOT", out_root)
        .output()
        .expect("spawn hotspot")
}

fn run_dir(out: &Output) -> PathBuf {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error record");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn write_labels_and_preds(dir: &Path) -> (PathBuf, PathBuf) {
    let manifest = dir.join("manifest.csv");
    fs::write(&manifest, "path,label\nimages/a.png,1\nimages/b.png,0\nimages/c.png,1\nimages/d.png,0\n").unwrap();
    let preds = dir.join("predictions.csv");
    fs::write(&preds, "id,label,p0,p1\na,1,0.2,0.8\nb,0,0.9,0.1\nc,0,0.6,0.4\nd,1,0.45,0.55\n").unwrap();
    (manifest, preds)
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .map(|r| r.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

#[test]
fn evaluate_writes_metrics_and_roc() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, preds) = write_labels_and_preds(tmp.path());
    let out_root = tmp.path().join("out");
    let out = hotspot(
        &out_root,
        &["evaluate", "--preds", preds.to_str().unwrap(), "--labels", manifest.to_str().unwrap(), "--seed", "4"],
    );
    let dir = run_dir(&out);
    assert!(dir.starts_with(&out_root));
    let name = dir.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with("evaluate-") && name.ends_with("-4"), "{name}");
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["accuracy"], 0.5);
    assert_eq!(m["counts"]["tp"], 1);
    assert_eq!(m["counts"]["fn"], 1);
    assert_eq!(m["auc"], 0.75);
    let roc = fs::read_to_string(dir.join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
    assert!(roc.trim_end().ends_with("-inf,1,1"));
    assert!(dir.join("config.json").is_file());
}

#[test]
fn unknown_flag_is_a_usage_error_naming_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hotspot(tmp.path(), &["evaluate", "--bogus-flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["kind"], "usage");
    assert_eq!(rec["flag"], "--bogus-flag");
    assert!(rec["message"].as_str().unwrap().contains("--bogus-flag"));
}

#[test]
fn unknown_subcommand_and_bad_config_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(hotspot(tmp.path(), &["train-everything"]).status.code(), Some(2));
    let (manifest, preds) = write_labels_and_preds(tmp.path());
    let (m, p) = (manifest.to_str().unwrap(), preds.to_str().unwrap());
    let out = hotspot(tmp.path(), &["evaluate", "--preds", p, "--labels", m, "--set", "train.warmup=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("warmup"));
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"loss": {"beta": -1.0}}"#).unwrap();
    let out = hotspot(tmp.path(), &["evaluate", "--preds", p, "--labels", m, "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(entries(tmp.path()).iter().filter(|e| e.starts_with("evaluate")).count(), 0);
}

#[test]
fn runtime_failure_exits_1_and_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let out_root = tmp.path().join("out");
    let (manifest, _) = write_labels_and_preds(tmp.path());
    let missing = tmp.path().join("missing.csv");
    let out = hotspot(
        &out_root,
        &["evaluate", "--preds", missing.to_str().unwrap(), "--labels", manifest.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out);
    assert_eq!(rec["kind"], "runtime");
    assert_eq!(rec["subcommand"], "evaluate");
    assert!(entries(&out_root).is_empty(), "{:?}", entries(&out_root));
}

#[test]
fn help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["isolate", "--help"][..]] {
        let out = hotspot(tmp.path(), args);
        assert_eq!(out.status.code(), Some(0));
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn ablate_renders_rows_in_order_and_names_missing_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, preds) = write_labels_and_preds(tmp.path());
    let m = manifest.to_str().unwrap();
    let full = format!("full={}", preds.display());
    let dir = run_dir(&hotspot(tmp.path(), &["ablate", "--labels", m, "--run", &full, "--run", &full.replacen("full", "regular", 1)]));
    let md = fs::read_to_string(dir.join("ablation.md")).unwrap();
    let rows: Vec<&str> = md.lines().skip(2).collect();
    assert_eq!(rows, ["| full | 0.50 | 0.50 | 0.50 | 0.50 | 0.50 |", "| regular | 0.50 | 0.50 | 0.50 | 0.50 | 0.50 |"]);
    let ghost = format!("ghost={}", tmp.path().join("nope.csv").display());
    let out = hotspot(tmp.path(), &["ablate", "--labels", m, "--run", &ghost]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("ghost"));
}

#[test]
fn gen_data_then_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let data = run_dir(&hotspot(tmp.path(), &["gen-data", "--n-images", "6", "--size", "48", "--seed", "2"]));
    assert!(data.join("manifest.csv").is_file());
    assert_eq!(entries(&data.join("images")).len(), 6);
    let d = data.to_str().unwrap();
    for method in ["kmeans_lab", "kmeans_pv", "otsu"] {
        let dir = run_dir(&hotspot(tmp.path(), &["baseline", "--data", d, "--method", method, "--only-anomalous"]));
        let masks = entries(&dir).into_iter().filter(|e| e.starts_with("mask_")).count();
        assert_eq!(masks, 3, "{method}");
        let report = fs::read_to_string(dir.join("dice_report.csv")).unwrap();
        assert_eq!(report.lines().count(), 4, "{method}");
    }
    let out = hotspot(tmp.path(), &["baseline", "--data", d, "--method", "hsv"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = run_dir(&hotspot(
        tmp.path(),
        &["baseline", "--data", d, "--method", "hsv", "--lower", "0,0,0", "--upper", "360,1,1"],
    ));
    assert!(dir.join("dice_report.csv").is_file());
    let out = hotspot(tmp.path(), &["baseline", "--data", d, "--method", "watershed"]);
    assert_eq!(error_record(&out)["flag"], "--method");
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        r#"{
  "encoder": {"backbone": "tiny", "projection_dim": 16},
  "predictor": {"hidden_dim": 8},
  "train": {"batch_size": 4, "epochs": 1},
  "finetune": {"epochs": 1, "batch_size": 4},
  "synthetic": {"n_images": 8, "image_size": [40, 40]}
}"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut v = args.to_vec();
        v.extend(["--config", c, "--seed", "1"]);
        run_dir(&hotspot(tmp.path(), &v))
    };
    let data = run(&["gen-data"]);
    let d = data.to_str().unwrap();
    let ssl = run(&["train-ssl", "--data", d]);
    let history = fs::read_to_string(ssl.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,"));
    assert_eq!(history.lines().count(), 2);
    let ck = ssl.join("checkpoint.json");
    let a = run(&["finetune", "--data", d, "--checkpoint", ck.to_str().unwrap()]);
    let b = run(&["finetune", "--data", d]);
    let (ma, mb) = (a.join("classifier.json"), b.join("classifier.json"));
    let cls = run(&[
        "classify",
        "--data",
        d,
        "--model",
        ma.to_str().unwrap(),
        "--second",
        mb.to_str().unwrap(),
        "--validation",
        d,
    ]);
    let w: Value = serde_json::from_str(&fs::read_to_string(cls.join("ensemble.json")).unwrap()).unwrap();
    assert_eq!(w["source"], "grid_search");
    let preds = cls.join("predictions.csv");
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 9);
    let iso = run(&["isolate", "--data", d, "--model", ma.to_str().unwrap(), "--only-anomalous", "--overlay"]);
    let files = entries(&iso);
    for prefix in ["heatmap_", "mask_", "regions_", "overlay_"] {
        assert_eq!(files.iter().filter(|f| f.starts_with(prefix)).count(), 4, "{prefix}");
    }
    let manifest = data.join("manifest.csv");
    let ev = run(&["evaluate", "--preds", preds.to_str().unwrap(), "--labels", manifest.to_str().unwrap()]);
    assert!(fs::metadata(ev.join("metrics.json")).unwrap().len() > 0);
}
