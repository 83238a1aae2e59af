use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sticker-rank"))
}

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml")
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

/// Generates 12 records and trains two epochs on them.
fn trained(dir: &Path) -> (String, String) {
    let data = dir.join("data").to_string_lossy().into_owned();
    let model = dir.join("run").to_string_lossy().into_owned();
    let cfg = config().to_string_lossy().into_owned();
    let small = ["--set", "synthetic.n_samples=12", "--set", "train.max_epochs=2", "--set", "train.batch_size=6"];
    let mut args = vec!["--config", &cfg];
    args.extend(small);
    let o = run(&[&args[..], &["gen-data", "--out", &data]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&[&args[..], &["train", "--data", &data, "--out", &model]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    (data, model)
}

#[test]
fn train_eval_predict_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = trained(tmp.path());
    let run_dir = Path::new(&model);
    for f in ["model.ckpt", "metrics.jsonl", "timing.jsonl", "config.toml", "summary.json"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }

    let o = run(&["eval", "--model", &model, "--data", &data]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["n_samples"], 12);
    assert!(report["map"].as_f64().unwrap() > 0.0);
    assert!(stderr(&o).contains("resolved config:"));
    assert!(stderr(&o).contains("[model]"));

    let out = tmp.path().join("analysis");
    let o = run(&[
        "analyze",
        "--model",
        &model,
        "--data",
        &data,
        "--out",
        out.to_str().unwrap(),
        "--sweep",
        "history",
        "--sweep",
        "utterances",
        "--dump-attention",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.json", "stats.json", "sweep-history.csv", "sweep-utterances.csv", "attention.jsonl"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("sweep-history.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,map,r_at_1,r_at_2,r_at_5"));
    assert_eq!(csv.lines().count(), 1 + 4);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["bucket_table"].is_array());
    let lines = std::fs::read_to_string(out.join("attention.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);
}

#[test]
fn predict_marks_empty_history() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = trained(tmp.path());
    let manifest = std::fs::read_to_string(Path::new(&data).join("manifest.jsonl")).unwrap();
    let (with, without) = {
        let lines: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let empty = lines.iter().position(|r| r["history"].as_array().is_none_or(|h| h.is_empty())).unwrap();
        let full = lines.iter().position(|r| r["history"].as_array().is_some_and(|h| !h.is_empty())).unwrap();
        (full + 1, empty + 1)
    };
    let o = run(&["predict", "--model", &model, "--data", &data, "--record", &without.to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("gate path: no-history"), "{text}");
    assert_eq!(text.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 10);
    assert_eq!(text.matches("(truth)").count(), 1);

    let o = run(&["predict", "--model", &model, "--data", &data, "--record", &with.to_string()]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("no-history"));
}

#[test]
fn most_selected_needs_no_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = config();
    let o = run(&["--config", cfg.to_str().unwrap(), "gen-data", "--out", data.to_str().unwrap()]);
    assert!(o.status.success());
    let o = run(&["--memory-variant", "most-selected", "eval", "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["n_samples"], 64);
    let o = run(&["eval", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));

    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));

    let o = run(&["--ablation", "nonsense", "gen-data", "--out", "unused"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["--set", "train.no_such_key=1", "gen-data", "--out", "unused"]);
    assert_eq!(o.status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = config();
    let cfg = cfg.to_str().unwrap();
    assert!(run(&["--config", cfg, "--set", "synthetic.n_samples=4", "gen-data", "--out", data.to_str().unwrap()])
        .status
        .success());

    // Non-finite loss.
    let o = run(&[
        "--config",
        cfg,
        "--set",
        "train.lr=1e300",
        "--set",
        "train.max_epochs=3",
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    // Malformed manifest.
    let manifest = data.join("manifest.jsonl");
    let mut text = std::fs::read_to_string(&manifest).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&manifest, text).unwrap();
    let o = run(&["--config", cfg, "train", "--data", data.to_str().unwrap(), "--out", tmp.path().join("r2").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));
}

#[test]
fn same_seed_same_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config();
    let mut manifests = Vec::new();
    for (name, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let dir = tmp.path().join(name);
        let o = run(&["--config", cfg.to_str().unwrap(), "--seed", seed, "gen-data", "--out", dir.to_str().unwrap()]);
        assert!(o.status.success());
        manifests.push(std::fs::read(dir.join("manifest.jsonl")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
    assert_ne!(manifests[0], manifests[2]);
}
