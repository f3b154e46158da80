use std::path::Path;
use std::process::{Command, Output};

fn sinklab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sinklab")).args(args).output().unwrap()
}

fn write_minimal_dump(path: &Path) {
    let dump = serde_json::json!({
        "header": {
            "format_version": 1,
            "model_name": "m",
            "layer_count": 1,
            "head_count": 1,
            "token_count": 1,
            "token_strings": ["[CLS]"],
            "common_token_positions": [0]
        },
        "attentions": [[[[1.0]]]]
    });
    std::fs::write(path, serde_json::to_vec(&dump).unwrap()).unwrap();
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr is empty");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

#[test]
fn analyze_minimal_dump() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("d.json");
    write_minimal_dump(&dump);
    let out_dir = dir.path().join("out");
    let out = sinklab(&["analyze", dump.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("layers.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let top1 = header.iter().position(|h| *h == "top1_degree").unwrap();
    assert_eq!(row[top1].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn malformed_dump_reports_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("d.json");
    std::fs::write(&dump, r#"{"header": {"format_version": 1}, "attentions": []}"#).unwrap();
    let out = sinklab(&["analyze", dump.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert!(err["error"]["kind"].is_string());
    assert!(err["error"]["message"].is_string());
}

#[test]
fn non_stochastic_dump_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("d.json");
    let body = serde_json::json!({
        "header": {
            "format_version": 1, "model_name": "m", "layer_count": 1, "head_count": 1,
            "token_count": 2, "token_strings": ["a", "b"], "common_token_positions": []
        },
        "attentions": [[[[0.5, 0.5], [0.9, 0.5]]]]
    });
    std::fs::write(&dump, body.to_string()).unwrap();
    let out = sinklab(&["analyze", dump.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert!(err["error"]["message"].as_str().unwrap().contains("row 1"), "{err}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(sinklab(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn quick_verify_passes() {
    let out = sinklab(&["verify", "--quick"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 6);
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn sweep_writes_tables_with_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    std::fs::write(&cfg, "degree_grid = [0.0, 0.5]\ndeviation_grid = [0.0]\nseeds = [0, 1]\n").unwrap();
    let out = sinklab(&["case-study", "sweep", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(rows.starts_with("sink_degree,deviation_scale,seed,interference"));
    assert_eq!(rows.lines().count(), 5);
    let summary = std::fs::read_to_string(dir.path().join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(dir.path().join("sweep_summary.json").is_file());
}

#[test]
fn trained_checkpoint_exports_a_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "strategies = [\"prescale\"]\nseeds = [0]\n\n[sequence]\ntrain_per_class = 4\ntest_per_class = 4\n\n\
         [stages]\nprobe_epochs = 1\nfinetune_epochs = 1\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = sinklab(&[
        "cl", "train", "--config", cfg.to_str().unwrap(), "--strategy", "prescale", "--out", ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = sinklab(&["export-heatmap", "--model", ckpt.to_str().unwrap(), "--input", "0,1,2,3,5,6,7,8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let body: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for class in body["classes"].as_array().unwrap() {
        let total: f64 = class["attention"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    let out = sinklab(&["export-heatmap", "--model", ckpt.to_str().unwrap(), "--input", "0,999"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "invalid_argument");
}
