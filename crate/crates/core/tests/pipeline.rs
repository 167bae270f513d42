mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use confguide::pipeline::{self, RunConfig, StageOptions};
use confguide::CalibrationResult;
use serde_json::Value;

use common::copy_demo;

fn confguide(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confguide"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Three single-label calibration cases (positive scores 0.9/0.6/0.3) and two
/// test cases, with a quarter-step lambda grid.
fn tiny_fixture(dir: &Path) -> PathBuf {
    fs::create_dir_all(dir.join("img")).unwrap();
    fs::write(dir.join("schema.json"), r#"["Edema"]"#).unwrap();
    fs::write(
        dir.join("scores.csv"),
        "case_id,Edema\ncal1,0.9\ncal2,0.6\ncal3,0.3\ntest1,0.8\ntest2,0.2\n",
    )
    .unwrap();
    fs::write(
        dir.join("labels.csv"),
        "case_id,Edema\ncal1,1\ncal2,1\ncal3,1\ntest1,1\ntest2,0\n",
    )
    .unwrap();
    let mut manifest = Vec::new();
    for (id, split) in [
        ("cal1", "calibration"),
        ("cal2", "calibration"),
        ("cal3", "calibration"),
        ("test1", "test"),
        ("test2", "test"),
    ] {
        fs::write(dir.join(format!("img/{id}.png")), b"\x89PNG\r\n\x1a\nstub").unwrap();
        manifest.push(serde_json::json!({"case_id": id, "image": format!("img/{id}.png"), "split": split}));
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    let config = dir.join("confguide.toml");
    fs::write(
        &config,
        r#"
alpha = 0.5
lambda_grid = [0.0, 0.25, 0.5, 0.75, 1.0]
configs = ["crc", "confguide"]

[reviewer]
kind = "mock-echo"
model_id = "echo"
"#,
    )
    .unwrap();
    config
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn calibrate_writes_hand_case_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_fixture(tmp.path());
    let out = confguide(&config, &["calibrate"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let result: CalibrationResult =
        serde_json::from_value(read_json(&tmp.path().join("out/calibration.json"))).unwrap();
    assert_eq!(result.lambda_hat, 0.5);
    assert!(!result.vacuous);
    assert_eq!(result.n_calibration, 3);
}

#[test]
fn alpha_one_selects_grid_minimum() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_fixture(tmp.path());
    let out = confguide(&config, &["--alpha", "1.0", "calibrate"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = read_json(&tmp.path().join("out/calibration.json"));
    assert_eq!(v["lambda_hat"], 0.0);
}

#[test]
fn strict_exits_nonzero_only_when_vacuous() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_fixture(tmp.path());
    let out = confguide(&config, &["--alpha", "0.1", "calibrate", "--strict"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(read_json(&tmp.path().join("out/calibration.json"))["vacuous"], true);
    let out = confguide(&config, &["--alpha", "0.1", "calibrate"]);
    assert!(out.status.success());
    let out = confguide(&config, &["calibrate", "--strict"]);
    assert!(out.status.success());
}

#[test]
fn missing_scores_path_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_fixture(tmp.path());
    fs::remove_file(tmp.path().join("scores.csv")).unwrap();
    let out = confguide(&config, &["calibrate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("scores.csv"), "{}", stderr(&out));
}

#[test]
fn missing_upstream_stage_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_fixture(tmp.path());
    for (stage, upstream) in [("predict", "calibrate"), ("guide", "predict"), ("simulate", "predict"), ("evaluate", "simulate")] {
        let out = confguide(&config, &[stage]);
        assert!(!out.status.success(), "{stage} should fail");
        assert!(
            stderr(&out).contains(&format!("`{upstream}`")),
            "{stage}: {}",
            stderr(&out)
        );
    }
}

#[test]
fn simulate_confguide_requires_guidance() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_fixture(tmp.path());
    assert!(confguide(&config, &["calibrate"]).status.success());
    assert!(confguide(&config, &["predict"]).status.success());
    let out = confguide(&config, &["simulate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("`guide`"), "{}", stderr(&out));
    let out = confguide(&config, &["--configs", "crc", "simulate"]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn full_run_produces_report_with_both_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_fixture(tmp.path());
    let out = confguide(&config, &["run"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = read_json(&tmp.path().join("out/report.json"));
    let rows: Vec<&str> = report["comparison"]["overall"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["config"].as_str().unwrap())
        .collect();
    assert_eq!(rows, ["CRC", "ConfGuide"]);
    let md = fs::read_to_string(tmp.path().join("out/report.md")).unwrap();
    assert!(md.contains("| CRC |") && md.contains("| ConfGuide |"));
}

#[test]
fn sweep_selects_single_alpha_and_rejects_empty_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_fixture(tmp.path());
    let text = fs::read_to_string(&config).unwrap();
    fs::write(&config, format!("alpha_grid = [0.5]\n{text}")).unwrap();
    let out = confguide(&config, &["sweep"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let plateaus = read_json(&tmp.path().join("out/plateaus.json"));
    assert_eq!(plateaus[0]["alpha_lo"], 0.5);
    assert_eq!(plateaus[0]["selected"], true);
    let csv = fs::read_to_string(tmp.path().join("out/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("alpha,lambda_hat,risk,avg_set_size"));
    assert_eq!(csv.lines().count(), 2);

    fs::write(&config, format!("alpha_grid = []\n{text}")).unwrap();
    let out = confguide(&config, &["sweep"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("alpha grid is empty"));
}

#[test]
fn guide_rerun_is_served_from_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&copy_demo(tmp.path())).unwrap();
    let opts = StageOptions::default();
    pipeline::run_calibrate(&cfg, opts).unwrap();
    pipeline::run_predict(&cfg, opts).unwrap();
    let first = pipeline::run_guide(&cfg, opts).unwrap();
    assert!(first.endpoint_calls > 0);
    let bytes = fs::read(cfg.output_dir.join(pipeline::GUIDANCE_FILE)).unwrap();
    let second = pipeline::run_guide(&cfg, opts).unwrap();
    assert_eq!(second.endpoint_calls, 0);
    assert_eq!(second.records, first.records);
    assert_eq!(fs::read(cfg.output_dir.join(pipeline::GUIDANCE_FILE)).unwrap(), bytes);
}

#[test]
fn guide_fails_up_front_on_unreadable_image() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&copy_demo(tmp.path())).unwrap();
    let opts = StageOptions::default();
    pipeline::run_calibrate(&cfg, opts).unwrap();
    pipeline::run_predict(&cfg, opts).unwrap();
    let sets = pipeline::load_sets(&cfg.output_dir.join(pipeline::SETS_FILE)).unwrap();
    let flagged = sets.iter().find(|s| !s.is_empty()).unwrap();
    fs::remove_file(tmp.path().join(format!("images/{}.png", flagged.case_id))).unwrap();
    let err = format!("{:#}", pipeline::run_guide(&cfg, opts).unwrap_err());
    assert!(err.contains(&flagged.case_id), "{err}");
    assert!(!cfg.output_dir.join(pipeline::GUIDANCE_FILE).exists());
}

#[test]
fn changed_input_blocks_downstream_until_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_fixture(tmp.path());
    assert!(confguide(&config, &["calibrate"]).status.success());
    let scores = tmp.path().join("scores.csv");
    let text = fs::read_to_string(&scores).unwrap().replace("cal3,0.3", "cal3,0.35");
    fs::write(&scores, text).unwrap();
    let out = confguide(&config, &["predict"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("input `scores` changed"), "{}", stderr(&out));
    assert!(confguide(&config, &["--force", "predict"]).status.success());
}

#[test]
fn edited_output_blocks_downstream() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_fixture(tmp.path());
    assert!(confguide(&config, &["calibrate"]).status.success());
    let path = tmp.path().join("out/calibration.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"lambda_hat\": 0.5", "\"lambda_hat\": 0.75");
    fs::write(&path, text).unwrap();
    let out = confguide(&config, &["predict"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("calibration.json was modified"), "{}", stderr(&out));
}

#[test]
fn config_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "alpah = 0.1\n").unwrap();
    let out = confguide(&config, &["calibrate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("alpah"), "{}", stderr(&out));
}

#[test]
fn stages_are_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&copy_demo(tmp.path())).unwrap();
    let opts = StageOptions::default();
    pipeline::run_calibrate(&cfg, opts).unwrap();
    pipeline::run_predict(&cfg, opts).unwrap();
    pipeline::run_guide(&cfg, opts).unwrap();
    pipeline::run_simulate(&cfg, opts).unwrap();
    pipeline::run_evaluate(&cfg, opts).unwrap();
    let report = fs::read(cfg.output_dir.join(pipeline::REPORT_JSON)).unwrap();
    // rerunning an upstream stage with identical inputs keeps downstream fresh
    pipeline::run_predict(&cfg, opts).unwrap();
    pipeline::run_simulate(&cfg, opts).unwrap();
    pipeline::run_evaluate(&cfg, opts).unwrap();
    assert_eq!(fs::read(cfg.output_dir.join(pipeline::REPORT_JSON)).unwrap(), report);
}
