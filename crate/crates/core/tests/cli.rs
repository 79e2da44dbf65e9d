use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ppe_compliance::pipeline::REPORT_JSON_SCHEMA;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ppe-compliance"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_owned();
    ok(&["synthetic", "--dir", s(&root.join("ds"))]);
    Fixture {
        manifest: root.join("ds/manifest.json"),
        config: root.join("ds/config.json"),
        root,
        _dir: dir,
    }
}

fn validate(report: &Value) {
    let schema: Value = serde_json::from_str(REPORT_JSON_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn detect_writes_schema_valid_report() {
    let f = fixture();
    let out = f.root.join("report.json");
    ok(&["detect", "--manifest", s(&f.manifest), "--config", s(&f.config), "--out", s(&out)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    validate(&report);
}

#[test]
fn schema_rejects_a_broken_report() {
    let f = fixture();
    let out = f.root.join("report.json");
    ok(&["detect", "--manifest", s(&f.manifest), "--config", s(&f.config), "--out", s(&out)]);
    let mut report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    report["images"][0]["status"] = Value::from("maybe");
    let schema: Value = serde_json::from_str(REPORT_JSON_SCHEMA).unwrap();
    assert!(!jsonschema::validator_for(&schema).unwrap().is_valid(&report));
}

#[test]
fn evaluate_oracle_gives_full_marks() {
    let f = fixture();
    let report = f.root.join("report.json");
    let csv = f.root.join("metrics.csv");
    let json = f.root.join("metrics.json");
    ok(&["detect", "--manifest", s(&f.manifest), "--config", s(&f.config), "--out", s(&report)]);
    ok(&["evaluate", "--report", s(&report), "--manifest", s(&f.manifest), "--out", s(&json), "--csv", s(&csv)]);
    let table = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(table, "Step 1,DO,SO,IO,Mean\n100.0,100.0,100.0,100.0,100.0\n");
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(metrics["accuracies"]["mean"], 1.0);
    assert_eq!(metrics["mode"], "pairs");
}

#[test]
fn calibrate_output_feeds_detect() {
    let f = fixture();
    let thresholds = f.root.join("thresholds.json");
    let report = f.root.join("report.json");
    ok(&["calibrate", "--manifest", s(&f.manifest), "--config", s(&f.config), "--out", s(&thresholds)]);
    ok(&[
        "detect", "--manifest", s(&f.manifest), "--config", s(&f.config), "--out", s(&report),
        "--thresholds", s(&thresholds),
    ]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let step1 = report["thresholds"]["per_step"]["step1"].as_f64().unwrap();
    assert!(step1 > 0.5 && step1 < 1.0);
}

#[test]
fn roc_csv_has_header_and_sentinel() {
    let f = fixture();
    let report = f.root.join("report.json");
    let roc = f.root.join("roc.csv");
    ok(&["detect", "--manifest", s(&f.manifest), "--config", s(&f.config), "--out", s(&report)]);
    ok(&["roc", "--report", s(&report), "--manifest", s(&f.manifest), "--out", s(&roc), "--step", "step1"]);
    let text = std::fs::read_to_string(&roc).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("threshold,tpr,fpr"));
    assert_eq!(lines.next(), Some("inf,0,0"));
    assert_eq!(text.lines().last().unwrap().split(',').skip(1).collect::<Vec<_>>(), ["1", "1"]);
}

#[test]
fn spec_uses_config_llm_and_cache() {
    let f = fixture();
    let mut config: Value = serde_json::from_str(&std::fs::read_to_string(&f.config).unwrap()).unwrap();
    let cache = f.root.join("spec-cache.json");
    config["cache_path"] = Value::from(s(&cache));
    let config_path = f.root.join("config-cache.json");
    std::fs::write(&config_path, config.to_string()).unwrap();
    let out = ok(&["spec", "--scene", "Seafood Factory", "--config", s(&config_path)]);
    let spec: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(spec["items"].as_array().unwrap().len(), 5);
    assert_eq!(spec["provenance"], "llm-generated");
    assert!(cache.exists());
    let again: Value =
        serde_json::from_slice(&ok(&["spec", "--scene", "seafood factory", "--config", s(&config_path)]).stdout)
            .unwrap();
    assert_eq!(again["provenance"], "cache");
    let refreshed: Value = serde_json::from_slice(
        &ok(&["spec", "--scene", "seafood factory", "--refresh", "--config", s(&config_path)]).stdout,
    )
    .unwrap();
    assert_eq!(refreshed["provenance"], "llm-generated");
}

#[test]
fn vqa_scores_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("answers.jsonl");
    std::fs::write(
        &input,
        concat!(
            r#"{"question":"Is the worker wearing a mask?","answer":"yes","prediction":"Yes."}"#, "\n",
            r#"{"question":"What does the mask do?","answer":"prevent airborne particles","prediction":"It can prevent airborne particles, bacteria, and viruses."}"#, "\n",
        ),
    )
    .unwrap();
    let out = ok(&["vqa", "--input", s(&input)]);
    let scores: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(scores["exact_match"], 0.5);
    assert_eq!(scores["contains"], 1.0);
}

#[test]
fn convert_coco_produces_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    image::RgbImage::new(64, 64).save(images.join("a.png")).unwrap();
    let coco = dir.path().join("coco.json");
    std::fs::write(
        &coco,
        r#"{
          "images": [{"id": 7, "file_name": "a.png", "scene": "hospital"}],
          "categories": [{"id": 1, "name": "person"}, {"id": 2, "name": "Gloves"}],
          "annotations": [
            {"image_id": 7, "category_id": 1, "bbox": [4, 4, 30, 50]},
            {"image_id": 7, "category_id": 2, "bbox": [6, 30, 8, 8],
             "attributes": {"do": "blue", "so": "latex", "io": "virus-proof"}},
            {"image_id": 7, "category_id": 2, "bbox": [50, 50, 8, 8]}
          ]
        }"#,
    )
    .unwrap();
    let manifest = dir.path().join("manifest.json");
    let out = ok(&["convert-coco", "--coco", s(&coco), "--out", s(&manifest)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not on any person"));
    let loaded = ppe_compliance::pipeline::load_manifest(&manifest).unwrap();
    let persons = loaded.images[0].persons.as_ref().unwrap();
    assert_eq!(persons.len(), 1);
    assert_eq!(persons[0].items[0].name, "gloves");
}

#[test]
fn unknown_flag_exits_2_with_usage() {
    let out = run(&["detect", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn module_error_is_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = run(&["detect", "--manifest", s(&missing), "--config", s(&missing), "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io-error");
}

#[test]
fn invalid_manifest_names_the_record() {
    let f = fixture();
    let mut manifest: Value = serde_json::from_str(&std::fs::read_to_string(&f.manifest).unwrap()).unwrap();
    manifest["images"][1]["persons"][0]["box"]["w"] = Value::from(0);
    let bad = f.root.join("ds/bad.json");
    std::fs::write(&bad, manifest.to_string()).unwrap();
    let out = run(&["detect", "--manifest", s(&bad), "--config", s(&f.config), "--out", s(&f.root.join("r.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "validation-error");
    assert!(err["error"]["message"].as_str().unwrap().contains("record 1"), "{err}");
}
