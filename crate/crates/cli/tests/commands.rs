use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nrsfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nrsfm"))
        .current_dir(dir)
        .env_remove("NRSFM_OUT_DIR")
        .env_remove("NRSFM_THREADS")
        .args(args)
        .output()
        .expect("spawn nrsfm")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nrsfm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_DATA: &[&str] = &[
    "generate", "-o", "data.json", "--keypoints", "8", "--basis-dim", "2", "--shapes", "6",
    "--views-per-shape", "5", "--p-occ", "0.1", "--seed", "1",
];

const SMALL_MODEL: &[&str] = &["--width", "16", "--bottleneck", "8", "--blocks", "1", "--batch-size", "8"];

fn train(dir: &Path, out: &str, extra: &[&str]) -> String {
    let args = [&["train", "-d", "data.json", "-o", out][..], SMALL_MODEL, extra].concat();
    ok(dir, &args)
}

#[test]
fn generate_writes_a_versioned_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), SMALL_DATA);
    let v = json(&tmp.path().join("data.json"));
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["kind"], "dataset");
    assert_eq!(v["views"].as_array().unwrap().len(), 30);
    assert!(v["ground_truth"].is_object());
}

#[test]
fn out_dir_prefixes_relative_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir(tmp.path().join("runs")).unwrap();
    ok(tmp.path(), &[&["--out-dir", "runs"][..], SMALL_DATA].concat());
    assert!(tmp.path().join("runs/data.json").exists());
}

#[test]
fn train_eval_reconstruct_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, SMALL_DATA);
    train(dir, "model.json", &["--epochs", "2", "--log", "steps.jsonl"]);
    let ckpt = json(&dir.join("model.json"));
    assert_eq!(ckpt["kind"], "checkpoint");
    assert_eq!(ckpt["epoch"], 2);
    let report = json(&dir.join("model.json.report.json"));
    assert_eq!(report["kind"], "train_report");
    assert_eq!(report["report"]["epochs"].as_array().unwrap().len(), 2);

    let log = std::fs::read_to_string(dir.join("steps.jsonl")).unwrap();
    let events: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.iter().filter(|e| e["event"] == "epoch").count(), 2);
    assert!(events.iter().any(|e| e["event"] == "step"));

    let table = ok(dir, &["eval", "-c", "model.json", "-d", "data.json", "--report", "eval.json"]);
    assert!(table.contains("MPJPE"));
    let eval = json(&dir.join("eval.json"));
    assert_eq!(eval["kind"], "eval_report");
    assert!(eval["models"][0]["metrics"]["mean_mpjpe"].as_f64().unwrap().is_finite());

    ok(
        dir,
        &["reconstruct", "-c", "model.json", "--dataset", "data.json", "--index", "3", "--ply-canonical", "c.ply", "--json", "r.json"],
    );
    let ply = std::fs::read_to_string(dir.join("c.ply")).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0\n"));
    assert!(ply.contains("element vertex 8\n"));
    let rec = json(&dir.join("r.json"));
    assert_eq!(rec["alpha"].as_array().unwrap().len(), 10);
    assert_eq!(rec["theta"].as_array().unwrap().len(), 3);
}

#[test]
fn resume_continues_the_epoch_count() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, SMALL_DATA);
    train(dir, "a.json", &["--epochs", "1"]);
    ok(dir, &["train", "-d", "data.json", "-o", "b.json", "--resume", "a.json", "--epochs", "3"]);
    let b = json(&dir.join("b.json"));
    assert_eq!(b["epoch"], 3);
    let report = json(&dir.join("b.json.report.json"));
    assert_eq!(report["report"]["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(report["resumed_from"], "a.json");
}

#[test]
fn eval_compares_several_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, SMALL_DATA);
    train(dir, "base.json", &["--epochs", "1", "--variant", "base"]);
    train(dir, "full.json", &["--epochs", "1"]);
    let table = ok(dir, &["eval", "-c", "base.json", "full.json", "-d", "data.json", "--no-depth-flip"]);
    assert!(table.contains("base.json") && table.contains("full.json"));
}

#[test]
fn sweep_writes_json_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = [
        &[
            "sweep", "-o", "sweep.json", "--csv", "sweep.csv", "--keypoints", "8", "--basis-dim", "2", "--shapes", "4",
            "--views-per-shape", "4", "--sigmas", "0,0.01", "--p-occs", "0", "--epochs", "1",
        ][..],
        SMALL_MODEL,
    ]
    .concat();
    ok(dir, &args);
    let v = json(&dir.join("sweep.json"));
    assert_eq!(v["kind"], "sweep");
    assert_eq!(v["settings"][0]["mpjpe"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn oracles_and_feasibility() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["generate", "--rigid", "-o", "rigid.json", "--keypoints", "10", "--shapes", "1", "--views-per-shape", "5"]);
    let text = ok(dir, &["oracle-rigid", "-d", "rigid.json", "--ply", "s.ply"]);
    assert!(text.contains("residual"));
    assert!(dir.join("s.ply").exists());

    ok(dir, SMALL_DATA);
    let text = ok(dir, &["oracle-fit", "-d", "data.json", "--index", "0"]);
    assert!(text.contains("residual"));

    let v: Value = serde_json::from_str(&ok(dir, &["feasibility", "--views", "1", "--keypoints", "10", "--basis-dim", "4", "--json"])).unwrap();
    assert_eq!(v["feasible"], true);
    let v: Value = serde_json::from_str(&ok(dir, &["feasibility", "--views", "1", "--keypoints", "4", "--basis-dim", "4", "--json"])).unwrap();
    assert_eq!(v["feasible"], false);
}

#[test]
fn exit_codes_classify_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // usage errors
    assert_eq!(nrsfm(dir, &["train"]).status.code(), Some(2));
    assert_eq!(nrsfm(dir, &["generate", "-o", "x.json", "--basis-dim", "0"]).status.code(), Some(2));
    // data errors
    assert_eq!(nrsfm(dir, &["eval", "-c", "missing.json", "-d", "missing.json"]).status.code(), Some(3));
    std::fs::write(dir.join("bad.json"), "{\"schema_version\": 9, \"kind\": \"dataset\"}").unwrap();
    let out = nrsfm(dir, &["train", "-d", "bad.json", "-o", "m.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
    ok(dir, SMALL_DATA);
    train(dir, "base.json", &["--epochs", "1"]);
    // the generated data declares no root keypoint
    let out = nrsfm(dir, &["eval", "-c", "base.json", "-d", "data.json", "--centering", "root-joint"]);
    assert_eq!(out.status.code(), Some(3));
    // divergence
    let out = nrsfm(dir, &[&["train", "-d", "data.json", "-o", "m.json", "--epochs", "3", "--lr", "1e6"][..], SMALL_MODEL].concat());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
