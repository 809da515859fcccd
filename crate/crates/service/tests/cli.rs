mod common;

use std::path::Path;
use std::process::Output;

use common::*;
use compass_core::dataset::read_manifest;
use serde_json::{json, Value};

fn run(args: &[&str], cwd: &Path) -> Output {
    compass().args(args).current_dir(cwd).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(o.stdout.split(|b| *b == b'\n').next().unwrap()).unwrap()
}

fn stderr_error(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let last = text.lines().last().unwrap_or_default();
    let v: Value = serde_json::from_str(last).unwrap_or_else(|e| panic!("{e}: {text}"));
    assert_valid("error", &v);
    v
}

fn write(path: &Path, v: &Value) {
    std::fs::write(path, v.to_string()).unwrap();
}

#[test]
fn infer_writes_png_and_result_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    untrained_checkpoint(d);
    let mut req = golden_request();
    req["steps"] = json!(3);
    write(&d.join("req.json"), &req);

    let o = run(&["infer", "--config", "req.json", "--checkpoint", "ckpt", "--seed", "7", "--out", "img.png"], d);
    let out = stdout_json(&o);
    assert_eq!(out["result"], json!("img.json"));
    let png = std::fs::read(d.join("img.png")).unwrap();
    assert_eq!(&png[..4], b"\x89PNG");
    let result: Value = serde_json::from_str(&std::fs::read_to_string(d.join("img.json")).unwrap()).unwrap();
    assert_valid("generation-result", &result);
    assert_eq!(result["seed"], json!(7));
    assert_eq!(result["steps"], json!(3));

    let o = run(&["infer", "--config", "req.json", "--checkpoint", "ckpt", "--seed", "7", "--out", "again.png"], d);
    stdout_json(&o);
    assert_eq!(std::fs::read(d.join("again.png")).unwrap(), png);
}

#[test]
fn checkpoint_flag_beats_environment_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    untrained_checkpoint(d);
    let mut req = golden_request();
    req["steps"] = json!(2);
    req["checkpoint"] = json!("missing-from-config");
    write(&d.join("req.json"), &req);

    let o = run(&["infer", "--config", "req.json", "--out", "a.png"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_error(&o)["error"]["message"].as_str().unwrap().contains("missing-from-config"));

    let o = compass()
        .args(["infer", "--config", "req.json", "--out", "b.png"])
        .env("COMPASS_CHECKPOINT", "ckpt")
        .current_dir(d)
        .output()
        .unwrap();
    stdout_json(&o);

    let o = compass()
        .args(["infer", "--config", "req.json", "--out", "c.png", "--checkpoint", "ckpt"])
        .env("COMPASS_CHECKPOINT", "missing-from-env")
        .current_dir(d)
        .output()
        .unwrap();
    stdout_json(&o);
}

#[test]
fn invalid_request_is_a_machine_readable_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    untrained_checkpoint(d);
    let mut req = golden_request();
    req["objects"][1]["theta"] = json!("north");
    write(&d.join("req.json"), &req);
    let o = run(&["infer", "--config", "req.json", "--checkpoint", "ckpt"], d);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr_error(&o);
    assert_eq!(e["error"]["kind"], json!("validation"));
    assert_eq!(e["error"]["fields"][0]["field"], json!("objects[1].theta"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["infer", "--config", "x.json", "--bogus"],
        vec!["dataset", "compile", "--manifest", "m.jsonl", "--stage", "one", "--out", "o"],
        vec![],
    ] {
        let o = run(&args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn dataset_pipeline_and_stage_one_compile() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = stdout_json(&run(&["dataset", "gen", "--out", "ds", "--single", "6", "--multi", "5", "--seed", "3"], d));
    assert_eq!(g["records"], json!(11));

    stdout_json(&run(&["dataset", "augment", "--manifest", "ds/manifest.jsonl", "--out", "ds/all.jsonl", "--limit", "2"], d));
    let all = read_manifest(&d.join("ds/all.jsonl")).unwrap();
    assert_eq!(all.len(), 13);

    let r = stdout_json(&run(&["dataset", "review", "--manifest", "ds/all.jsonl"], d));
    assert!(r["counts"]["rendered_multi"].as_u64().unwrap() >= 1);

    let c = stdout_json(&run(&["dataset", "compile", "--manifest", "ds/all.jsonl", "--stage", "1", "--out", "s1.jsonl"], d));
    let s1 = read_manifest(&d.join("s1.jsonl")).unwrap();
    assert_eq!(c["records"], json!(s1.len()));
    assert!(!s1.is_empty());
    assert!(s1.iter().all(|r| r.objects.len() == 1));
    let s2 = read_manifest(&{
        stdout_json(&run(&["dataset", "compile", "--manifest", "ds/all.jsonl", "--stage", "2", "--out", "s2.jsonl"], d));
        d.join("s2.jsonl")
    })
    .unwrap();
    assert!(s2.iter().any(|r| r.objects.len() > 1));

    // explicit review decisions; unknown ids are rejected
    let first = &all[0].id;
    write(&d.join("dec.json"), &json!({ first.as_str(): "reject" }));
    stdout_json(&run(&["dataset", "review", "--manifest", "ds/all.jsonl", "--decisions", "dec.json", "--out", "rev.jsonl"], d));
    let rev = read_manifest(&d.join("rev.jsonl")).unwrap();
    assert_eq!(serde_json::to_value(rev[0].filter).unwrap(), json!("reject"));
    write(&d.join("dec.json"), &json!({"no-such-record": "keep"}));
    let o = run(&["dataset", "review", "--manifest", "ds/all.jsonl", "--decisions", "dec.json"], d);
    assert_eq!(o.status.code(), Some(1));
    stderr_error(&o);
}

#[test]
fn train_resume_and_eval_with_stub_clients() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stdout_json(&run(&["dataset", "gen", "--out", "ds", "--single", "8", "--multi", "4", "--seed", "1"], d));
    write(
        &d.join("train.json"),
        &json!({"stages": [{"stage": "1", "iterations": 4}, {"stage": "2", "iterations": 4}], "checkpoint_every": 2}),
    );
    let t = stdout_json(&run(
        &["train", "--preset", "toy", "--config", "train.json", "--manifest", "ds/manifest.jsonl", "--out", "ck",
          "--base-iterations", "4", "--until", "5"],
        d,
    ));
    assert_eq!(t["iteration"], json!(5));
    let t = stdout_json(&run(&["train", "--resume", "--manifest", "ds/manifest.jsonl", "--out", "ck"], d));
    assert_eq!(t["iteration"], json!(8));

    let e = stdout_json(&run(
        &["eval", "--checkpoint", "ck", "--stub-clients", "--limit", "3", "--steps", "2", "--out", "report"],
        d,
    ));
    assert_eq!(e["cases"], json!(3));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("report/report.json")).unwrap()).unwrap();
    assert!(report.is_object());
    let csv = std::fs::read_to_string(d.join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    // without stubs the external clients must be named
    let o = run(&["eval", "--checkpoint", "ck", "--out", "r2"], d);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["error"]["kind"], json!("config"));
}

#[test]
fn personalize_and_attention_dump() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    untrained_checkpoint(d);
    let mut img = compass_core::imaging::Canvas::new(32, 32);
    img.set(5, 5, 1.0);
    img.save(&d.join("subj.png")).unwrap();
    write(&d.join("p.json"), &json!({"subject_token": "sks", "class_name": "arrow", "steps": 2, "images": ["subj.png"]}));
    let p = stdout_json(&run(&["personalize", "--config", "p.json", "--checkpoint", "ckpt", "--out", "sks.adapters"], d));
    assert_eq!(p["prefix"], json!("subject.sks"));

    let mut req = golden_request();
    req["steps"] = json!(2);
    req["subjects"] = json!(["sks"]);
    write(&d.join("req.json"), &req);
    stdout_json(&run(
        &["infer", "--config", "req.json", "--checkpoint", "ckpt", "--adapters", "sks.adapters", "--out", "s.png"],
        d,
    ));

    // the subject's adapters must be supplied whenever the request names it
    let o = run(&["attn-dump", "--config", "req.json", "--checkpoint", "ckpt", "--out", "attn.json"], d);
    assert_eq!(o.status.code(), Some(1));
    let a = stdout_json(&run(
        &["attn-dump", "--config", "req.json", "--checkpoint", "ckpt", "--adapters", "sks.adapters", "--out", "attn.json"],
        d,
    ));
    assert!(a["records"].as_u64().unwrap() > 0);
    let dump: Value = serde_json::from_str(&std::fs::read_to_string(d.join("attn.json")).unwrap()).unwrap();
    assert_eq!(dump["schema"], json!("compass.attention-dump/1"));
}
