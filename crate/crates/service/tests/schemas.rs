mod common;

use std::f64::consts::PI;

use common::*;
use compass_core::backbone::{BackboneConfig, ToyBackbone};
use compass_core::generation::{GenerationRequest, Generator, RequestObject};
use compass_core::geometry::{Box2D, Orientation};
use compass_core::training::Checkpoint;
use compass_service::engine::Engine;
use compass_service::ErrorBody;
use serde_json::{json, Value};

const SCHEMAS: [&str; 8] = [
    "generation-request",
    "generation-result",
    "job",
    "job-submission",
    "job-accepted",
    "error",
    "presets",
    "health",
];

/// The layout a scene editor produces for two objects with dials at 90 and
/// 270 degrees.
fn two_object_layout() -> GenerationRequest {
    let dial = |deg: f64| Orientation::yaw(deg * PI / 180.0).unwrap();
    let mut req = GenerationRequest::new(
        "a photo of a {horse} and a {jeep} on a road",
        vec![
            RequestObject {
                name: "horse".into(),
                theta: dial(90.0),
                tight_box: Some(Box2D::new(2.0, 10.0, 14.0, 22.0).unwrap()),
            },
            RequestObject {
                name: "jeep".into(),
                theta: dial(270.0),
                tight_box: Some(Box2D::new(17.0, 9.0, 31.0, 23.0).unwrap()),
            },
        ],
        7,
    );
    req.steps = 20;
    req
}

/// Key-sorted, two-space indented, trailing newline.
fn canonical(v: &Value) -> String {
    serde_json::to_string_pretty(v).unwrap() + "\n"
}

#[test]
fn every_schema_parses_and_is_versioned() {
    for name in SCHEMAS {
        let s = schema(name);
        let id = s["$id"].as_str().unwrap();
        assert!(id.starts_with("compass.") && id.ends_with("/1"), "{name}: {id}");
        // an empty object never satisfies a schema with required fields
        assert!(!validate(&s, &json!({})).is_empty(), "{name}");
    }
}

#[test]
fn golden_two_object_request_is_byte_identical() {
    let path = schema_dir().join("golden/two-object-request.json");
    let produced = canonical(&serde_json::to_value(two_object_layout()).unwrap());
    if std::env::var_os("COMPASS_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &produced).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap();
    assert_eq!(produced, golden);

    let v = golden_request();
    assert_valid("generation-request", &v);
    let thetas: Vec<f64> = v["objects"].as_array().unwrap().iter().map(|o| o["theta"].as_f64().unwrap()).collect();
    assert!((thetas[0] - 1.5707963).abs() < 1e-6);
    assert!((thetas[1] - 4.7123890).abs() < 1e-6);
    // the golden payload is accepted by the request parser unchanged
    let parsed = GenerationRequest::from_value(&v).unwrap();
    assert_eq!(parsed, two_object_layout());
}

#[test]
fn request_schema_and_parser_agree_on_bad_payloads() {
    let good = golden_request();
    let mut cases = Vec::new();
    let mut north = good.clone();
    north["objects"][0]["theta"] = json!("north");
    cases.push(north);
    let mut short_box = good.clone();
    short_box["objects"][1]["box"] = json!([1, 2, 3]);
    cases.push(short_box);
    let mut extra = good.clone();
    extra["colour"] = json!("red");
    cases.push(extra);
    let mut no_prompt = good.clone();
    no_prompt.as_object_mut().unwrap().remove("prompt");
    cases.push(no_prompt);
    let mut zero_steps = good;
    zero_steps["steps"] = json!(0);
    cases.push(zero_steps);
    for c in cases {
        assert!(!validate(&schema("generation-request"), &c).is_empty(), "schema accepted {c}");
        assert!(GenerationRequest::from_value(&c).is_err(), "parser accepted {c}");
    }
}

#[test]
fn generation_result_matches_schema() {
    let bb = ToyBackbone::new(BackboneConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::load(&untrained_checkpoint(dir.path())).unwrap();
    let weights = ck.weights();
    let mut req = two_object_layout();
    req.steps = 2;
    // one object without a box exercises the spawned path
    req.objects[1].tight_box = None;
    let out = Generator::new(&bb, &weights).generate(&req).unwrap();
    let v = serde_json::to_value(&out.result).unwrap();
    assert_valid("generation-result", &v);
    assert_eq!(v["objects"][1]["spawned"], json!(true));
}

#[test]
fn presets_and_errors_match_schema() {
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::load(&untrained_checkpoint(dir.path())).unwrap();
    let engine = Engine::new(&ck, None, &dir.path().join("data")).unwrap();
    let p = engine.presets();
    assert_valid("presets", &p);
    assert_eq!(p["default_padding"], json!(1.2));
    assert_eq!(p["max_objects"], json!(6));

    let body = ErrorBody::validation("request", &["objects[0].theta: bad".into(), "steps: bad".into()]).to_json();
    assert_valid("error", &body);
    assert_eq!(body["error"]["fields"][0]["field"], json!("request.objects[0].theta"));
    assert_valid("error", &ErrorBody::new("not_found", "job x").to_json());
}

#[test]
fn validator_rejects_what_it_should() {
    let s = json!({
        "type": "object",
        "required": ["a"],
        "additionalProperties": false,
        "properties": {
            "a": {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "integer"}, "maxItems": 2}]},
            "b": {"$ref": "#/$defs/pos"}
        },
        "$defs": {"pos": {"type": "number", "minimum": 0}}
    });
    assert!(validate(&s, &json!({"a": 1.5})).is_empty());
    assert!(validate(&s, &json!({"a": [1, 2], "b": 0})).is_empty());
    assert_eq!(validate(&s, &json!({"a": [1, 2, 3]})).len(), 1);
    assert_eq!(validate(&s, &json!({"a": [1.5]})).len(), 1);
    assert_eq!(validate(&s, &json!({"a": 1, "b": -1})).len(), 1);
    assert_eq!(validate(&s, &json!({"a": 1, "c": 0})).len(), 1);
    assert_eq!(validate(&s, &json!({})).len(), 1);
}
