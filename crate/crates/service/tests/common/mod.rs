#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use compass_autograd::ParamStore;
use compass_core::backbone::{BackboneConfig, ToyBackbone};
use compass_core::training::{Checkpoint, CheckpointMeta, TrainConfig};
use serde_json::Value;

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

pub fn schema(name: &str) -> Value {
    let p = schema_dir().join(format!("{name}.schema.json"));
    serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap()
}

/// Validates `v` against a JSON Schema using the keyword subset the shipped
/// schemas use. Unsupported keywords panic so a schema cannot silently rely
/// on one.
pub fn validate(schema: &Value, v: &Value) -> Vec<String> {
    let mut errs = Vec::new();
    check(schema, schema, v, "$", &mut errs);
    errs
}

fn type_ok(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_i64() || v.is_u64(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        other => panic!("unknown type {other}"),
    }
}

fn resolve<'a>(root: &'a Value, r: &str) -> &'a Value {
    let path = r.strip_prefix("#/").unwrap_or_else(|| panic!("only local refs: {r}"));
    path.split('/').fold(root, |node, key| &node[key])
}

fn check(root: &Value, s: &Value, v: &Value, at: &str, errs: &mut Vec<String>) {
    let Some(obj) = s.as_object() else {
        if s == &Value::Bool(false) {
            errs.push(format!("{at}: not allowed"));
        }
        return;
    };
    for (k, kw) in obj {
        match k.as_str() {
            "$schema" | "$id" | "title" | "description" | "$defs" => {}
            "$ref" => check(root, resolve(root, kw.as_str().unwrap()), v, at, errs),
            "type" => {
                let ok = match kw {
                    Value::String(t) => type_ok(t, v),
                    Value::Array(ts) => ts.iter().any(|t| type_ok(t.as_str().unwrap(), v)),
                    _ => panic!("bad type keyword"),
                };
                if !ok {
                    errs.push(format!("{at}: expected type {kw}, got {v}"));
                }
            }
            "const" => {
                if kw != v {
                    errs.push(format!("{at}: expected {kw}"));
                }
            }
            "enum" => {
                if !kw.as_array().unwrap().contains(v) {
                    errs.push(format!("{at}: {v} not in {kw}"));
                }
            }
            "properties" => {
                if let Some(o) = v.as_object() {
                    for (p, ps) in kw.as_object().unwrap() {
                        if let Some(x) = o.get(p) {
                            check(root, ps, x, &format!("{at}.{p}"), errs);
                        }
                    }
                }
            }
            "required" => {
                if let Some(o) = v.as_object() {
                    for r in kw.as_array().unwrap() {
                        if !o.contains_key(r.as_str().unwrap()) {
                            errs.push(format!("{at}: missing {r}"));
                        }
                    }
                }
            }
            "additionalProperties" => {
                if let Some(o) = v.as_object() {
                    let known = obj.get("properties").and_then(Value::as_object);
                    for (p, x) in o {
                        if known.is_some_and(|k| k.contains_key(p)) {
                            continue;
                        }
                        match kw {
                            Value::Bool(false) => errs.push(format!("{at}: unexpected property {p}")),
                            Value::Bool(true) => {}
                            sub => check(root, sub, x, &format!("{at}.{p}"), errs),
                        }
                    }
                }
            }
            "items" => {
                if let Some(a) = v.as_array() {
                    for (i, x) in a.iter().enumerate() {
                        check(root, kw, x, &format!("{at}[{i}]"), errs);
                    }
                }
            }
            "minItems" | "maxItems" => {
                if let Some(a) = v.as_array() {
                    let n = kw.as_u64().unwrap() as usize;
                    if (k == "minItems" && a.len() < n) || (k == "maxItems" && a.len() > n) {
                        errs.push(format!("{at}: {k} {n}, got {}", a.len()));
                    }
                }
            }
            "minLength" => {
                if let Some(s) = v.as_str() {
                    if s.chars().count() < kw.as_u64().unwrap() as usize {
                        errs.push(format!("{at}: shorter than {kw}"));
                    }
                }
            }
            "minimum" | "maximum" => {
                if let Some(x) = v.as_f64() {
                    let b = kw.as_f64().unwrap();
                    if (k == "minimum" && x < b) || (k == "maximum" && x > b) {
                        errs.push(format!("{at}: {k} {b}, got {x}"));
                    }
                }
            }
            "oneOf" | "anyOf" => {
                let passing = kw
                    .as_array()
                    .unwrap()
                    .iter()
                    .filter(|sub| validate_at(root, sub, v).is_empty())
                    .count();
                let ok = if k == "oneOf" { passing == 1 } else { passing >= 1 };
                if !ok {
                    errs.push(format!("{at}: {passing} branches of {k} match"));
                }
            }
            other => panic!("unsupported schema keyword {other}"),
        }
    }
}

fn validate_at(root: &Value, s: &Value, v: &Value) -> Vec<String> {
    let mut errs = Vec::new();
    check(root, s, v, "$", &mut errs);
    errs
}

pub fn assert_valid(name: &str, v: &Value) {
    let errs = validate(&schema(name), v);
    assert!(errs.is_empty(), "{name}: {errs:?}\n{v}");
}

/// Saves an untrained checkpoint into `dir`.
pub fn untrained_checkpoint(dir: &Path) -> PathBuf {
    let bb = ToyBackbone::new(BackboneConfig::default()).unwrap();
    let ck = Checkpoint {
        meta: CheckpointMeta::new(bb.config.clone(), TrainConfig::toy(), 0, 0),
        base: bb.init_base(0),
        compass: bb.init_compass(1, 0),
        adapters: bb.init_adapters("lora", 4, 0),
        optimizer_moments: ParamStore::new(),
        history: vec![],
    };
    let out = dir.join("ckpt");
    ck.save(&out).unwrap();
    out
}

pub fn compass() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_compass"));
    c.env_remove("COMPASS_CHECKPOINT");
    c
}

/// A `compass serve` child process on an ephemeral port; killed on drop.
pub struct Server {
    child: Child,
    pub base: String,
}

impl Server {
    pub fn start(checkpoint: &Path, data_dir: &Path) -> Self {
        let mut child = compass()
            .args(["serve", "--port", "0", "--checkpoint"])
            .arg(checkpoint)
            .arg("--data-dir")
            .arg(data_dir)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let v: Value = serde_json::from_str(&line).unwrap_or_else(|e| panic!("bad banner {line:?}: {e}"));
        Self {
            child,
            base: format!("http://{}", v["listening"].as_str().unwrap()),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// SIGKILL, as a crash would.
    pub fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn golden_request() -> Value {
    let p = schema_dir().join("golden/two-object-request.json");
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}
