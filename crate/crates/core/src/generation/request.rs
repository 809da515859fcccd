use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CompassError, Result};
use crate::geometry::{check_uniform_arity, Box2D, Orientation, DEFAULT_PADDING, MAX_SPAWNED_BOXES};

pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_STEPS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestObject {
    pub name: String,
    pub theta: Orientation,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub tight_box: Option<Box2D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    /// Template with `{name}` slots.
    pub prompt: String,
    #[serde(default)]
    pub objects: Vec<RequestObject>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Output size; defaults to the backbone's native size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default = "default_padding")]
    pub padding: f64,
    #[serde(default = "default_true")]
    pub use_call: bool,
    /// Personalized subject tokens whose adapters are switched on.
    #[serde(default)]
    pub subjects: Vec<String>,
}

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}
fn default_steps() -> usize {
    DEFAULT_STEPS
}
fn default_padding() -> f64 {
    DEFAULT_PADDING
}
fn default_true() -> bool {
    true
}

const FIELDS: [&str; 10] = [
    "prompt",
    "objects",
    "seed",
    "guidance_scale",
    "steps",
    "width",
    "height",
    "padding",
    "use_call",
    "subjects",
];
const OBJECT_FIELDS: [&str; 3] = ["name", "theta", "box"];

fn field<T: DeserializeOwned>(obj: &serde_json::Map<String, Value>, key: &str, path: &str, errors: &mut Vec<String>) -> Option<T> {
    let v = obj.get(key)?;
    match serde_json::from_value(v.clone()) {
        Ok(x) => Some(x),
        Err(e) => {
            errors.push(format!("{path}: {e}"));
            None
        }
    }
}

impl GenerationRequest {
    pub fn new(prompt: &str, objects: Vec<RequestObject>, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            objects,
            seed,
            guidance_scale: DEFAULT_GUIDANCE,
            steps: DEFAULT_STEPS,
            width: None,
            height: None,
            padding: DEFAULT_PADDING,
            use_call: true,
            subjects: Vec::new(),
        }
    }

    /// Parses a JSON value, collecting one `path: message` entry per bad
    /// field (e.g. `objects[0].theta: ...`).
    pub fn from_value(value: &Value) -> Result<Self> {
        let mut errors = Vec::new();
        let Some(obj) = value.as_object() else {
            return Err(CompassError::Validation(vec!["request: expected a JSON object".into()]));
        };
        for k in obj.keys().filter(|k| !FIELDS.contains(&k.as_str())) {
            errors.push(format!("{k}: unknown field"));
        }
        let prompt: Option<String> = field(obj, "prompt", "prompt", &mut errors);
        if !obj.contains_key("prompt") {
            errors.push("prompt: missing field".into());
        }
        let mut objects = Vec::new();
        match obj.get("objects") {
            None => {}
            Some(Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    let path = format!("objects[{i}]");
                    let Some(o) = item.as_object() else {
                        errors.push(format!("{path}: expected an object"));
                        continue;
                    };
                    for k in o.keys().filter(|k| !OBJECT_FIELDS.contains(&k.as_str())) {
                        errors.push(format!("{path}.{k}: unknown field"));
                    }
                    for required in ["name", "theta"] {
                        if !o.contains_key(required) {
                            errors.push(format!("{path}.{required}: missing field"));
                        }
                    }
                    let name: Option<String> = field(o, "name", &format!("{path}.name"), &mut errors);
                    let theta: Option<Orientation> = field(o, "theta", &format!("{path}.theta"), &mut errors);
                    let tight_box: Option<Box2D> = match o.get("box") {
                        Some(Value::Null) | None => None,
                        Some(_) => field(o, "box", &format!("{path}.box"), &mut errors),
                    };
                    if let (Some(name), Some(theta)) = (name, theta) {
                        objects.push(RequestObject { name, theta, tight_box });
                    }
                }
            }
            Some(_) => errors.push("objects: expected an array".into()),
        }
        let seed = field(obj, "seed", "seed", &mut errors).unwrap_or(0);
        let guidance_scale = field(obj, "guidance_scale", "guidance_scale", &mut errors).unwrap_or(DEFAULT_GUIDANCE);
        let steps = field(obj, "steps", "steps", &mut errors).unwrap_or(DEFAULT_STEPS);
        let width = field(obj, "width", "width", &mut errors);
        let height = field(obj, "height", "height", &mut errors);
        let padding = field(obj, "padding", "padding", &mut errors).unwrap_or(DEFAULT_PADDING);
        let use_call = field(obj, "use_call", "use_call", &mut errors).unwrap_or(true);
        let subjects = field(obj, "subjects", "subjects", &mut errors).unwrap_or_default();
        let req = Self {
            prompt: prompt.unwrap_or_default(),
            objects,
            seed,
            guidance_scale,
            steps,
            width,
            height,
            padding,
            use_call,
            subjects,
        };
        if errors.is_empty() {
            errors = req.field_errors();
        }
        if errors.is_empty() {
            Ok(req)
        } else {
            Err(CompassError::Validation(errors))
        }
    }

    /// Range checks, as `path: message` entries.
    pub fn field_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.objects.len() > MAX_SPAWNED_BOXES {
            errors.push(format!("objects: at most {MAX_SPAWNED_BOXES} objects, got {}", self.objects.len()));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            errors.push("guidance_scale: must be a non-negative number".into());
        }
        if self.steps == 0 || self.steps > 1000 {
            errors.push("steps: must be between 1 and 1000".into());
        }
        if !(self.padding.is_finite() && self.padding >= 1.0) {
            errors.push("padding: must be at least 1".into());
        }
        for (k, v) in [("width", self.width), ("height", self.height)] {
            if v == Some(0) || v.is_some_and(|v| v > 4096) {
                errors.push(format!("{k}: must be between 1 and 4096"));
            }
        }
        if check_uniform_arity(self.objects.iter().map(|o| &o.theta)).is_err() {
            errors.push("objects: every theta must have the same number of angles".into());
        }
        errors
    }

    pub fn check(&self) -> Result<()> {
        let e = self.field_errors();
        if e.is_empty() {
            Ok(())
        } else {
            Err(CompassError::Validation(e))
        }
    }

    /// Output `(width, height)`.
    pub fn size(&self, native: usize) -> (usize, usize) {
        (self.width.unwrap_or(native), self.height.unwrap_or(native))
    }
}
