//! Loaded model plus the code that runs each kind of job.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use base64::Engine as _;
use compass_core::backbone::{ModelWeights, ToyBackbone};
use compass_core::conditioning::PersonalizationConfig;
use compass_core::evaluation::{
    build_eval_set, builtin_prompt_lists, evaluate, is_seen, object_category, ConstantAligner, EvalConfig,
    EvalSetConfig, HintDetector, OrientationRegressor, RegressorConfig, SEEN_OBJECTS, UNSEEN_OBJECTS,
};
use compass_core::generation::{personalize, GenerationRequest, Generator, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use compass_core::geometry::{DEFAULT_PADDING, MAX_SPAWNED_BOXES};
use compass_core::imaging::Canvas;
use compass_core::tokenizer::Tokenizer;
use compass_core::training::Checkpoint;
use compass_core::CompassError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ErrorBody, ServiceError, ServiceResult};
use crate::images::ImageStore;
use crate::jobs::{Job, JobKind};

/// Similarity reported by the stub text aligner used for service-side
/// evaluation jobs.
pub const STUB_SIMILARITY: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateJobRequest {
    #[serde(default)]
    pub eval_set: EvalSetConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Only the first `limit` cases.
    #[serde(default)]
    pub limit: Option<usize>,
}

/// Request checks done before a job is queued. Generation requests get
/// per-field errors; the other kinds report the first problem.
pub fn validate_request(kind: JobKind, request: &Value) -> std::result::Result<(), ErrorBody> {
    let prefixed = |e: &CompassError| ErrorBody::from_core("request", e);
    match kind {
        JobKind::Generate => GenerationRequest::from_value(request).map(|_| ()).map_err(|e| prefixed(&e)),
        JobKind::Personalize => parse_personalize(request).map(|_| ()).map_err(|e| prefixed(&e)),
        JobKind::Evaluate => {
            let r: EvaluateJobRequest = serde_json::from_value(request.clone())
                .map_err(|e| ErrorBody::validation("request", &[e.to_string()]))?;
            build_eval_set(&builtin_prompt_lists(), &r.eval_set).map_err(|e| prefixed(&e))?;
            Ok(())
        }
    }
}

/// A personalization request is a personalization config whose `images`
/// are replaced by base64 PNGs under `images_png_base64`.
fn parse_personalize(request: &Value) -> compass_core::Result<(PersonalizationConfig, Vec<Canvas>)> {
    let mut body = request
        .as_object()
        .cloned()
        .ok_or_else(|| CompassError::Validation(vec![": expected an object".into()]))?;
    if body.contains_key("images") {
        return Err(CompassError::Validation(vec![
            "images: send image bytes as images_png_base64".into(),
        ]));
    }
    let encoded = body.remove("images_png_base64").unwrap_or(Value::Array(vec![]));
    let encoded: Vec<String> = serde_json::from_value(encoded)
        .map_err(|e| CompassError::Validation(vec![format!("images_png_base64: {e}")]))?;
    let cfg: PersonalizationConfig = serde_json::from_value(Value::Object(body))
        .map_err(|e| CompassError::Validation(vec![format!(": {e}")]))?;
    cfg.validate(&Tokenizer::default()).map_err(|e| CompassError::Validation(vec![format!(": {e}")]))?;
    let mut images = Vec::with_capacity(encoded.len());
    for (i, s) in encoded.iter().enumerate() {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(|e| CompassError::Validation(vec![format!("images_png_base64[{i}]: {e}")]))?;
        images.push(
            Canvas::from_png_bytes(&bytes)
                .map_err(|e| CompassError::Validation(vec![format!("images_png_base64[{i}]: {e}")]))?,
        );
    }
    if images.is_empty() {
        return Err(CompassError::Validation(vec!["images_png_base64: at least one image is required".into()]));
    }
    Ok((cfg, images))
}

pub struct Engine {
    backbone: ToyBackbone,
    weights: RwLock<ModelWeights>,
    checkpoint_id: String,
    regressor: OrientationRegressor,
    images: ImageStore,
    reports: PathBuf,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("checkpoint_id", &self.checkpoint_id).finish()
    }
}

impl Engine {
    /// `regressor` defaults to an untrained toy regressor, which only
    /// makes sense for smoke runs.
    pub fn new(
        checkpoint: &Checkpoint,
        regressor: Option<OrientationRegressor>,
        data_dir: &Path,
    ) -> ServiceResult<Self> {
        let regressor = match regressor {
            Some(r) => r,
            None => OrientationRegressor::init(RegressorConfig::toy())?,
        };
        Ok(Self {
            backbone: checkpoint.backbone()?,
            weights: RwLock::new(checkpoint.weights()),
            checkpoint_id: checkpoint.id(),
            regressor,
            images: ImageStore::open(&data_dir.join("images"))?,
            reports: data_dir.join("reports"),
        })
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn images(&self) -> &ImageStore {
        &self.images
    }

    pub fn presets(&self) -> Value {
        let objects: Vec<Value> = SEEN_OBJECTS
            .iter()
            .chain(&UNSEEN_OBJECTS)
            .map(|n| json!({"name": n, "category": object_category(n), "seen": is_seen(n)}))
            .collect();
        let mut categories: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for n in SEEN_OBJECTS.iter().chain(&UNSEEN_OBJECTS) {
            if let Some(c) = object_category(n) {
                categories.entry(c).or_default().push(n);
            }
        }
        json!({
            "schema": "compass.presets/1",
            "objects": objects,
            "object_categories": categories,
            "prompt_templates": builtin_prompt_lists(),
            "default_padding": DEFAULT_PADDING,
            "default_guidance_scale": DEFAULT_GUIDANCE,
            "default_steps": DEFAULT_STEPS,
            "max_objects": MAX_SPAWNED_BOXES,
            "image_size": self.backbone.image_size(),
            "job_kinds": JobKind::ALL.iter().map(|k| k.as_str()).collect::<Vec<_>>(),
        })
    }

    pub fn run(&self, job: &Job) -> ServiceResult<Value> {
        match job.kind {
            JobKind::Generate => self.generate(&job.request),
            JobKind::Personalize => self.personalize(&job.request),
            JobKind::Evaluate => self.evaluate(&job.id, &job.request),
        }
    }

    fn generate(&self, request: &Value) -> ServiceResult<Value> {
        let req = GenerationRequest::from_value(request)?;
        let weights = self.weights.read().expect("weights lock");
        let out = Generator::new(&self.backbone, &weights).generate(&req)?;
        let image_id = self.images.put(&out.image.png_bytes()?)?;
        Ok(json!({"image_id": image_id, "generation": out.result}))
    }

    fn personalize(&self, request: &Value) -> ServiceResult<Value> {
        let (cfg, images) = parse_personalize(request)?;
        let snapshot = self.weights.read().expect("weights lock").clone();
        let adapters = personalize(&self.backbone, &snapshot, &cfg, &images, |_, _| {})?;
        let count = adapters.len();
        self.weights.write().expect("weights lock").adapters.extend(&adapters);
        Ok(json!({
            "subject_token": cfg.subject_token,
            "adapter_prefix": compass_core::generation::subject_prefix(&cfg.subject_token),
            "tensors": count,
        }))
    }

    fn evaluate(&self, job_id: &str, request: &Value) -> ServiceResult<Value> {
        let r: EvaluateJobRequest = serde_json::from_value(request.clone())?;
        let mut cases = build_eval_set(&builtin_prompt_lists(), &r.eval_set)?;
        if let Some(n) = r.limit {
            cases.truncate(n);
        }
        let weights = self.weights.read().expect("weights lock");
        let report = evaluate(
            &Generator::new(&self.backbone, &weights),
            &cases,
            &HintDetector::new(1.0),
            &ConstantAligner(STUB_SIMILARITY),
            &self.regressor,
            &r.eval,
            |_| {},
        )?;
        let dir = self.reports.join(job_id);
        report.write(&dir)?;
        Ok(json!({"report_dir": dir, "aggregates": report.aggregates, "cases": report.rows.len()}))
    }
}

impl From<compass_core::CompassError> for ErrorBody {
    fn from(e: compass_core::CompassError) -> Self {
        ErrorBody::from_core("", &e)
    }
}

impl From<&ServiceError> for ErrorBody {
    fn from(e: &ServiceError) -> Self {
        match e {
            ServiceError::Core(c) => ErrorBody::from_core("", c),
            other => ErrorBody::new(other.kind(), other.to_string()),
        }
    }
}
