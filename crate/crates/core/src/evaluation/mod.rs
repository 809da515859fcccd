//! Orientation-fidelity evaluation: eval-set construction, detector and
//! text-alignment clients, per-case metrics and the report.

pub mod clients;
pub mod regressor;

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CompassError, Result};
use crate::generation::{GenerationRequest, Generator, RequestObject};
use crate::geometry::{circular_distance, flip_adjusted_distance, iou, Orientation};

pub use clients::{Detection, Detector, HintDetector, HttpAligner, HttpDetector, ConstantAligner, TextAligner};
pub use regressor::{crops_from_records, decode_head, encode_label, LabeledCrop, OrientationRegressor, RegressorConfig};

pub const REPORT_SCHEMA: &str = "compass.eval-report/1";
pub const DEFAULT_OBJECTNESS_THRESHOLD: f64 = 0.4;
pub const ORIENTATIONS_PER_COMBINATION: usize = 10;

/// Objects seen during training.
pub const SEEN_OBJECTS: [&str; 6] = ["horse", "jeep", "sedan", "sofa", "teddy", "lion"];
/// Objects held out from training.
pub const UNSEEN_OBJECTS: [&str; 5] = ["boat", "dolphin", "ship", "SUV", "tractor"];

/// Prompt list each evaluation object is paired with.
pub fn object_category(name: &str) -> Option<&'static str> {
    match name.to_lowercase().as_str() {
        "horse" | "jeep" | "sedan" | "lion" | "suv" | "tractor" => Some("road"),
        "boat" | "dolphin" | "ship" => Some("water"),
        "sofa" | "teddy" => Some("indoor"),
        _ => None,
    }
}

pub fn is_seen(name: &str) -> bool {
    SEEN_OBJECTS.iter().any(|o| o.eq_ignore_ascii_case(name))
}

/// The shipped evaluation prompt lists, keyed by category.
pub fn builtin_prompt_lists() -> BTreeMap<String, Vec<String>> {
    [
        ("road", include_str!("../../data/prompts/road.txt")),
        ("water", include_str!("../../data/prompts/water.txt")),
        ("indoor", include_str!("../../data/prompts/indoor.txt")),
    ]
    .into_iter()
    .map(|(k, text)| (k.to_string(), parse_prompt_list(text)))
    .collect()
}

/// One template per non-empty line.
pub fn parse_prompt_list(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalObject {
    pub name: String,
    pub seen: bool,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub case_id: String,
    pub category: String,
    /// Scene template with `<subject>` still in place.
    pub scene_prompt: String,
    pub objects: Vec<EvalObject>,
    pub seed: u64,
}

impl EvalCase {
    /// Slot template: `<subject>` becomes `a {jeep}` or `a {jeep} and a {sedan}`.
    pub fn template(&self) -> String {
        let subject = self
            .objects
            .iter()
            .map(|o| format!("a {{{}}}", o.name))
            .collect::<Vec<_>>()
            .join(" and ");
        self.scene_prompt.replace("<subject>", &subject)
    }

    /// Plain-text prompt for text alignment.
    pub fn text(&self) -> String {
        let subject = self.objects.iter().map(|o| format!("a {}", o.name)).collect::<Vec<_>>().join(" and ");
        self.scene_prompt.replace("<subject>", &subject)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSetConfig {
    /// Single-object subjects.
    pub objects: Vec<String>,
    /// Two-object subjects; both must share a prompt category.
    pub pairs: Vec<[String; 2]>,
    pub orientations_per_combination: usize,
    pub seed: u64,
}

impl Default for EvalSetConfig {
    fn default() -> Self {
        Self {
            objects: SEEN_OBJECTS.iter().chain(&UNSEEN_OBJECTS).map(|s| s.to_string()).collect(),
            pairs: Vec::new(),
            orientations_per_combination: ORIENTATIONS_PER_COMBINATION,
            seed: 0,
        }
    }
}

/// Cross product of subjects with their category's prompts, with
/// `orientations_per_combination` seeded headings each.
pub fn build_eval_set(lists: &BTreeMap<String, Vec<String>>, cfg: &EvalSetConfig) -> Result<Vec<EvalCase>> {
    let category = |name: &str| {
        object_category(name).ok_or_else(|| CompassError::Config(format!("unknown evaluation object `{name}`")))
    };
    let mut subjects: Vec<(Vec<String>, &str)> = Vec::new();
    for o in &cfg.objects {
        subjects.push((vec![o.clone()], category(o)?));
    }
    for [a, b] in &cfg.pairs {
        let (ca, cb) = (category(a)?, category(b)?);
        if ca != cb {
            return Err(CompassError::Config(format!("`{a}` ({ca}) and `{b}` ({cb}) have no common prompt list")));
        }
        subjects.push((vec![a.clone(), b.clone()], ca));
    }
    let mut cases = Vec::new();
    for (si, (names, cat)) in subjects.iter().enumerate() {
        let prompts = lists
            .get(*cat)
            .ok_or_else(|| CompassError::Config(format!("no prompt list for category `{cat}`")))?;
        for (pi, prompt) in prompts.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((si as u64) << 32) | pi as u64);
            for k in 0..cfg.orientations_per_combination {
                cases.push(EvalCase {
                    case_id: format!("{}-{cat}{pi:02}-{k}", names.join("+")),
                    category: cat.to_string(),
                    scene_prompt: prompt.clone(),
                    objects: names
                        .iter()
                        .map(|n| EvalObject {
                            name: n.clone(),
                            seen: is_seen(n),
                            theta: rng.random_range(0.0..TAU),
                        })
                        .collect(),
                    seed: rng.random(),
                });
            }
        }
    }
    Ok(cases)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectResult {
    pub name: String,
    pub target: f64,
    pub detected: bool,
    pub score: Option<f64>,
    pub predicted: Option<f64>,
    pub angular_error: Option<f64>,
    pub flip_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub prompt: String,
    pub n_objects: usize,
    pub n_detected: usize,
    /// Mean over detected objects; `None` when nothing was detected.
    pub angular_error: Option<f64>,
    pub flip_error: Option<f64>,
    /// Prompt-image similarity x 100.
    pub text_alignment: f64,
    pub objects: Vec<ObjectResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub cases: usize,
    pub mean_angular_error: Option<f64>,
    pub mean_flip_error: Option<f64>,
    /// Cases left out of the angle means because nothing was detected.
    pub missing_angle_cases: usize,
    /// Detected objects / intended objects.
    pub object_rate: Option<f64>,
    pub mean_text_alignment: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl Aggregates {
    pub fn from_rows(rows: &[CaseRow]) -> Self {
        let intended: usize = rows.iter().map(|r| r.n_objects).sum();
        let detected: usize = rows.iter().map(|r| r.n_detected).sum();
        Self {
            cases: rows.len(),
            mean_angular_error: mean(rows.iter().filter_map(|r| r.angular_error)),
            mean_flip_error: mean(rows.iter().filter_map(|r| r.flip_error)),
            missing_angle_cases: rows.iter().filter(|r| r.angular_error.is_none()).count(),
            object_rate: (intended > 0).then(|| detected as f64 / intended as f64),
            mean_text_alignment: mean(rows.iter().map(|r| r.text_alignment)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub objectness_threshold: f64,
    pub rows: Vec<CaseRow>,
    pub aggregates: Aggregates,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl EvalReport {
    pub fn new(rows: Vec<CaseRow>, objectness_threshold: f64) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            objectness_threshold,
            aggregates: Aggregates::from_rows(&rows),
            rows,
        }
    }

    /// Per-case CSV; undefined values are written as `NA`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| CompassError::Data(format!("csv: {e}"));
        w.write_record(["case_id", "prompt", "n_objects", "n_detected", "angular_error", "flip_error", "text_alignment"])
            .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.case_id.clone(),
                r.prompt.clone(),
                r.n_objects.to_string(),
                r.n_detected.to_string(),
                opt(r.angular_error),
                opt(r.flip_error),
                r.text_alignment.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| CompassError::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CompassError::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.to_csv()?),
            ("report.json", serde_json::to_string_pretty(self)?),
        ] {
            let p = dir.join(name);
            compass_autograd::write_atomic(&p, body.as_bytes()).map_err(|e| CompassError::io(p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub objectness_threshold: f64,
    pub steps: usize,
    pub guidance_scale: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            objectness_threshold: DEFAULT_OBJECTNESS_THRESHOLD,
            steps: crate::generation::DEFAULT_STEPS,
            guidance_scale: crate::generation::DEFAULT_GUIDANCE,
        }
    }
}

/// Scores one generated image. Each intended object takes the detection
/// with its label and score at or above the threshold that best overlaps
/// its requested box; its crop goes to the regressor.
pub fn score_case(
    case: &EvalCase,
    image: &crate::imaging::Canvas,
    boxes: &[crate::geometry::Box2D],
    detector: &dyn Detector,
    aligner: &dyn TextAligner,
    regressor: &OrientationRegressor,
    threshold: f64,
) -> Result<CaseRow> {
    let labels: Vec<String> = case.objects.iter().map(|o| o.name.clone()).collect();
    let detections = detector.detect(image, &labels, boxes)?;
    let mut used = vec![false; detections.len()];
    let mut objects = Vec::with_capacity(case.objects.len());
    for (o, want) in case.objects.iter().zip(boxes) {
        let best = detections
            .iter()
            .enumerate()
            .filter(|(i, d)| !used[*i] && d.label.eq_ignore_ascii_case(&o.name) && d.score >= threshold)
            .max_by(|a, b| iou(&a.1.bbox, want).total_cmp(&iou(&b.1.bbox, want)));
        let res = match best {
            Some((i, d)) => {
                used[i] = true;
                let p = regressor.predict(image, Some(&d.bbox))?;
                ObjectResult {
                    name: o.name.clone(),
                    target: o.theta,
                    detected: true,
                    score: Some(d.score),
                    predicted: Some(p),
                    angular_error: Some(circular_distance(p, o.theta)?),
                    flip_error: Some(flip_adjusted_distance(p, o.theta)?),
                }
            }
            None => ObjectResult {
                name: o.name.clone(),
                target: o.theta,
                detected: false,
                score: None,
                predicted: None,
                angular_error: None,
                flip_error: None,
            },
        };
        objects.push(res);
    }
    Ok(CaseRow {
        case_id: case.case_id.clone(),
        prompt: case.text(),
        n_objects: objects.len(),
        n_detected: objects.iter().filter(|o| o.detected).count(),
        angular_error: mean(objects.iter().filter_map(|o| o.angular_error)),
        flip_error: mean(objects.iter().filter_map(|o| o.flip_error)),
        text_alignment: 100.0 * aligner.similarity(image, &case.text())?,
        objects,
    })
}

/// Generates every case and scores it.
pub fn evaluate(
    generator: &Generator,
    cases: &[EvalCase],
    detector: &dyn Detector,
    aligner: &dyn TextAligner,
    regressor: &OrientationRegressor,
    cfg: &EvalConfig,
    mut on_case: impl FnMut(&CaseRow),
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let objects = case
            .objects
            .iter()
            .map(|o| {
                Ok(RequestObject {
                    name: o.name.clone(),
                    theta: Orientation::yaw(o.theta)?,
                    tight_box: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut req = GenerationRequest::new(&case.template(), objects, case.seed);
        req.steps = cfg.steps;
        req.guidance_scale = cfg.guidance_scale;
        let out = generator.generate(&req)?;
        let boxes: Vec<_> = out.result.objects.iter().map(|o| o.tight_box).collect();
        let row = score_case(case, &out.image, &boxes, detector, aligner, regressor, cfg.objectness_threshold)?;
        on_case(&row);
        rows.push(row);
    }
    Ok(EvalReport::new(rows, cfg.objectness_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_lists_have_fifteen_prompts_each() {
        let lists = builtin_prompt_lists();
        for cat in ["road", "water", "indoor"] {
            assert_eq!(lists[cat].len(), 15, "{cat}");
            assert!(lists[cat].iter().all(|p| p.contains("<subject>")));
        }
    }

    #[test]
    fn eval_set_is_deterministic_with_ten_per_combination() {
        let lists = builtin_prompt_lists();
        let cfg = EvalSetConfig {
            objects: vec!["jeep".into(), "boat".into()],
            pairs: vec![["jeep".into(), "sedan".into()]],
            ..EvalSetConfig::default()
        };
        let a = build_eval_set(&lists, &cfg).unwrap();
        assert_eq!(a, build_eval_set(&lists, &cfg).unwrap());
        assert_eq!(a.len(), 3 * 15 * 10);
        let jeep_taj: Vec<_> = a.iter().filter(|c| c.case_id.starts_with("jeep-road00-")).collect();
        assert_eq!(jeep_taj.len(), 10);
        assert!(a.iter().flat_map(|c| &c.objects).all(|o| (0.0..TAU).contains(&o.theta)));
        assert!(a.iter().any(|c| c.objects.len() == 2));
        assert!(a.iter().filter(|c| c.objects[0].name == "boat").all(|c| !c.objects[0].seen));
        assert_eq!(a[0].template(), "A photo of a {jeep} in front of the Taj Mahal");
    }

    #[test]
    fn unknown_object_is_a_config_error() {
        let cfg = EvalSetConfig {
            objects: vec!["spaceship".into()],
            ..EvalSetConfig::default()
        };
        assert!(matches!(build_eval_set(&builtin_prompt_lists(), &cfg), Err(CompassError::Config(_))));
    }

    #[test]
    fn empty_report_is_undefined_marked() {
        let r = EvalReport::new(vec![], 0.4);
        assert_eq!(r.aggregates.cases, 0);
        assert_eq!(r.aggregates.mean_angular_error, None);
        assert_eq!(r.aggregates.object_rate, None);
        assert_eq!(r.aggregates.mean_text_alignment, None);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["aggregates"]["mean_angular_error"].is_null());
        assert_eq!(r.to_csv().unwrap().lines().count(), 1);
    }
}
