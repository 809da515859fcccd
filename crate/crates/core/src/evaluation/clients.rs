//! Detector and text-alignment clients: in-process stubs and JSON-over-HTTP.
//!
//! Detector endpoint: `POST {"image_png_base64", "labels"}` →
//! `{"detections": [{"label", "score", "box": [x0, y0, x1, y1]}]}`.
//! Aligner endpoint: `POST {"image_png_base64", "text"}` → `{"similarity"}`
//! with the similarity in `[-1, 1]`.

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{CompassError, Result};
use crate::geometry::Box2D;
use crate::imaging::Canvas;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: Box2D,
}

pub trait Detector {
    /// Scored boxes for `labels`. `hints` are the requested boxes, one per
    /// label; real detectors ignore them.
    fn detect(&self, image: &Canvas, labels: &[String], hints: &[Box2D]) -> Result<Vec<Detection>>;
}

pub trait TextAligner {
    fn similarity(&self, image: &Canvas, text: &str) -> Result<f64>;
}

/// Reports every hinted box with a fixed score (or per-label scores).
#[derive(Clone, Debug, Default)]
pub struct HintDetector {
    pub score: f64,
    pub per_label: Vec<(String, f64)>,
}

impl HintDetector {
    pub fn new(score: f64) -> Self {
        Self {
            score,
            per_label: Vec::new(),
        }
    }
}

impl Detector for HintDetector {
    fn detect(&self, _image: &Canvas, labels: &[String], hints: &[Box2D]) -> Result<Vec<Detection>> {
        Ok(labels
            .iter()
            .zip(hints)
            .map(|(l, b)| Detection {
                label: l.clone(),
                score: self
                    .per_label
                    .iter()
                    .find(|(n, _)| n == l)
                    .map_or(self.score, |(_, s)| *s),
                bbox: *b,
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantAligner(pub f64);

impl TextAligner for ConstantAligner {
    fn similarity(&self, _image: &Canvas, _text: &str) -> Result<f64> {
        Ok(self.0)
    }
}

fn encode_png(image: &Canvas) -> Result<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(image.png_bytes()?))
}

fn post<T: for<'de> Deserialize<'de>>(url: &str, body: &serde_json::Value) -> Result<T> {
    let mut resp = ureq::post(url)
        .send_json(body)
        .map_err(|e| CompassError::Capability(format!("{url}: {e}")))?;
    resp.body_mut()
        .read_json::<T>()
        .map_err(|e| CompassError::Capability(format!("{url}: malformed response: {e}")))
}

#[derive(Clone, Debug)]
pub struct HttpDetector {
    pub url: String,
}

#[derive(Deserialize)]
struct DetectResponse {
    detections: Vec<Detection>,
}

impl Detector for HttpDetector {
    fn detect(&self, image: &Canvas, labels: &[String], _hints: &[Box2D]) -> Result<Vec<Detection>> {
        let body = serde_json::json!({"image_png_base64": encode_png(image)?, "labels": labels});
        Ok(post::<DetectResponse>(&self.url, &body)?.detections)
    }
}

#[derive(Clone, Debug)]
pub struct HttpAligner {
    pub url: String,
}

#[derive(Deserialize)]
struct AlignResponse {
    similarity: f64,
}

impl TextAligner for HttpAligner {
    fn similarity(&self, image: &Canvas, text: &str) -> Result<f64> {
        let body = serde_json::json!({"image_png_base64": encode_png(image)?, "text": text});
        let s = post::<AlignResponse>(&self.url, &body)?.similarity;
        if !(-1.0..=1.0).contains(&s) {
            return Err(CompassError::Capability(format!("{}: similarity {s} outside [-1, 1]", self.url)));
        }
        Ok(s)
    }
}
