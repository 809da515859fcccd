//! Edge-conditioned background augmentation of rendered records.

use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::AssetCatalog;
use super::render::run_json_command;
use super::scene::{FilterFlag, Provenance, SceneRecord};
use crate::error::{CompassError, Result};
use crate::geometry::Box2D;
use crate::imaging::Canvas;

/// The built-in scene templates; `<subject>` marks the object phrase.
pub fn builtin_templates() -> Vec<String> {
    include_str!("../../data/prompts/augmentation.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationJob {
    pub job_id: String,
    pub source: SceneRecord,
    pub template: String,
    /// Edge-map regions zeroed before generation (pose variation).
    pub erase_regions: Vec<Box2D>,
    pub seed: u64,
}

/// One job per record, with a template drawn per record and 1–3 erase
/// rectangles (each 10–40% of the box area) inside every non-rigid object.
pub fn build_augmentation_jobs(
    records: &[SceneRecord],
    templates: &[String],
    catalog: &AssetCatalog,
    seed: u64,
) -> Result<Vec<AugmentationJob>> {
    if templates.is_empty() {
        return Err(CompassError::Config("no augmentation templates".into()));
    }
    if let Some(t) = templates.iter().find(|t| !t.contains("<subject>")) {
        return Err(CompassError::Config(format!("template without <subject>: `{t}`")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(records.len());
    for r in records {
        let template = templates[rng.random_range(0..templates.len())].clone();
        let mut erase_regions = Vec::new();
        for o in &r.objects {
            let rigid = catalog
                .assets
                .iter()
                .find(|a| a.name == o.name)
                .is_none_or(|a| a.rigid);
            if rigid {
                continue;
            }
            for _ in 0..rng.random_range(1..=3) {
                erase_regions.push(erase_rect(&o.tight_box, &mut rng));
            }
        }
        jobs.push(AugmentationJob {
            job_id: format!("{}-aug", r.id),
            source: r.clone(),
            template,
            erase_regions,
            seed: rng.random(),
        });
    }
    Ok(jobs)
}

fn erase_rect(b: &Box2D, rng: &mut ChaCha8Rng) -> Box2D {
    let frac = rng.random_range(0.1..=0.4);
    let aspect: f64 = rng.random_range(0.5f64..2.0).min(1.0 / frac);
    let aspect = aspect.max(frac);
    // w·h = frac·W·H with w/W = sqrt(frac·aspect), h/H = sqrt(frac/aspect).
    let w = b.width() * (frac * aspect).sqrt().min(1.0);
    let h = b.height() * (frac / aspect).sqrt().min(1.0);
    let x0 = b.x0 + rng.random_range(0.0..=(b.width() - w).max(0.0));
    let y0 = b.y0 + rng.random_range(0.0..=(b.height() - h).max(0.0));
    Box2D {
        x0,
        y0,
        x1: (x0 + w).min(b.x1),
        y1: (y0 + h).min(b.y1),
    }
}

pub trait EdgeExtractor {
    fn extract(&self, img: &Canvas) -> Result<Canvas>;
}

pub trait ImageGenerator {
    fn generate(&self, edges: &Canvas, prompt: &str, seed: u64) -> Result<Canvas>;
}

/// Canny edge detector with thresholds on the 0–255 intensity scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Canny {
    pub low: f64,
    pub high: f64,
    pub sigma: f64,
}

impl Default for Canny {
    fn default() -> Self {
        Self {
            low: 100.0,
            high: 200.0,
            sigma: 1.0,
        }
    }
}

fn clamp_get(img: &[f64], w: usize, h: usize, x: isize, y: isize) -> f64 {
    let x = x.clamp(0, w as isize - 1) as usize;
    let y = y.clamp(0, h as isize - 1) as usize;
    img[y * w + x]
}

fn gaussian_blur(img: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|i| kernel[(i + r) as usize] * clamp_get(img, w, h, x as isize + i, y as isize))
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|i| kernel[(i + r) as usize] * clamp_get(&tmp, w, h, x as isize, y as isize + i))
                .sum::<f64>()
                / norm;
        }
    }
    out
}

impl Canny {
    pub fn detect(&self, img: &Canvas) -> Canvas {
        let (w, h) = (img.width(), img.height());
        let scaled: Vec<f64> = img.data().iter().map(|v| v * 255.0).collect();
        let s = gaussian_blur(&scaled, w, h, self.sigma);
        let mut mag = vec![0.0; w * h];
        let mut dir = vec![0u8; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let p = |dx: isize, dy: isize| clamp_get(&s, w, h, x + dx, y + dy);
                let gx = p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1);
                let gy = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1);
                let i = y as usize * w + x as usize;
                mag[i] = gx.hypot(gy);
                let a = gy.atan2(gx).to_degrees().rem_euclid(180.0);
                dir[i] = if !(22.5..157.5).contains(&a) {
                    0
                } else if a < 67.5 {
                    1
                } else if a < 112.5 {
                    2
                } else {
                    3
                };
            }
        }
        // Non-maximum suppression along the gradient direction.
        let mut thin = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = y as usize * w + x as usize;
                let (dx, dy) = [(1, 0), (1, 1), (0, 1), (-1, 1)][dir[i] as usize];
                let m = mag[i];
                let a = clamp_get(&mag, w, h, x + dx, y + dy);
                let b = clamp_get(&mag, w, h, x - dx, y - dy);
                if m >= a && m >= b {
                    thin[i] = m;
                }
            }
        }
        // Hysteresis: strong pixels seed, weak pixels join when connected.
        let mut out = vec![0.0; w * h];
        let mut stack: Vec<usize> = (0..w * h).filter(|&i| thin[i] >= self.high).collect();
        for &i in &stack {
            out[i] = 1.0;
        }
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if out[j] == 0.0 && thin[j] >= self.low {
                        out[j] = 1.0;
                        stack.push(j);
                    }
                }
            }
        }
        Canvas::from_data(w, h, out).expect("same size")
    }
}

impl EdgeExtractor for Canny {
    fn extract(&self, img: &Canvas) -> Result<Canvas> {
        Ok(self.detect(img))
    }
}

/// Zeroes every edge pixel whose centre lies in one of `regions`.
pub fn erase_regions(edges: &mut Canvas, regions: &[Box2D]) {
    for y in 0..edges.height() {
        for x in 0..edges.width() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if regions.iter().any(|r| r.contains_point(px, py)) {
                edges.set(x, y, 0.0);
            }
        }
    }
}

fn prompt_hash(prompt: &str) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    prompt.hash(&mut h);
    h.finish()
}

/// Offline stand-in for an edge-conditioned generator: a dim textured
/// background keyed on the prompt with the edge map drawn on top.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubGenerator;

impl ImageGenerator for StubGenerator {
    fn generate(&self, edges: &Canvas, prompt: &str, seed: u64) -> Result<Canvas> {
        let mut rng = ChaCha8Rng::seed_from_u64(prompt_hash(prompt) ^ seed);
        let base = 0.04 + 0.12 * (prompt_hash(prompt) % 1000) as f64 / 1000.0;
        let (w, h) = (edges.width(), edges.height());
        let mut out = Canvas::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let bg = base + rng.random_range(-0.03..0.03);
                out.set(x, y, bg.max(0.9 * edges.get(x, y)));
            }
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    edge_path: &'a Path,
    prompt: &'a str,
    seed: u64,
    output_path: &'a Path,
}

#[derive(Deserialize)]
struct GenerateReply {
    image_path: PathBuf,
}

/// External generator. Receives `{"edge_path", "prompt", "seed",
/// "output_path"}` on stdin and prints `{"image_path": ...}`.
#[derive(Clone, Debug)]
pub struct CommandGenerator {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub work_dir: PathBuf,
}

impl ImageGenerator for CommandGenerator {
    fn generate(&self, edges: &Canvas, prompt: &str, seed: u64) -> Result<Canvas> {
        let tag = format!("{:016x}", prompt_hash(prompt) ^ seed);
        let edge_path = self.work_dir.join(format!("edges-{tag}.png"));
        let output_path = self.work_dir.join(format!("gen-{tag}.png"));
        edges.save(&edge_path)?;
        let req = serde_json::to_vec(&GenerateRequest {
            edge_path: &edge_path,
            prompt,
            seed,
            output_path: &output_path,
        })?;
        let stdout = run_json_command(&self.program, &self.args, &req).map_err(CompassError::Augmentation)?;
        let reply: GenerateReply = serde_json::from_slice(&stdout)
            .map_err(|e| CompassError::Augmentation(format!("malformed generator reply: {e}")))?;
        Canvas::load(&reply.image_path)
    }
}

/// Runs every job and returns the augmented records, which keep the
/// source's objects, orientations and boxes and start unreviewed.
pub fn execute_augmentation(
    jobs: &[AugmentationJob],
    extractor: &dyn EdgeExtractor,
    generator: &dyn ImageGenerator,
    root: &Path,
) -> Result<Vec<SceneRecord>> {
    let mut out = Vec::with_capacity(jobs.len());
    for job in jobs {
        let src = &job.source;
        let src_path = if src.image.is_absolute() {
            src.image.clone()
        } else {
            root.join(&src.image)
        };
        let image = Canvas::load(&src_path)?;
        let mut edges = extractor.extract(&image)?;
        erase_regions(&mut edges, &job.erase_regions);
        let prompt = job.template.replace("<subject>", &src.subject_phrase().replace(['{', '}'], ""));
        let generated = generator.generate(&edges, &prompt, job.seed)?;
        if (generated.width(), generated.height()) != (image.width(), image.height()) {
            return Err(CompassError::Augmentation(format!(
                "job {}: generator returned {}x{}, source is {}x{}",
                job.job_id,
                generated.width(),
                generated.height(),
                image.width(),
                image.height()
            )));
        }
        let rel = PathBuf::from("images").join(format!("{}.png", job.job_id));
        generated.save(&root.join(&rel))?;
        out.push(SceneRecord {
            id: job.job_id.clone(),
            image: rel,
            image_size: src.image_size,
            objects: src.objects.clone(),
            background_prompt: job.template.clone(),
            provenance: Provenance::Augmented { source: src.id.clone() },
            filter: FilterFlag::Unreviewed,
        });
    }
    Ok(out)
}
