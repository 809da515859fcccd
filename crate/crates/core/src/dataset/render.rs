//! Turning scene specs into images and records.
//!
//! The built-in renderer draws every asset as a flat glyph inside its
//! projected box: the glyph's nose points along the asset's screen heading
//! `(cos θ, -sin θ)` and its front half is brighter than its back half.
//! An external renderer can be plugged in through [`CommandRenderer`].

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::catalog::{AssetCatalog, Glyph};
use super::scene::{
    project_spec, FilterFlag, PointLight, Provenance, RecordObject, SceneRecord, SceneSpec,
};
use crate::error::{CompassError, Result};
use crate::geometry::Box2D;
use crate::imaging::Canvas;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOutput {
    pub image_path: PathBuf,
    /// `[width, height]`.
    pub image_size: [usize; 2],
    /// Tight box per asset, in spec order.
    pub boxes: Vec<Box2D>,
}

pub trait Renderer {
    /// Renders `spec` to `image_path` (a PNG).
    fn render(&self, spec: &SceneSpec, image_path: &Path) -> Result<RenderOutput>;
}

const SUPERSAMPLE: usize = 4;
const BACK_INTENSITY: f64 = 0.3;

/// Whether `(u, v)` (glyph frame, nose along +u, unit = glyph radius) is
/// inside the glyph.
pub fn glyph_contains(glyph: Glyph, u: f64, v: f64) -> bool {
    match glyph {
        Glyph::Arrow => {
            let shaft = (-0.9..=0.15).contains(&u) && v.abs() <= 0.22;
            shaft || in_triangle((u, v), (0.95, 0.0), (0.15, 0.62), (0.15, -0.62))
        }
        Glyph::Triangle => in_triangle((u, v), (0.95, 0.0), (-0.6, 0.75), (-0.6, -0.75)),
    }
}

fn in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = |o: (f64, f64), s: (f64, f64), t: (f64, f64)| {
        (s.0 - o.0) * (t.1 - o.1) - (s.1 - o.1) * (t.0 - o.0)
    };
    let d1 = cross(a, b, p);
    let d2 = cross(b, c, p);
    let d3 = cross(c, a, p);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// Brightness factor in `[0.8, 1]` from the lights' irradiance at `p`.
fn light_factor(lights: &[PointLight], p: [f64; 3]) -> f64 {
    let e: f64 = lights
        .iter()
        .map(|l| {
            let d2: f64 = (0..3).map(|k| (l.position[k] - p[k]).powi(2)).sum();
            l.intensity / d2.max(1e-6)
        })
        .sum();
    0.8 + 0.2 * e / (e + 10.0)
}

/// Draws the glyph scene for `spec` without touching the filesystem.
pub fn draw_scene(spec: &SceneSpec, catalog: &AssetCatalog) -> Result<(Canvas, Vec<Box2D>)> {
    let boxes = project_spec(spec, catalog)?;
    let [w, h] = spec.image_size;
    let mut canvas = Canvas::new(w, h);
    for (placed, b) in spec.assets.iter().zip(&boxes) {
        let glyph = catalog.get(&placed.asset_id).map(|a| a.glyph).unwrap_or(Glyph::Arrow);
        let theta = placed.orientation.theta();
        let (hx, hy) = (theta.cos(), -theta.sin());
        let (cx, cy) = b.center();
        let r = 0.5 * b.width().min(b.height());
        let gain = light_factor(&spec.lights, placed.location);
        let x0 = b.x0.floor().max(0.0) as usize;
        let y0 = b.y0.floor().max(0.0) as usize;
        let x1 = (b.x1.ceil() as usize).min(w);
        let y1 = (b.y1.ceil() as usize).min(h);
        for py in y0..y1 {
            for px in x0..x1 {
                let mut acc = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let (dx, dy) = ((x - cx) / r, (y - cy) / r);
                        let u = dx * hx + dy * hy;
                        let v = -dx * hy + dy * hx;
                        if glyph_contains(glyph, u, v) {
                            acc += if u >= 0.0 { 1.0 } else { BACK_INTENSITY };
                        }
                    }
                }
                let v = acc * gain / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                if v > 0.0 {
                    canvas.set(px, py, canvas.get(px, py).max(v));
                }
            }
        }
    }
    Ok((canvas, boxes))
}

/// The built-in glyph renderer.
#[derive(Clone, Debug)]
pub struct StubRenderer {
    pub catalog: AssetCatalog,
}

impl Renderer for StubRenderer {
    fn render(&self, spec: &SceneSpec, image_path: &Path) -> Result<RenderOutput> {
        let (canvas, boxes) = draw_scene(spec, &self.catalog).map_err(|e| CompassError::Render {
            job_id: spec.scene_id.clone(),
            message: e.to_string(),
        })?;
        canvas.save(image_path)?;
        Ok(RenderOutput {
            image_path: image_path.to_path_buf(),
            image_size: spec.image_size,
            boxes,
        })
    }
}

#[derive(Serialize)]
struct RenderRequest<'a> {
    spec: &'a SceneSpec,
    image_path: &'a Path,
}

#[derive(Deserialize)]
struct RenderReply {
    image_path: PathBuf,
    boxes: Vec<Box2D>,
    image_size: Option<[usize; 2]>,
}

/// Runs an external program per scene. The program receives
/// `{"spec": ..., "image_path": ...}` on stdin and must print
/// `{"image_path": ..., "boxes": [[x0,y0,x1,y1], ...]}` on stdout.
#[derive(Clone, Debug)]
pub struct CommandRenderer {
    pub program: PathBuf,
    pub args: Vec<String>,
}

/// Runs `program args...` with `input` on stdin and returns stdout.
pub(crate) fn run_json_command(
    program: &Path,
    args: &[String],
    input: &[u8],
) -> std::result::Result<Vec<u8>, String> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("cannot start {}: {e}", program.display()))?;
    child
        .stdin
        .take()
        .expect("stdin is piped")
        .write_all(input)
        .map_err(|e| format!("cannot write request: {e}"))?;
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{} exited with {}: {}",
            program.display(),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(out.stdout)
}

impl Renderer for CommandRenderer {
    fn render(&self, spec: &SceneSpec, image_path: &Path) -> Result<RenderOutput> {
        let fail = |message: String| CompassError::Render {
            job_id: spec.scene_id.clone(),
            message,
        };
        let req = serde_json::to_vec(&RenderRequest { spec, image_path })?;
        let stdout = run_json_command(&self.program, &self.args, &req).map_err(fail)?;
        let reply: RenderReply = serde_json::from_slice(&stdout)
            .map_err(|e| fail(format!("malformed renderer reply: {e}")))?;
        if reply.boxes.len() != spec.assets.len() {
            return Err(fail(format!(
                "renderer returned {} boxes for {} assets",
                reply.boxes.len(),
                spec.assets.len()
            )));
        }
        Ok(RenderOutput {
            image_path: reply.image_path,
            image_size: reply.image_size.unwrap_or(spec.image_size),
            boxes: reply.boxes,
        })
    }
}

/// Renders `spec` into `root/images/<scene_id>.png` and builds its record.
pub fn render_record(
    renderer: &dyn Renderer,
    spec: &SceneSpec,
    catalog: &AssetCatalog,
    root: &Path,
) -> Result<SceneRecord> {
    let rel = PathBuf::from("images").join(format!("{}.png", spec.scene_id));
    let out = renderer.render(spec, &root.join(&rel))?;
    let objects = spec
        .assets
        .iter()
        .zip(out.boxes)
        .map(|(a, b)| {
            let name = catalog
                .get(&a.asset_id)
                .map(|d| d.name.clone())
                .ok_or_else(|| CompassError::Config(format!("unknown asset `{}`", a.asset_id)))?;
            Ok(RecordObject {
                name,
                orientation: a.orientation.clone(),
                tight_box: b,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let image = out.image_path.strip_prefix(root).map(Path::to_path_buf).unwrap_or(out.image_path);
    let record = SceneRecord {
        id: spec.scene_id.clone(),
        image,
        image_size: out.image_size,
        objects,
        background_prompt: String::new(),
        provenance: Provenance::Rendered,
        filter: FilterFlag::Keep,
    };
    let problems = record.problems();
    if !problems.is_empty() {
        return Err(CompassError::Render {
            job_id: spec.scene_id.clone(),
            message: problems.join("; "),
        });
    }
    Ok(record)
}

/// Heading read off an image from its first intensity moment: the offset
/// of the brightness centroid of `region` from `center`, as a
/// counter-clockwise screen angle in `[0, 2π)`. `None` for an empty region.
pub fn pixel_moment_heading(img: &Canvas, region: &Box2D, center: (f64, f64)) -> Option<f64> {
    let (cx, cy) = center;
    let x0 = region.x0.floor().max(0.0) as usize;
    let y0 = region.y0.floor().max(0.0) as usize;
    let x1 = (region.x1.ceil() as usize).min(img.width());
    let y1 = (region.y1.ceil() as usize).min(img.height());
    let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if !region.contains_point(px, py) {
                continue;
            }
            let v = img.get(x, y);
            m += v;
            mx += v * (px - cx);
            my += v * (py - cy);
        }
    }
    if m <= 1e-12 || (mx.abs() < 1e-12 && my.abs() < 1e-12) {
        return None;
    }
    Some((-my).atan2(mx).rem_euclid(std::f64::consts::TAU))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::scene::{sample_scene_spec, SceneConfig};
    use crate::geometry::{circular_distance, loose_box, Orientation};

    #[test]
    fn glyph_shapes() {
        assert!(glyph_contains(Glyph::Arrow, 0.9, 0.0));
        assert!(glyph_contains(Glyph::Arrow, -0.8, 0.1));
        assert!(!glyph_contains(Glyph::Arrow, -0.8, 0.4));
        assert!(!glyph_contains(Glyph::Arrow, 0.97, 0.0));
        assert!(glyph_contains(Glyph::Triangle, -0.5, 0.6));
        assert!(!glyph_contains(Glyph::Triangle, 0.8, 0.5));
    }

    #[test]
    fn moment_heading_recovers_render_heading() {
        let catalog = AssetCatalog::builtin();
        let cfg = SceneConfig::for_image_size(64);
        for seed in 0..40 {
            let mut spec = sample_scene_spec(1, &catalog, &cfg, seed).unwrap();
            let theta = seed as f64 * 0.157;
            spec.assets[0].orientation = Orientation::yaw(theta).unwrap();
            let (img, boxes) = draw_scene(&spec, &catalog).unwrap();
            let lb = loose_box(&boxes[0], 1.2, 64.0, 64.0).unwrap();
            let got = pixel_moment_heading(&img, &lb.region, boxes[0].center()).unwrap();
            let err = circular_distance(got, theta).unwrap();
            assert!(err < 0.35, "seed {seed}: θ={theta:.3} moment={got:.3}");
        }
    }

    #[test]
    fn render_record_writes_image() {
        let dir = std::env::temp_dir().join(format!("compass-render-{}", std::process::id()));
        let catalog = AssetCatalog::builtin();
        let spec = sample_scene_spec(2, &catalog, &SceneConfig::default(), 3).unwrap();
        let r = StubRenderer { catalog: catalog.clone() };
        let rec = render_record(&r, &spec, &catalog, &dir).unwrap();
        assert_eq!(rec.objects.len(), 2);
        assert!(rec.image.is_relative());
        let img = Canvas::load(&dir.join(&rec.image)).unwrap();
        assert_eq!(img.width(), 32);
        assert!(img.data().iter().any(|v| *v > 0.5));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn failing_command_reports_scene_id() {
        let catalog = AssetCatalog::builtin();
        let spec = sample_scene_spec(1, &catalog, &SceneConfig::default(), 9).unwrap();
        let r = CommandRenderer {
            program: "false".into(),
            args: vec![],
        };
        match r.render(&spec, Path::new("/tmp/x.png")) {
            Err(CompassError::Render { job_id, .. }) => assert_eq!(job_id, spec.scene_id),
            other => panic!("unexpected {other:?}"),
        }
    }
}
