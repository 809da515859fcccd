//! Angles, boxes, loose-box construction, attention-grid rasterization,
//! box spawning and the pinhole camera used by the scene generator.
//!
//! Conventions: angles are radians; `θ = 0` faces screen-right and angles
//! grow counter-clockwise as seen on screen (so `π/2` faces up). Pixel
//! coordinates have their origin at the top-left corner, x to the right
//! and y down.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CompassError, Result};

/// Default loose-box padding factor.
pub const DEFAULT_PADDING: f64 = 1.2;

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(CompassError::Domain(format!("non-finite angle {theta}")));
    }
    Ok(wrap_unchecked(theta))
}

fn wrap_unchecked(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Shortest angular distance, in `[0, π]`.
pub fn circular_distance(a: f64, b: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(CompassError::Domain(format!(
            "non-finite angle in circular_distance({a}, {b})"
        )));
    }
    let d = wrap_unchecked(a - b);
    Ok(d.min(TAU - d))
}

/// Angular distance that treats `b` and `b + π` as the same heading, in `[0, π/2]`.
pub fn flip_adjusted_distance(a: f64, b: f64) -> Result<f64> {
    let d = circular_distance(a, b)?;
    Ok(d.min(PI - d))
}

/// One object's orientation: a single up-axis angle, or three angles for
/// the generalized encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Orientation {
    angles: Vec<f64>,
}

impl Orientation {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if angles.len() != 1 && angles.len() != 3 {
            return Err(CompassError::Domain(format!(
                "orientation needs 1 or 3 angles, got {}",
                angles.len()
            )));
        }
        let angles = angles
            .into_iter()
            .map(wrap_angle)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { angles })
    }

    pub fn yaw(theta: f64) -> Result<Self> {
        Self::new(vec![theta])
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// The up-axis angle (first component).
    pub fn theta(&self) -> f64 {
        self.angles[0]
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Rejects mixed single/three-angle orientations within one scene.
pub fn check_uniform_arity<'a>(orientations: impl IntoIterator<Item = &'a Orientation>) -> Result<()> {
    let mut arity = None;
    for o in orientations {
        match arity {
            None => arity = Some(o.len()),
            Some(n) if n != o.len() => {
                return Err(CompassError::Domain(
                    "mixed orientation arities within one scene".into(),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum OrientationRepr {
    Yaw(f64),
    Angles(Vec<f64>),
}

impl Serialize for Orientation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.angles.len() == 1 {
            OrientationRepr::Yaw(self.angles[0]).serialize(s)
        } else {
            OrientationRepr::Angles(self.angles.clone()).serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for Orientation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = OrientationRepr::deserialize(d).map_err(|_| {
            serde::de::Error::custom("expected an angle in radians or an array of 3 angles")
        })?;
        let angles = match repr {
            OrientationRepr::Yaw(t) => vec![t],
            OrientationRepr::Angles(v) => v,
        };
        Orientation::new(angles).map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned pixel box; serializes as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Box2D {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Box2D {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(CompassError::Domain(format!("non-finite box {b:?}")));
        }
        if x0 < 0.0 || y0 < 0.0 {
            return Err(CompassError::Domain(format!("negative box coordinate {b:?}")));
        }
        if !(x0 < x1 && y0 < y1) {
            return Err(CompassError::Domain(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn contains_box(&self, other: &Box2D) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    /// Boundary-inclusive point test.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn within_image(&self, width: f64, height: f64) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn intersection_area(&self, other: &Box2D) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    /// Grows the box by `margin` on every side, clipped to the image.
    pub fn dilate(&self, margin: f64, width: f64, height: f64) -> Box2D {
        Box2D {
            x0: (self.x0 - margin).max(0.0),
            y0: (self.y0 - margin).max(0.0),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        }
    }
}

impl TryFrom<[f64; 4]> for Box2D {
    type Error = CompassError;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Box2D::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Box2D> for [f64; 4] {
    fn from(b: Box2D) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Intersection over union.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// The square admissible region around a tight box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooseBox {
    /// Clipped square region.
    #[serde(rename = "box")]
    pub region: Box2D,
    /// Side length before clipping.
    pub side: f64,
    pub padding: f64,
    /// The tight box this region was derived from.
    pub source: Box2D,
}

/// Builds the loose square box of side `padding * max(h, w)` around `tight`,
/// centred on it and clipped (not shifted) to the image.
pub fn loose_box(tight: &Box2D, padding: f64, image_w: f64, image_h: f64) -> Result<LooseBox> {
    if !padding.is_finite() || padding < 1.0 {
        return Err(CompassError::Config(format!(
            "loose-box padding must be >= 1, got {padding}"
        )));
    }
    if !tight.within_image(image_w, image_h) {
        return Err(CompassError::Domain(format!(
            "box {tight:?} outside the {image_w}x{image_h} image"
        )));
    }
    let side = padding * tight.width().max(tight.height());
    let (cx, cy) = tight.center();
    let half = side / 2.0;
    // min/max with the source guards containment against rounding.
    let region = Box2D {
        x0: (cx - half).min(tight.x0).max(0.0),
        y0: (cy - half).min(tight.y0).max(0.0),
        x1: (cx + half).max(tight.x1).min(image_w),
        y1: (cy + half).max(tight.y1).min(image_h),
    };
    Ok(LooseBox {
        region,
        side,
        padding,
        source: *tight,
    })
}

/// Additive attention mask over a `grid_w x grid_h` grid: each cell is either
/// `0` (open) or `-∞` (blocked). Cells are stored row-major, row = y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialMask {
    pub grid_w: usize,
    pub grid_h: usize,
    open: Vec<bool>,
}

impl SpatialMask {
    pub fn from_open(grid_w: usize, grid_h: usize, open: Vec<bool>) -> Result<Self> {
        if open.len() != grid_w * grid_h {
            return Err(CompassError::Mask("mask size does not match grid".into()));
        }
        if !open.iter().any(|&o| o) {
            return Err(CompassError::Mask("mask blocks every cell".into()));
        }
        Ok(Self {
            grid_w,
            grid_h,
            open,
        })
    }

    pub fn is_open(&self, cell: usize) -> bool {
        self.open[cell]
    }

    pub fn is_open_xy(&self, x: usize, y: usize) -> bool {
        self.open[y * self.grid_w + x]
    }

    /// The additive logit offset of a cell: `0.0` or `-∞`.
    pub fn value(&self, cell: usize) -> f64 {
        if self.open[cell] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn cells(&self) -> usize {
        self.open.len()
    }

    pub fn open_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.open
            .iter()
            .enumerate()
            .filter_map(|(i, &o)| o.then_some(i))
    }
}

/// Pixel-space centre of grid cell `(x, y)`.
pub fn cell_center(
    x: usize,
    y: usize,
    grid_w: usize,
    grid_h: usize,
    image_w: f64,
    image_h: f64,
) -> (f64, f64) {
    (
        (x as f64 + 0.5) * image_w / grid_w as f64,
        (y as f64 + 0.5) * image_h / grid_h as f64,
    )
}

/// Opens every cell whose centre lies inside the loose box (boundary
/// inclusive). A box too small to contain any centre opens the single cell
/// nearest to the box centre.
pub fn rasterize_mask(
    lb: &LooseBox,
    grid_w: usize,
    grid_h: usize,
    image_w: f64,
    image_h: f64,
) -> Result<SpatialMask> {
    if grid_w == 0 || grid_h == 0 {
        return Err(CompassError::Config("attention grid must be at least 1x1".into()));
    }
    let r = &lb.region;
    let mut open = vec![false; grid_w * grid_h];
    for y in 0..grid_h {
        for x in 0..grid_w {
            let (px, py) = cell_center(x, y, grid_w, grid_h, image_w, image_h);
            open[y * grid_w + x] = r.contains_point(px, py);
        }
    }
    if !open.iter().any(|&o| o) {
        let (bx, by) = r.center();
        let mut best = (f64::INFINITY, 0);
        for y in 0..grid_h {
            for x in 0..grid_w {
                let (px, py) = cell_center(x, y, grid_w, grid_h, image_w, image_h);
                let d = (px - bx).powi(2) + (py - by).powi(2);
                if d < best.0 {
                    best = (d, y * grid_w + x);
                }
            }
        }
        open[best.1] = true;
    }
    SpatialMask::from_open(grid_w, grid_h, open)
}

/// Box-spawning parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpawnConfig {
    /// Box side as a fraction of the image side, sampled per axis.
    pub size_range: (f64, f64),
    /// Total placement attempts before giving up.
    pub max_attempts: usize,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self {
            size_range: (0.25, 0.4),
            max_attempts: 1000,
        }
    }
}

pub const MAX_SPAWNED_BOXES: usize = 6;

/// Failed placements in a row before the layout is discarded.
const RESTART_AFTER: usize = 50;

/// Spawns `n` pairwise non-overlapping boxes (IoU exactly 0).
pub fn spawn_boxes(
    n: usize,
    image_w: f64,
    image_h: f64,
    seed: u64,
    size_range: (f64, f64),
) -> Result<Vec<Box2D>> {
    spawn_boxes_avoiding(
        n,
        &[],
        image_w,
        image_h,
        seed,
        &SpawnConfig {
            size_range,
            ..SpawnConfig::default()
        },
    )
}

/// Like [`spawn_boxes`] but also keeps clear of `existing` boxes.
pub fn spawn_boxes_avoiding(
    n: usize,
    existing: &[Box2D],
    image_w: f64,
    image_h: f64,
    seed: u64,
    cfg: &SpawnConfig,
) -> Result<Vec<Box2D>> {
    if n + existing.len() > MAX_SPAWNED_BOXES {
        return Err(CompassError::Config(format!(
            "at most {MAX_SPAWNED_BOXES} boxes per scene"
        )));
    }
    let (lo, hi) = cfg.size_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(CompassError::Config(format!(
            "size range {:?} must satisfy 0 < lo <= hi <= 1",
            cfg.size_range
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<Box2D> = Vec::with_capacity(n);
    let (mut attempts, mut stuck) = (0, 0);
    while placed.len() < n {
        if stuck >= RESTART_AFTER {
            // a crowded partial layout rarely recovers; start over
            placed.clear();
            stuck = 0;
        }
        if attempts >= cfg.max_attempts {
            return Err(CompassError::Placement(format!(
                "placed {} of {n} boxes within {} attempts",
                placed.len(),
                cfg.max_attempts
            )));
        }
        attempts += 1;
        stuck += 1;
        let bw = rng.random_range(lo..=hi) * image_w;
        let bh = rng.random_range(lo..=hi) * image_h;
        let others: Vec<Box2D> = existing.iter().chain(placed.iter()).copied().collect();
        let fits = |x0: f64, y0: f64| {
            Box2D::new(x0, y0, x0 + bw, y0 + bh)
                .ok()
                .filter(|c| c.within_image(image_w, image_h) && others.iter().all(|b| b.intersection_area(c) == 0.0))
        };
        let x0 = rng.random_range(0.0..=(image_w - bw));
        let y0 = rng.random_range(0.0..=(image_h - bh));
        let candidate = fits(x0, y0).or_else(|| {
            // fall back to positions flush against the walls or another box
            let xs = flush_positions(&others, bw, image_w, |b| (b.x0, b.x1));
            let ys = flush_positions(&others, bh, image_h, |b| (b.y0, b.y1));
            let free: Vec<Box2D> = xs.iter().flat_map(|&x| ys.iter().filter_map(move |&y| fits(x, y))).collect();
            (!free.is_empty()).then(|| free[rng.random_range(0..free.len())])
        });
        if let Some(c) = candidate {
            placed.push(c);
            stuck = 0;
        }
    }
    Ok(placed)
}

/// Offsets along one axis at which a box of `len` touches a wall or the
/// near/far edge of another box.
fn flush_positions(others: &[Box2D], len: f64, limit: f64, span: impl Fn(&Box2D) -> (f64, f64)) -> Vec<f64> {
    let mut out = vec![0.0, limit - len];
    for b in others {
        let (a, z) = span(b);
        out.extend([z, a - len]);
    }
    out.retain(|&v| v >= 0.0 && v <= limit - len);
    out
}

/// Axis-aligned box in world units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb3 {
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            for (axis, v) in c.iter_mut().enumerate() {
                *v = if i >> axis & 1 == 1 {
                    self.max[axis]
                } else {
                    self.min[axis]
                };
            }
        }
        out
    }

    pub fn centered(center: [f64; 3], half: [f64; 3]) -> Self {
        Self {
            min: [center[0] - half[0], center[1] - half[1], center[2] - half[2]],
            max: [center[0] + half[0], center[1] + half[1], center[2] + half[2]],
        }
    }
}

/// Pinhole camera. World frame: x right, y forward, z up. The camera looks
/// along +y, pitched down towards the floor by `tilt` radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal_px: f64,
    pub principal_point: [f64; 2],
    pub position: [f64; 3],
    pub tilt: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px.is_finite() && self.focal_px > 0.0) {
            return Err(CompassError::Config("focal length must be positive".into()));
        }
        Ok(())
    }

    /// Camera-frame coordinates `(right, down, depth)` of a world point.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.position[0],
            p[1] - self.position[1],
            p[2] - self.position[2],
        ];
        let (s, c) = self.tilt.sin_cos();
        let depth = d[1] * c - d[2] * s;
        let up = d[1] * s + d[2] * c;
        [d[0], -up, depth]
    }

    /// Projects a world point to pixels; points at or behind the camera plane fail.
    pub fn project(&self, p: [f64; 3]) -> Result<(f64, f64)> {
        let [x, y, z] = self.to_camera(p);
        if z <= 1e-9 {
            return Err(CompassError::Projection(format!(
                "point {p:?} is behind the camera"
            )));
        }
        Ok((
            self.principal_point[0] + self.focal_px * x / z,
            self.principal_point[1] + self.focal_px * y / z,
        ))
    }
}

/// Tight pixel box around the projection of all eight corners.
pub fn project_bounds(asset_aabb: &Aabb3, cam: &CameraModel) -> Result<Box2D> {
    cam.validate()?;
    let mut ext = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for corner in asset_aabb.corners() {
        let (u, v) = cam.project(corner)?;
        ext[0] = ext[0].min(u);
        ext[1] = ext[1].min(v);
        ext[2] = ext[2].max(u);
        ext[3] = ext[3].max(v);
    }
    Box2D::new(ext[0], ext[1], ext[2], ext[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn wrap_angle_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert!(close(wrap_angle(-PI / 2.0).unwrap(), 3.0 * PI / 2.0));
        assert!(close(wrap_angle(5.0 * PI).unwrap(), PI));
        assert!(wrap_angle(-1e-300).unwrap() < TAU);
        assert!(matches!(wrap_angle(f64::NAN), Err(CompassError::Domain(_))));
        assert!(matches!(wrap_angle(f64::INFINITY), Err(CompassError::Domain(_))));
    }

    #[test]
    fn circular_distance_examples() {
        assert_eq!(circular_distance(0.0, 0.0).unwrap(), 0.0);
        assert!((circular_distance(0.1, TAU - 0.1).unwrap() - 0.2).abs() < 1e-12);
        assert!(close(circular_distance(0.0, PI).unwrap(), PI));
        assert!(circular_distance(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn flip_adjusted_examples() {
        assert!(close(flip_adjusted_distance(0.0, PI).unwrap(), 0.0));
        assert!(close(flip_adjusted_distance(0.0, PI / 2.0).unwrap(), PI / 2.0));
        assert_eq!(flip_adjusted_distance(0.3, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn orientation_arity_and_wrapping() {
        let o = Orientation::new(vec![-PI / 2.0]).unwrap();
        assert!(close(o.theta(), 3.0 * PI / 2.0));
        assert!(Orientation::new(vec![0.0, 1.0]).is_err());
        assert!(Orientation::new(vec![]).is_err());
        let three = Orientation::new(vec![0.0, 7.0, -1.0]).unwrap();
        assert!(three.angles().iter().all(|a| (0.0..TAU).contains(a)));
        assert!(check_uniform_arity([&o, &three]).is_err());
        assert!(check_uniform_arity([&o, &o]).is_ok());
    }

    #[test]
    fn orientation_serializes_as_radians() {
        let o = Orientation::yaw(1.5).unwrap();
        assert_eq!(serde_json::to_string(&o).unwrap(), "1.5");
        let back: Orientation = serde_json::from_str("[0.1, 0.2, 0.3]").unwrap();
        assert_eq!(back.len(), 3);
        assert!(serde_json::from_str::<Orientation>("\"north\"").is_err());
    }

    #[test]
    fn box_serializes_as_array() {
        let b = Box2D::new(1.0, 2.0, 3.0, 4.5).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.0,4.5]");
        assert_eq!(serde_json::from_str::<Box2D>("[1,2,3,4.5]").unwrap(), b);
        assert!(serde_json::from_str::<Box2D>("[3,2,1,4]").is_err());
        assert!(Box2D::new(-1.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn loose_box_worked_example() {
        let b = Box2D::new(100.0, 100.0, 160.0, 200.0).unwrap();
        let lb = loose_box(&b, 1.2, 512.0, 512.0).unwrap();
        assert_eq!(lb.side, 120.0);
        assert_eq!(lb.region.center(), (130.0, 150.0));
        let expect = [70.0, 90.0, 190.0, 210.0];
        let got: [f64; 4] = lb.region.into();
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-9, "{got:?}");
        }
    }

    #[test]
    fn unit_padding_on_square_box_is_identity() {
        let b = Box2D::new(10.0, 20.0, 50.0, 60.0).unwrap();
        assert_eq!(loose_box(&b, 1.0, 100.0, 100.0).unwrap().region, b);
    }

    #[test]
    fn loose_box_errors() {
        let b = Box2D::new(10.0, 20.0, 50.0, 60.0).unwrap();
        assert!(matches!(loose_box(&b, 0.9, 100.0, 100.0), Err(CompassError::Config(_))));
        assert!(matches!(loose_box(&b, 1.2, 40.0, 100.0), Err(CompassError::Domain(_))));
    }

    #[test]
    fn loose_box_contains_source_near_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (w, h) = (rng.random_range(16.0..600.0), rng.random_range(16.0..600.0));
            let x0 = rng.random_range(0.0..w - 2.0);
            let y0 = rng.random_range(0.0..h - 2.0);
            let x1 = rng.random_range(x0 + 1.0..=w);
            let y1 = rng.random_range(y0 + 1.0..=h);
            let b = Box2D::new(x0, y0, x1, y1).unwrap();
            let lambda = rng.random_range(1.0..3.0);
            let lb = loose_box(&b, lambda, w, h).unwrap();
            assert!(lb.region.contains_box(&b), "{b:?} {lb:?}");
            assert!(lb.region.x0 >= 0.0 && lb.region.y0 >= 0.0);
            assert!(lb.region.x1 <= w && lb.region.y1 <= h);
        }
    }

    fn lb(region: Box2D) -> LooseBox {
        LooseBox {
            region,
            side: region.width().max(region.height()),
            padding: 1.0,
            source: region,
        }
    }

    #[test]
    fn full_image_box_opens_everything() {
        let m = rasterize_mask(&lb(Box2D::new(0.0, 0.0, 64.0, 48.0).unwrap()), 7, 5, 64.0, 48.0)
            .unwrap();
        assert_eq!(m.open_cells().count(), 35);
    }

    #[test]
    fn left_half_box_on_two_by_two_grid() {
        let m = rasterize_mask(&lb(Box2D::new(0.0, 0.0, 32.0, 64.0).unwrap()), 2, 2, 64.0, 64.0)
            .unwrap();
        assert!(m.is_open_xy(0, 0) && m.is_open_xy(0, 1));
        assert!(!m.is_open_xy(1, 0) && !m.is_open_xy(1, 1));
        assert_eq!(m.value(1), f64::NEG_INFINITY);
        assert_eq!(m.value(0), 0.0);
    }

    #[test]
    fn tiny_box_opens_nearest_cell() {
        let m = rasterize_mask(&lb(Box2D::new(40.0, 9.0, 41.0, 10.0).unwrap()), 4, 4, 64.0, 64.0)
            .unwrap();
        assert_eq!(m.open_cells().collect::<Vec<_>>(), vec![2]);
        assert!(rasterize_mask(&lb(Box2D::new(0.0, 0.0, 1.0, 1.0).unwrap()), 0, 4, 8.0, 8.0).is_err());
    }

    /// Per-pixel oracle: rasterize the box at pixel resolution, then sample
    /// the pixel containing each cell centre.
    #[test]
    fn rasterization_matches_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let size = 256usize;
        for _ in 0..200 {
            let x0 = rng.random_range(0..size - 40) as f64;
            let y0 = rng.random_range(0..size - 40) as f64;
            let w = rng.random_range(20..40) as f64;
            let h = rng.random_range(20..40) as f64;
            let region = Box2D::new(x0, y0, x0 + w, y0 + h).unwrap();
            let mask = rasterize_mask(&lb(region), 64, 64, size as f64, size as f64).unwrap();
            // bitmap over the integer pixel lattice, closed box
            let bitmap: Vec<Vec<bool>> = (0..=size)
                .map(|py| {
                    (0..=size)
                        .map(|px| {
                            let (fx, fy) = (px as f64, py as f64);
                            fx >= region.x0 && fx <= region.x1 && fy >= region.y0 && fy <= region.y1
                        })
                        .collect()
                })
                .collect();
            // 4-pixel cells: the centre of cell c sits on lattice point 4c + 2
            for cy in 0..64 {
                for cx in 0..64 {
                    assert_eq!(mask.is_open_xy(cx, cy), bitmap[4 * cy + 2][4 * cx + 2]);
                }
            }
        }
    }

    #[test]
    fn spawn_is_deterministic_and_in_bounds() {
        let a = spawn_boxes(1, 512.0, 512.0, 7, (0.2, 0.4)).unwrap();
        let b = spawn_boxes(1, 512.0, 512.0, 7, (0.2, 0.4)).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert!(a[0].within_image(512.0, 512.0));
    }

    #[test]
    fn spawn_five_boxes_never_overlap() {
        for seed in 0..100 {
            let boxes = spawn_boxes(5, 512.0, 512.0, seed, (0.1, 0.3)).unwrap();
            assert_eq!(boxes.len(), 5);
            for i in 0..5 {
                for j in i + 1..5 {
                    assert_eq!(iou(&boxes[i], &boxes[j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn spawn_pigeonhole_fails() {
        let err = spawn_boxes(6, 512.0, 512.0, 1, (0.55, 0.9)).unwrap_err();
        assert!(matches!(err, CompassError::Placement(_)));
        assert!(matches!(
            spawn_boxes(7, 512.0, 512.0, 1, (0.1, 0.2)),
            Err(CompassError::Config(_))
        ));
        assert!(spawn_boxes(1, 512.0, 512.0, 1, (0.0, 0.2)).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = Box2D::new(1.0, 1.0, 3.0, 3.0).unwrap();
        let far = Box2D::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &far), 0.0);
        // overlap 1, union 4 + 4 - 1 = 7
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    fn test_camera() -> CameraModel {
        CameraModel {
            focal_px: 100.0,
            principal_point: [64.0, 48.0],
            position: [0.0, 0.0, 0.0],
            tilt: 0.0,
        }
    }

    #[test]
    fn cube_on_axis_projects_around_principal_point() {
        let cam = test_camera();
        let b = project_bounds(&Aabb3::centered([0.0, 5.0, 0.0], [0.5; 3]), &cam).unwrap();
        let (cx, cy) = b.center();
        assert!((cx - 64.0).abs() < 1e-9 && (cy - 48.0).abs() < 1e-9);
    }

    #[test]
    fn doubling_depth_halves_box_side() {
        // A flat square facing the camera keeps exact pinhole scaling.
        let cam = test_camera();
        let near = project_bounds(
            &Aabb3 {
                min: [-0.5, 4.0, -0.5],
                max: [0.5, 4.0, 0.5],
            },
            &cam,
        )
        .unwrap();
        let far = project_bounds(
            &Aabb3 {
                min: [-0.5, 8.0, -0.5],
                max: [0.5, 8.0, 0.5],
            },
            &cam,
        )
        .unwrap();
        assert!((near.width() - 2.0 * far.width()).abs() < 1e-9);
        assert!((near.height() - 2.0 * far.height()).abs() < 1e-9);
    }

    #[test]
    fn projection_matches_corner_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cam = CameraModel {
            focal_px: 80.0,
            principal_point: [128.0, 128.0],
            position: [0.0, -6.0, 3.0],
            tilt: 15f64.to_radians(),
        };
        let mut checked = 0;
        for _ in 0..500 {
            let c = [
                rng.random_range(-2.0..2.0),
                rng.random_range(2.0..8.0),
                rng.random_range(0.0..1.0),
            ];
            let aabb = Aabb3::centered(c, [rng.random_range(0.1..1.0); 3]);
            // oracle: explicit rotation matrix and min/max over the corners
            let (s, co) = cam.tilt.sin_cos();
            let mut ext = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
            let mut behind = false;
            for k in 0..8 {
                let p = [
                    if k & 1 == 1 { aabb.max[0] } else { aabb.min[0] },
                    if k & 2 == 2 { aabb.max[1] } else { aabb.min[1] },
                    if k & 4 == 4 { aabb.max[2] } else { aabb.min[2] },
                ];
                let d = [p[0] - cam.position[0], p[1] - cam.position[1], p[2] - cam.position[2]];
                let z = co * d[1] - s * d[2];
                let ydown = -(s * d[1] + co * d[2]);
                if z <= 1e-9 {
                    behind = true;
                    break;
                }
                let u = 128.0 + 80.0 * d[0] / z;
                let v = 128.0 + 80.0 * ydown / z;
                ext = [ext[0].min(u), ext[1].min(v), ext[2].max(u), ext[3].max(v)];
            }
            match project_bounds(&aabb, &cam) {
                Ok(b) => {
                    assert!(!behind);
                    let got: [f64; 4] = b.into();
                    for (g, e) in got.iter().zip(ext) {
                        assert!((g - e).abs() < 1e-9);
                    }
                    checked += 1;
                }
                Err(_) => assert!(behind || ext[0] < 0.0 || ext[1] < 0.0),
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn corner_behind_camera_is_a_projection_error() {
        let cam = test_camera();
        let err = project_bounds(&Aabb3::centered([0.0, 0.2, 0.0], [0.5; 3]), &cam).unwrap_err();
        assert!(matches!(err, CompassError::Projection(_)));
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent(x in -1e6f64..1e6) {
            let w = wrap_angle(x).unwrap();
            prop_assert_eq!(wrap_angle(w).unwrap(), w);
            prop_assert!((0.0..TAU).contains(&w));
        }

        #[test]
        fn distance_invariant_under_full_turns(a in -50.0f64..50.0, b in -50.0f64..50.0, k in -20i32..20, m in -20i32..20) {
            let d = circular_distance(a, b).unwrap();
            let shifted = circular_distance(a + TAU * k as f64, b + TAU * m as f64).unwrap();
            prop_assert!((d - shifted).abs() < 1e-9);
            prop_assert!((d - circular_distance(b, a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn triangle_inequality(a in 0.0f64..TAU, b in 0.0f64..TAU, c in 0.0f64..TAU) {
            let ab = circular_distance(a, b).unwrap();
            let bc = circular_distance(b, c).unwrap();
            let ac = circular_distance(a, c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn flip_adjusted_is_flip_invariant(a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let f = flip_adjusted_distance(a, b).unwrap();
            let g = flip_adjusted_distance(a, b + PI).unwrap();
            prop_assert!((f - g).abs() < 1e-12);
            prop_assert!(f <= circular_distance(a, b).unwrap());
        }

        #[test]
        fn rasterization_consistent_across_resolutions(
            x0 in 0.0f64..200.0, y0 in 0.0f64..200.0, w in 33.0f64..56.0, h in 33.0f64..56.0,
        ) {
            let region = Box2D::new(x0, y0, x0 + w, y0 + h).unwrap();
            for g in [8usize, 16, 32, 64] {
                let m = rasterize_mask(&lb(region), g, g, 256.0, 256.0).unwrap();
                for cell in m.open_cells() {
                    let (cx, cy) = cell_center(cell % g, cell / g, g, g, 256.0, 256.0);
                    prop_assert!(region.contains_point(cx, cy));
                }
            }
        }
    }
}
