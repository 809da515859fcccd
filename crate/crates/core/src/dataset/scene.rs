//! Procedural scene specifications and the records produced from them.

use std::f64::consts::TAU;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::AssetCatalog;
use crate::error::{CompassError, Result};
use crate::geometry::{project_bounds, Aabb3, Box2D, CameraModel, Orientation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedAsset {
    pub asset_id: String,
    /// World position of the asset's bounding-box centre.
    pub location: [f64; 3],
    pub orientation: Orientation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: [f64; 3],
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub assets: Vec<PlacedAsset>,
    pub camera: CameraModel,
    pub lights: Vec<PointLight>,
    /// `[width, height]` in pixels.
    pub image_size: [usize; 2],
}

/// Ranges the scene sampler draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub camera: CameraModel,
    /// Lateral world range for asset centres.
    pub x_range: (f64, f64),
    /// Forward (depth) world range for asset centres.
    pub depth_range: (f64, f64),
    pub light_intensity: (f64, f64),
    pub light_box_min: [f64; 3],
    pub light_box_max: [f64; 3],
    /// When set, θ is drawn uniformly from this many evenly spaced headings
    /// instead of the continuous circle.
    pub orientation_levels: Option<usize>,
    pub max_attempts: usize,
}

/// Default camera for an `image_size`² frame: 2 units above the floor,
/// pitched 15° down.
pub fn default_camera(image_size: usize) -> CameraModel {
    let s = image_size as f64;
    CameraModel {
        focal_px: 1.2 * s,
        principal_point: [s / 2.0, s / 2.0],
        position: [0.0, 0.0, 2.0],
        tilt: 15f64.to_radians(),
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            camera: default_camera(32),
            x_range: (-2.5, 2.5),
            depth_range: (4.5, 8.0),
            light_intensity: (100.0, 1000.0),
            light_box_min: [-5.0, 0.0, 3.0],
            light_box_max: [5.0, 8.0, 6.0],
            orientation_levels: None,
            max_attempts: 1000,
        }
    }
}

impl SceneConfig {
    pub fn for_image_size(image_size: usize) -> Self {
        Self {
            image_size,
            camera: default_camera(image_size),
            ..Self::default()
        }
    }
}

/// Asset bounding box at a location. The box is symmetric in x and y, so
/// its projection does not depend on the heading.
pub fn placed_aabb(catalog: &AssetCatalog, placed: &PlacedAsset) -> Result<Aabb3> {
    let asset = catalog
        .get(&placed.asset_id)
        .ok_or_else(|| CompassError::Config(format!("unknown asset `{}`", placed.asset_id)))?;
    let h = asset.half_extents;
    let r = h[0].max(h[1]);
    Ok(Aabb3::centered(placed.location, [r, r, h[2]]))
}

/// Tight boxes of every asset, in spec order.
pub fn project_spec(spec: &SceneSpec, catalog: &AssetCatalog) -> Result<Vec<Box2D>> {
    spec.assets
        .iter()
        .map(|a| project_bounds(&placed_aabb(catalog, a)?, &spec.camera))
        .collect()
}

fn sample_theta(rng: &mut ChaCha8Rng, levels: Option<usize>) -> f64 {
    match levels {
        Some(n) if n > 0 => rng.random_range(0..n) as f64 * TAU / n as f64,
        _ => rng.random_range(0.0..TAU),
    }
}

/// Samples a scene with `n_objects` distinct assets, rejection-sampling
/// locations until every projected box is inside the frame and (for two
/// objects) the boxes are disjoint.
pub fn sample_scene_spec(
    n_objects: usize,
    catalog: &AssetCatalog,
    config: &SceneConfig,
    seed: u64,
) -> Result<SceneSpec> {
    if !(1..=2).contains(&n_objects) {
        return Err(CompassError::Config(format!(
            "scenes hold 1 or 2 assets, asked for {n_objects}"
        )));
    }
    catalog.validate()?;
    if catalog.len() < n_objects {
        return Err(CompassError::Config(format!(
            "catalog has {} assets, need {n_objects} distinct ones",
            catalog.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = Vec::with_capacity(n_objects);
    while ids.len() < n_objects {
        let i = rng.random_range(0..catalog.len());
        if !ids.contains(&i) {
            ids.push(i);
        }
    }
    let lights = (0..3)
        .map(|_| PointLight {
            position: std::array::from_fn(|k| {
                rng.random_range(config.light_box_min[k]..=config.light_box_max[k])
            }),
            intensity: rng.random_range(config.light_intensity.0..=config.light_intensity.1),
        })
        .collect();
    let size = config.image_size as f64;
    // Whole placements are redrawn on failure so an early asset cannot
    // block the rest.
    let mut attempts = 0;
    let placed = 'attempt: loop {
        if attempts >= config.max_attempts {
            return Err(CompassError::Placement(format!(
                "could not place {n_objects} assets within {} attempts",
                config.max_attempts
            )));
        }
        attempts += 1;
        let mut placed: Vec<PlacedAsset> = Vec::with_capacity(n_objects);
        let mut boxes: Vec<Box2D> = Vec::with_capacity(n_objects);
        for &i in &ids {
            let asset = &catalog.assets[i];
            let candidate = PlacedAsset {
                asset_id: asset.id.clone(),
                location: [
                    rng.random_range(config.x_range.0..=config.x_range.1),
                    rng.random_range(config.depth_range.0..=config.depth_range.1),
                    asset.half_extents[2],
                ],
                orientation: Orientation::yaw(sample_theta(&mut rng, config.orientation_levels))?,
            };
            let Ok(b) = project_bounds(&placed_aabb(catalog, &candidate)?, &config.camera) else {
                continue 'attempt;
            };
            if !b.within_image(size, size) || boxes.iter().any(|o| o.intersection_area(&b) > 0.0) {
                continue 'attempt;
            }
            placed.push(candidate);
            boxes.push(b);
        }
        break placed;
    };
    Ok(SceneSpec {
        scene_id: format!("scene-{seed:010}"),
        assets: placed,
        camera: config.camera,
        lights,
        image_size: [config.image_size, config.image_size],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordObject {
    pub name: String,
    #[serde(rename = "theta")]
    pub orientation: Orientation,
    pub tight_box: Box2D,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Rendered,
    Augmented { source: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterFlag {
    Keep,
    Reject,
    Unreviewed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: String,
    /// Image path, relative to the dataset root unless absolute.
    pub image: PathBuf,
    pub image_size: [usize; 2],
    pub objects: Vec<RecordObject>,
    /// Scene text; `<subject>` marks where the object phrase goes. Empty
    /// for plain renders.
    pub background_prompt: String,
    pub provenance: Provenance,
    pub filter: FilterFlag,
}

/// Words for the eight compass sectors, starting at `θ = 0` (screen-right)
/// and turning counter-clockwise.
pub const HEADING_WORDS: [&str; 8] = [
    "east",
    "northeast",
    "north",
    "northwest",
    "west",
    "southwest",
    "south",
    "southeast",
];

/// Sector word nearest to `theta`.
pub fn heading_word(theta: f64) -> &'static str {
    let k = (theta.rem_euclid(TAU) / (TAU / 8.0)).round() as usize % 8;
    HEADING_WORDS[k]
}

impl SceneRecord {
    pub fn is_single(&self) -> bool {
        self.objects.len() == 1
    }

    /// Invariant violations, empty when the record is sound.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.objects.is_empty() {
            out.push(format!("{}: no objects", self.id));
        }
        let [w, h] = self.image_size;
        for o in &self.objects {
            if !o.orientation.angles().iter().all(|a| (0.0..TAU).contains(a)) {
                out.push(format!("{}: orientation of `{}` outside [0, 2π)", self.id, o.name));
            }
            if Box2D::new(o.tight_box.x0, o.tight_box.y0, o.tight_box.x1, o.tight_box.y1).is_err()
                || !o.tight_box.within_image(w as f64, h as f64)
            {
                out.push(format!("{}: invalid box for `{}`", self.id, o.name));
            }
        }
        for i in 0..self.objects.len() {
            for j in i + 1..self.objects.len() {
                if self.objects[i].tight_box.intersection_area(&self.objects[j].tight_box) > 0.0 {
                    out.push(format!(
                        "{}: boxes of `{}` and `{}` overlap",
                        self.id, self.objects[i].name, self.objects[j].name
                    ));
                }
            }
        }
        if let Provenance::Augmented { source } = &self.provenance {
            if source.is_empty() {
                out.push(format!("{}: augmented record without a source", self.id));
            }
        }
        if self.image.as_os_str().is_empty() {
            out.push(format!("{}: empty image path", self.id));
        }
        out
    }

    /// `a {n1}` or `a {n1} and a {n2}`.
    pub fn subject_phrase(&self) -> String {
        self.objects
            .iter()
            .map(|o| format!("a {{{}}}", o.name))
            .collect::<Vec<_>>()
            .join(" and ")
    }

    /// Slot template used for training captions.
    pub fn caption_template(&self) -> String {
        let subject = self.subject_phrase();
        if self.background_prompt.trim().is_empty() {
            format!("a photo of {subject}")
        } else if self.background_prompt.contains("<subject>") {
            self.background_prompt.replace("<subject>", &subject)
        } else {
            format!("a photo of {subject} {}", self.background_prompt)
        }
    }

    /// Caption in which each object is preceded by its heading word, with
    /// the heading word inside the slot (used to pretrain the toy backbone).
    pub fn heading_caption_template(&self) -> String {
        let subject = self
            .objects
            .iter()
            .map(|o| format!("a {{{} {}}}", heading_word(o.orientation.theta()), o.name))
            .collect::<Vec<_>>()
            .join(" and ");
        let plain = self.subject_phrase();
        self.caption_template().replacen(&plain, &subject, 1)
    }
}
