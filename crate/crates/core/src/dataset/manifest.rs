//! JSONL manifests: corpus generation, review and stage compilation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::AssetCatalog;
use super::render::{pixel_moment_heading, render_record, Renderer};
use super::scene::{sample_scene_spec, FilterFlag, Provenance, SceneConfig, SceneRecord};
use crate::error::{CompassError, Result};
use crate::geometry::{circular_distance, loose_box, DEFAULT_PADDING};
use crate::imaging::Canvas;

/// Corpus sizes of the full-scale dataset.
pub const FULL_SCALE_RENDERED_SINGLE: usize = 1000;
pub const FULL_SCALE_RENDERED_MULTI: usize = 7900;
pub const FULL_SCALE_AUGMENTED_SINGLE: usize = 771;
pub const FULL_SCALE_AUGMENTED_MULTI: usize = 5239;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Single-object records only.
    #[serde(rename = "1")]
    Single,
    /// Every kept record.
    #[serde(rename = "2")]
    Mixed,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::Single),
            2 => Ok(Stage::Mixed),
            _ => Err(CompassError::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }
}

pub fn to_jsonl(records: &[SceneRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<SceneRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CompassError::Data(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[SceneRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CompassError::io(dir, e))?;
    }
    compass_autograd::write_atomic(path, to_jsonl(records)?.as_bytes()).map_err(|e| CompassError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SceneRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CompassError::io(path, e))?;
    from_jsonl(&text)
}

/// All invariant violations across `records`, including duplicate ids.
pub fn validate_records(records: &[SceneRecord]) -> Vec<String> {
    let mut problems: Vec<String> = records.iter().flat_map(SceneRecord::problems).collect();
    let mut seen = BTreeMap::new();
    for r in records {
        *seen.entry(r.id.as_str()).or_insert(0usize) += 1;
    }
    problems.extend(seen.into_iter().filter(|(_, n)| *n > 1).map(|(id, n)| format!("{id}: id appears {n} times")));
    problems
}

/// Training manifest for `stage`: kept records only (stage 1 further
/// restricted to single-object scenes), sorted by id. Any invalid record
/// fails the whole compilation.
pub fn compile_manifest(records: &[SceneRecord], stage: Stage) -> Result<Vec<SceneRecord>> {
    let problems = validate_records(records);
    if !problems.is_empty() {
        return Err(CompassError::Validation(problems));
    }
    let mut out: Vec<SceneRecord> = records
        .iter()
        .filter(|r| r.filter == FilterFlag::Keep)
        .filter(|r| stage == Stage::Mixed || r.is_single())
        .cloned()
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusPlan {
    pub single: usize,
    pub multi: usize,
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneConfig,
}

/// Samples and renders a corpus. Ids are `s000000…` for single-object
/// scenes and `m000000…` for two-object scenes.
pub fn generate_corpus(
    plan: &CorpusPlan,
    catalog: &AssetCatalog,
    renderer: &dyn Renderer,
    root: &Path,
) -> Result<Vec<SceneRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut out = Vec::with_capacity(plan.single + plan.multi);
    for (n_objects, count, tag) in [(1, plan.single, 's'), (2, plan.multi, 'm')] {
        for i in 0..count {
            let mut spec = sample_scene_spec(n_objects, catalog, &plan.scene, rng.random())?;
            spec.scene_id = format!("{tag}{i:06}");
            out.push(render_record(renderer, &spec, catalog, root)?);
        }
    }
    Ok(out)
}

/// Decides whether an augmented record is usable.
pub trait Reviewer {
    fn review(&self, record: &SceneRecord, image: &Canvas) -> Result<FilterFlag>;
}

/// Keeps a record when every object's brightness moment inside its loose
/// box points within `tolerance` radians of the annotated heading.
#[derive(Clone, Copy, Debug)]
pub struct MomentReviewer {
    pub tolerance: f64,
}

impl Default for MomentReviewer {
    fn default() -> Self {
        Self {
            tolerance: std::f64::consts::FRAC_PI_2,
        }
    }
}

impl Reviewer for MomentReviewer {
    fn review(&self, record: &SceneRecord, image: &Canvas) -> Result<FilterFlag> {
        let (w, h) = (image.width() as f64, image.height() as f64);
        for o in &record.objects {
            let lb = loose_box(&o.tight_box, DEFAULT_PADDING, w, h)?;
            let ok = match pixel_moment_heading(image, &lb.region, o.tight_box.center()) {
                Some(got) => circular_distance(got, o.orientation.theta())? <= self.tolerance,
                None => false,
            };
            if !ok {
                return Ok(FilterFlag::Reject);
            }
        }
        Ok(FilterFlag::Keep)
    }
}

/// Reviews every unreviewed record in place; returns how many were kept
/// and rejected.
pub fn review_records(
    records: &mut [SceneRecord],
    reviewer: &dyn Reviewer,
    root: &Path,
) -> Result<(usize, usize)> {
    let (mut kept, mut rejected) = (0, 0);
    for r in records.iter_mut().filter(|r| r.filter == FilterFlag::Unreviewed) {
        let path = if r.image.is_absolute() { r.image.clone() } else { root.join(&r.image) };
        let flag = reviewer.review(r, &Canvas::load(&path)?)?;
        match flag {
            FilterFlag::Keep => kept += 1,
            FilterFlag::Reject => rejected += 1,
            FilterFlag::Unreviewed => {}
        }
        r.filter = flag;
    }
    Ok((kept, rejected))
}

/// Applies explicit `id → flag` decisions; unknown ids are a data error.
pub fn apply_decisions(records: &mut [SceneRecord], decisions: &BTreeMap<String, FilterFlag>) -> Result<()> {
    for id in decisions.keys() {
        if !records.iter().any(|r| &r.id == id) {
            return Err(CompassError::Data(format!("review decision for unknown record `{id}`")));
        }
    }
    for r in records.iter_mut() {
        if let Some(f) = decisions.get(&r.id) {
            r.filter = *f;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub rendered_single: usize,
    pub rendered_multi: usize,
    pub augmented_single: usize,
    pub augmented_multi: usize,
}

pub fn count_kept(records: &[SceneRecord]) -> CorpusCounts {
    let mut c = CorpusCounts::default();
    for r in records.iter().filter(|r| r.filter == FilterFlag::Keep) {
        let slot = match (&r.provenance, r.is_single()) {
            (Provenance::Rendered, true) => &mut c.rendered_single,
            (Provenance::Rendered, false) => &mut c.rendered_multi,
            (Provenance::Augmented { .. }, true) => &mut c.augmented_single,
            (Provenance::Augmented { .. }, false) => &mut c.augmented_multi,
        };
        *slot += 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::render::StubRenderer;

    fn corpus(dir: &Path) -> Vec<SceneRecord> {
        let catalog = AssetCatalog::builtin();
        let plan = CorpusPlan {
            single: 3,
            multi: 2,
            seed: 11,
            scene: SceneConfig::default(),
        };
        generate_corpus(&plan, &catalog, &StubRenderer { catalog: catalog.clone() }, dir).unwrap()
    }

    #[test]
    fn compile_stages() {
        let dir = std::env::temp_dir().join(format!("compass-manifest-{}", std::process::id()));
        let mut recs = corpus(&dir);
        recs[0].filter = FilterFlag::Reject;
        recs[1].filter = FilterFlag::Unreviewed;
        let s1 = compile_manifest(&recs, Stage::Single).unwrap();
        assert_eq!(s1.len(), 1);
        assert!(s1.iter().all(|r| r.is_single()));
        let s2 = compile_manifest(&recs, Stage::Mixed).unwrap();
        assert_eq!(s2.len(), 3);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical() {
        let dir = std::env::temp_dir().join(format!("compass-manifest-rt-{}", std::process::id()));
        let recs = corpus(&dir);
        let text = to_jsonl(&recs).unwrap();
        let back = from_jsonl(&text).unwrap();
        assert_eq!(back, recs);
        assert_eq!(to_jsonl(&back).unwrap(), text);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn overlap_fails_compilation_naming_record() {
        let dir = std::env::temp_dir().join(format!("compass-manifest-bad-{}", std::process::id()));
        let mut recs = corpus(&dir);
        let m = recs.iter().position(|r| !r.is_single()).unwrap();
        recs[m].objects[1].tight_box = recs[m].objects[0].tight_box;
        match compile_manifest(&recs, Stage::Mixed) {
            Err(CompassError::Validation(p)) => assert!(p.iter().any(|s| s.starts_with(&recs[m].id))),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn moment_reviewer_accepts_renders() {
        let dir = std::env::temp_dir().join(format!("compass-manifest-rev-{}", std::process::id()));
        let mut recs = corpus(&dir);
        for r in &mut recs {
            r.filter = FilterFlag::Unreviewed;
        }
        let (kept, rejected) = review_records(&mut recs, &MomentReviewer::default(), &dir).unwrap();
        assert_eq!(kept + rejected, 5);
        assert!(kept >= 4, "kept {kept}");
        let mut d = BTreeMap::new();
        d.insert("nope".to_string(), FilterFlag::Keep);
        assert!(apply_decisions(&mut recs, &d).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
