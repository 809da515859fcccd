//! Asset descriptors. Every asset is authored so that `θ = 0` faces
//! screen-right; the stub renderer draws it as a flat glyph.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CompassError, Result};

pub const FACES_RIGHT: &str = "faces-right-at-zero";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Glyph {
    Arrow,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetDescriptor {
    pub id: String,
    /// Word used for the object in prompts.
    pub name: String,
    #[serde(default = "default_glyph")]
    pub glyph: Glyph,
    /// World-unit half extents of the asset's bounding box (x, y, z).
    pub half_extents: [f64; 3],
    /// Non-rigid assets receive pose-variation erase regions.
    #[serde(default = "default_true")]
    pub rigid: bool,
    #[serde(default = "default_alignment")]
    pub alignment: String,
}

fn default_glyph() -> Glyph {
    Glyph::Arrow
}
fn default_true() -> bool {
    true
}
fn default_alignment() -> String {
    FACES_RIGHT.into()
}

impl AssetDescriptor {
    pub fn glyph(id: &str, glyph: Glyph) -> Self {
        Self {
            id: id.into(),
            name: id.into(),
            glyph,
            half_extents: [0.8, 0.8, 0.8],
            rigid: true,
            alignment: FACES_RIGHT.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetCatalog {
    pub assets: Vec<AssetDescriptor>,
}

impl AssetCatalog {
    /// The two desk-scale glyph assets.
    pub fn builtin() -> Self {
        Self {
            assets: vec![
                AssetDescriptor::glyph("arrow", Glyph::Arrow),
                AssetDescriptor::glyph("triangle", Glyph::Triangle),
            ],
        }
    }

    pub fn new(assets: Vec<AssetDescriptor>) -> Result<Self> {
        let c = Self { assets };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.assets.is_empty() {
            return Err(CompassError::Config("asset catalog is empty".into()));
        }
        for a in &self.assets {
            if a.alignment != FACES_RIGHT {
                return Err(CompassError::Config(format!(
                    "asset `{}` has alignment `{}`, expected `{FACES_RIGHT}`",
                    a.id, a.alignment
                )));
            }
            if !a.half_extents.iter().all(|h| h.is_finite() && *h > 0.0) {
                return Err(CompassError::Config(format!("asset `{}` has invalid extents", a.id)));
            }
        }
        for (i, a) in self.assets.iter().enumerate() {
            if self.assets[..i].iter().any(|b| b.id == a.id) {
                return Err(CompassError::Config(format!("duplicate asset id `{}`", a.id)));
            }
        }
        Ok(())
    }

    /// Loads every `*.json` descriptor in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| CompassError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut assets = Vec::with_capacity(paths.len());
        for p in paths {
            let text = std::fs::read_to_string(&p).map_err(|e| CompassError::io(&p, e))?;
            assets.push(serde_json::from_str(&text)?);
        }
        Self::new(assets)
    }

    pub fn get(&self, id: &str) -> Option<&AssetDescriptor> {
        self.assets.iter().find(|a| a.id == id)
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_catalog_is_valid() {
        let c = AssetCatalog::builtin();
        c.validate().unwrap();
        assert_eq!(c.get("arrow").unwrap().glyph, Glyph::Arrow);
    }

    #[test]
    fn rejects_misaligned_and_empty() {
        let mut a = AssetDescriptor::glyph("x", Glyph::Arrow);
        a.alignment = "faces-left".into();
        assert!(AssetCatalog::new(vec![a]).is_err());
        assert!(AssetCatalog::new(vec![]).is_err());
    }

    #[test]
    fn loads_descriptors_from_directory() {
        let dir = std::env::temp_dir().join(format!("compass-catalog-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("lion.json"),
            r#"{"id":"lion","name":"lion","glyph":"triangle","half_extents":[0.9,0.9,0.7],"rigid":false}"#,
        )
        .unwrap();
        let c = AssetCatalog::load_dir(&dir).unwrap();
        assert_eq!(c.len(), 1);
        assert!(!c.assets[0].rigid);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
