//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.json        backbone + training config, progress
//! <dir>/encoder.weights    compass encoder
//! <dir>/adapters.weights   low-rank adapters
//! <dir>/backbone.weights   frozen base weights
//! <dir>/optimizer.state    optimizer moments
//! <dir>/rng.state          seed and next iteration
//! <dir>/loss.csv           iteration,stage,loss
//! ```
//!
//! A directory is written next to its final location and renamed into
//! place, so readers never observe a partial checkpoint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use compass_autograd::{write_atomic, ParamStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::backbone::{BackboneConfig, ModelWeights, ToyBackbone};
use crate::conditioning::CompassEncoderParams;
use crate::error::{CompassError, Result};

pub const CHECKPOINT_SCHEMA: &str = "compass.checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub stage: String,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: String,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    /// Iterations completed.
    pub iteration: usize,
    pub optimizer_step: u64,
}

impl CheckpointMeta {
    pub fn new(backbone: BackboneConfig, train: TrainConfig, iteration: usize, optimizer_step: u64) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA.into(),
            backbone,
            train,
            iteration,
            optimizer_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_iteration: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub base: ParamStore,
    pub compass: CompassEncoderParams,
    pub adapters: ParamStore,
    pub optimizer_moments: ParamStore,
    pub history: Vec<LossRow>,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("iteration,stage,loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.iteration, r.stage, r.loss);
    }
    s
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("iteration,stage,loss") {
        return Err(CompassError::Data("loss.csv has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            let bad = || CompassError::Data(format!("malformed loss row `{l}`"));
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(LossRow {
                iteration: parts[0].parse().map_err(|_| bad())?,
                stage: parts[1].to_string(),
                loss: parts[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let p = dir.join(name);
    write_atomic(&p, bytes).map_err(|e| CompassError::io(p, e))
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    std::fs::read(&p).map_err(|e| CompassError::io(p, e))
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = sibling(dir, "tmp");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| CompassError::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| CompassError::io(&tmp, e))?;
        write(&tmp, "config.json", serde_json::to_string_pretty(&self.meta)?.as_bytes())?;
        write(&tmp, "encoder.weights", &self.compass.store().to_bytes())?;
        write(&tmp, "adapters.weights", &self.adapters.to_bytes())?;
        write(&tmp, "backbone.weights", &self.base.to_bytes())?;
        write(&tmp, "optimizer.state", &self.optimizer_moments.to_bytes())?;
        let rng = RngState {
            seed: self.meta.train.seed,
            next_iteration: self.meta.iteration,
        };
        write(&tmp, "rng.state", serde_json::to_string(&rng)?.as_bytes())?;
        write(&tmp, "loss.csv", loss_csv(&self.history).as_bytes())?;
        let old = sibling(dir, "old");
        if dir.exists() {
            std::fs::rename(dir, &old).map_err(|e| CompassError::io(dir, e))?;
        }
        std::fs::rename(&tmp, dir).map_err(|e| CompassError::io(dir, e))?;
        if old.exists() {
            std::fs::remove_dir_all(&old).map_err(|e| CompassError::io(&old, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_slice(&read(dir, "config.json")?)?;
        if meta.schema != CHECKPOINT_SCHEMA {
            return Err(CompassError::Data(format!(
                "checkpoint schema `{}` is not `{CHECKPOINT_SCHEMA}`",
                meta.schema
            )));
        }
        let rng: RngState = serde_json::from_slice(&read(dir, "rng.state")?)?;
        if rng.seed != meta.train.seed || rng.next_iteration != meta.iteration {
            return Err(CompassError::Data("rng.state disagrees with config.json".into()));
        }
        let text = String::from_utf8_lossy(&read(dir, "loss.csv")?).into_owned();
        Ok(Self {
            compass: CompassEncoderParams::from_store(ParamStore::from_bytes(&read(dir, "encoder.weights")?)?)?,
            adapters: ParamStore::from_bytes(&read(dir, "adapters.weights")?)?,
            base: ParamStore::from_bytes(&read(dir, "backbone.weights")?)?,
            optimizer_moments: ParamStore::from_bytes(&read(dir, "optimizer.state")?)?,
            history: parse_loss_csv(&text)?,
            meta,
        })
    }

    /// Content hash of the model weights (first 16 hex digits of SHA-256).
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.base.to_bytes());
        h.update(self.compass.store().to_bytes());
        h.update(self.adapters.to_bytes());
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn backbone(&self) -> Result<ToyBackbone> {
        ToyBackbone::new(self.meta.backbone.clone())
    }

    pub fn weights(&self) -> ModelWeights {
        ModelWeights {
            base: self.base.clone(),
            compass: self.compass.clone(),
            adapters: self.adapters.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_csv_round_trip() {
        let rows = vec![
            LossRow {
                iteration: 0,
                stage: "1".into(),
                loss: 0.123456789012345,
            },
            LossRow {
                iteration: 1,
                stage: "2".into(),
                loss: 1e-7,
            },
        ];
        assert_eq!(parse_loss_csv(&loss_csv(&rows)).unwrap(), rows);
        assert!(parse_loss_csv("a,b\n").is_err());
    }

    #[test]
    fn save_load_round_trip_and_overwrite() {
        let bb = ToyBackbone::new(BackboneConfig::default()).unwrap();
        let ck = Checkpoint {
            meta: CheckpointMeta::new(bb.config.clone(), TrainConfig::toy(), 3, 3),
            base: bb.init_base(0),
            compass: bb.init_compass(1, 0),
            adapters: bb.init_adapters("lora", 4, 0),
            optimizer_moments: ParamStore::new(),
            history: vec![],
        };
        let dir = std::env::temp_dir().join(format!("compass-ckpt-{}", std::process::id()));
        ck.save(&dir).unwrap();
        ck.save(&dir).unwrap();
        let back = Checkpoint::load(&dir).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.id(), ck.id());
        assert_eq!(ck.id().len(), 16);
        for f in ["config.json", "encoder.weights", "adapters.weights", "rng.state"] {
            assert!(dir.join(f).exists());
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
