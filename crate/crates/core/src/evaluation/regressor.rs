//! Orientation regressor: a residual conv feature extractor, global average
//! pooling and an MLP head predicting `(sin θ, cos θ)`.
//!
//! Feature maps are `pixels x channels` matrices; a batch stacks the pixel
//! rows of every image, so each conv is one gather plus one matmul.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::Path;
use std::sync::Arc;

use compass_autograd::{write_atomic, AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneRecord;
use crate::error::{CompassError, Result};
use crate::geometry::{circular_distance, loose_box, Box2D, DEFAULT_PADDING};
use crate::imaging::Canvas;
use crate::nn::{init_linear, linear, Binder};

const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorConfig {
    /// Crops are resized to `input_size²`.
    pub input_size: usize,
    /// Channels per residual stage; every stage after the first halves the
    /// resolution.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self::resnet18()
    }
}

impl RegressorConfig {
    /// 18-layer layout: stem conv, four stages of two basic blocks
    /// (64/128/256/512 channels), head 128-128, batch 128, lr 5e-5, 95 epochs.
    pub fn resnet18() -> Self {
        Self {
            input_size: 64,
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
            head_hidden: vec![128, 128],
            batch_size: 128,
            learning_rate: 5e-5,
            epochs: 95,
            seed: 0,
        }
    }

    /// Narrow three-stage extractor for stub renders.
    pub fn toy() -> Self {
        Self {
            input_size: 16,
            stage_widths: vec![8, 16, 32],
            blocks_per_stage: vec![1, 1, 1],
            head_hidden: vec![128, 128],
            batch_size: 32,
            learning_rate: 2e-3,
            epochs: 30,
            seed: 0,
        }
    }

    /// Conv layers plus head layers.
    pub fn depth(&self) -> usize {
        1 + 2 * self.blocks_per_stage.iter().sum::<usize>() + self.head_hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_widths.len();
        let mut bad = Vec::new();
        if stages == 0 || stages != self.blocks_per_stage.len() {
            bad.push("stage_widths and blocks_per_stage must be non-empty and equally long".to_string());
        }
        if self.stage_widths.contains(&0) || self.head_hidden.contains(&0) {
            bad.push("widths must be positive".into());
        }
        if stages > 0 && (self.input_size == 0 || self.input_size % (1 << (stages - 1)) != 0) {
            bad.push(format!("input_size must be a positive multiple of {}", 1 << stages.saturating_sub(1)));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            bad.push("batch_size and learning_rate must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CompassError::Config(bad.join("; ")))
        }
    }
}

/// `θ → (sin θ, cos θ)`.
pub fn encode_label(theta: f64) -> [f64; 2] {
    [theta.sin(), theta.cos()]
}

/// `(sin, cos) → θ ∈ [0, 2π)`.
pub fn decode_head(sin: f64, cos: f64) -> Result<f64> {
    if !(sin.is_finite() && cos.is_finite()) || (sin.abs() < 1e-12 && cos.abs() < 1e-12) {
        return Err(CompassError::Prediction(format!("degenerate head output ({sin}, {cos})")));
    }
    Ok(sin.atan2(cos).rem_euclid(TAU))
}

/// 3x3 neighbourhood table over a batch of `n x n` maps with `stride`.
fn conv_table(batch: usize, n: usize, stride: usize) -> Vec<Option<usize>> {
    let m = n / stride;
    let mut t = Vec::with_capacity(batch * m * m * 9);
    for img in 0..batch {
        for oy in 0..m {
            for ox in 0..m {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let sx = (ox * stride) as isize + dx;
                        let sy = (oy * stride) as isize + dy;
                        let inside = sx >= 0 && sy >= 0 && sx < n as isize && sy < n as isize;
                        t.push(inside.then(|| img * n * n + sy as usize * n + sx as usize));
                    }
                }
            }
        }
    }
    t
}

/// Stride-2 subsampling table (1 tap).
fn subsample_table(batch: usize, n: usize) -> Vec<Option<usize>> {
    let m = n / 2;
    let mut t = Vec::with_capacity(batch * m * m);
    for img in 0..batch {
        for oy in 0..m {
            for ox in 0..m {
                t.push(Some(img * n * n + 2 * oy * n + 2 * ox));
            }
        }
    }
    t
}

fn pool_matrix(batch: usize, n: usize) -> Tensor {
    let mut t = Tensor::zeros(batch, batch * n * n);
    for img in 0..batch {
        for p in 0..n * n {
            t.set(img, img * n * n + p, 1.0 / (n * n) as f64);
        }
    }
    t
}

#[derive(Default)]
struct Tables {
    conv: HashMap<(usize, usize, usize), Arc<Vec<Option<usize>>>>,
    sub: HashMap<(usize, usize), Arc<Vec<Option<usize>>>>,
    pool: HashMap<(usize, usize), Arc<Tensor>>,
}

impl Tables {
    fn conv(&mut self, batch: usize, n: usize, stride: usize) -> Arc<Vec<Option<usize>>> {
        self.conv
            .entry((batch, n, stride))
            .or_insert_with(|| Arc::new(conv_table(batch, n, stride)))
            .clone()
    }

    fn sub(&mut self, batch: usize, n: usize) -> Arc<Vec<Option<usize>>> {
        self.sub
            .entry((batch, n))
            .or_insert_with(|| Arc::new(subsample_table(batch, n)))
            .clone()
    }

    fn pool(&mut self, batch: usize, n: usize) -> Arc<Tensor> {
        self.pool
            .entry((batch, n))
            .or_insert_with(|| Arc::new(pool_matrix(batch, n)))
            .clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientationRegressor {
    pub config: RegressorConfig,
    pub params: ParamStore,
}

/// One labelled crop.
#[derive(Clone, Debug)]
pub struct LabeledCrop {
    pub image: Canvas,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
}

/// Loose-box crops of every object in `records`, labelled with its θ.
pub fn crops_from_records(records: &[SceneRecord], root: &Path) -> Result<Vec<LabeledCrop>> {
    let mut out = Vec::new();
    for r in records {
        let path = if r.image.is_absolute() { r.image.clone() } else { root.join(&r.image) };
        let img = Canvas::load(&path)?;
        for o in &r.objects {
            let lb = loose_box(&o.tight_box, DEFAULT_PADDING, img.width() as f64, img.height() as f64)?;
            out.push(LabeledCrop {
                image: img.crop(&lb.region)?,
                theta: o.orientation.theta(),
            });
        }
    }
    Ok(out)
}

impl OrientationRegressor {
    pub fn init(config: RegressorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        init_linear(&mut p, "reg.stem", 9, config.stage_widths[0], 2f64.sqrt(), &mut rng);
        let mut c_in = config.stage_widths[0];
        for (s, (&w, &blocks)) in config.stage_widths.iter().zip(&config.blocks_per_stage).enumerate() {
            for k in 0..blocks {
                let name = format!("reg.s{s}.b{k}");
                init_linear(&mut p, &format!("{name}.c1"), 9 * c_in, w, 2f64.sqrt(), &mut rng);
                init_linear(&mut p, &format!("{name}.c2"), 9 * w, w, 0.5, &mut rng);
                if c_in != w || (s > 0 && k == 0) {
                    init_linear(&mut p, &format!("{name}.skip"), c_in, w, 1.0, &mut rng);
                }
                c_in = w;
            }
        }
        for (i, &h) in config.head_hidden.iter().enumerate() {
            init_linear(&mut p, &format!("reg.head{i}"), c_in, h, 2f64.sqrt(), &mut rng);
            c_in = h;
        }
        init_linear(&mut p, "reg.out", c_in, 2, 1.0, &mut rng);
        Ok(Self { config, params: p })
    }

    fn input(&self, crops: &[&Canvas]) -> Tensor {
        let n = self.config.input_size;
        let mut t = Tensor::zeros(crops.len() * n * n, 1);
        for (i, c) in crops.iter().enumerate() {
            let r = c.resize(n, n);
            for (j, v) in r.data().iter().enumerate() {
                t.set(i * n * n + j, 0, v - 0.5);
            }
        }
        t
    }

    fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var, batch: usize, tables: &mut Tables) -> Var {
        let cfg = &self.config;
        let mut n = cfg.input_size;
        let cols = g.gather(x, tables.conv(batch, n, 1), 9);
        let h = linear(g, b, cols, "reg.stem");
        let mut h = g.relu(h);
        let mut c_in = cfg.stage_widths[0];
        for (s, (&w, &blocks)) in cfg.stage_widths.iter().zip(&cfg.blocks_per_stage).enumerate() {
            for k in 0..blocks {
                let name = format!("reg.s{s}.b{k}");
                let stride = if s > 0 && k == 0 { 2 } else { 1 };
                let cols = g.gather(h, tables.conv(batch, n, stride), 9);
                let y = linear(g, b, cols, &format!("{name}.c1"));
                let y = g.rms_norm_rows(y, EPS);
                let y = g.relu(y);
                let m = n / stride;
                let cols = g.gather(y, tables.conv(batch, m, 1), 9);
                let y = linear(g, b, cols, &format!("{name}.c2"));
                let y = g.rms_norm_rows(y, EPS);
                let skip = if c_in != w || stride == 2 {
                    let src = if stride == 2 { g.gather(h, tables.sub(batch, n), 1) } else { h };
                    linear(g, b, src, &format!("{name}.skip"))
                } else {
                    h
                };
                let sum = g.add(y, skip);
                h = g.relu(sum);
                n = m;
                c_in = w;
            }
        }
        let pool = g.constant_arc(tables.pool(batch, n));
        let mut f = g.matmul(pool, h);
        for i in 0..cfg.head_hidden.len() {
            let y = linear(g, b, f, &format!("reg.head{i}"));
            f = g.relu(y);
        }
        linear(g, b, f, "reg.out")
    }

    /// Raw `(sin, cos)` head outputs, one row per crop.
    pub fn head_outputs(&self, crops: &[&Canvas]) -> Tensor {
        let mut g = Graph::new();
        let mut b = Binder::new().frozen(&self.params);
        let x = g.constant(self.input(crops));
        let y = self.forward(&mut g, &mut b, x, crops.len(), &mut Tables::default());
        g.value(y).clone()
    }

    /// Orientation of the object in `image`, optionally cropped to `crop`.
    pub fn predict(&self, image: &Canvas, crop: Option<&Box2D>) -> Result<f64> {
        let cropped;
        let src = match crop {
            Some(bx) => {
                if !bx.within_image(image.width() as f64, image.height() as f64) {
                    return Err(CompassError::Input(format!(
                        "crop {bx:?} is outside the {}x{} image",
                        image.width(),
                        image.height()
                    )));
                }
                cropped = image.crop(bx)?;
                &cropped
            }
            None => image,
        };
        let out = self.head_outputs(&[src]);
        decode_head(out.get(0, 0), out.get(0, 1))
    }

    /// Trains on `data` with Adam and a `(sin, cos)` squared-error loss.
    pub fn train(&mut self, data: &[LabeledCrop], mut on_epoch: impl FnMut(&EpochReport)) -> Result<Vec<EpochReport>> {
        if data.is_empty() {
            return Err(CompassError::Data("no labelled crops".into()));
        }
        if let Some(bad) = data.iter().find(|d| !(0.0..TAU).contains(&d.theta)) {
            return Err(CompassError::Data(format!("label {} outside [0, 2π)", bad.theta)));
        }
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: self.config.learning_rate,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut tables = Tables::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7e9);
        let mut reports = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let (mut total, mut count) = (0.0, 0);
            for chunk in order.chunks(self.config.batch_size) {
                let crops: Vec<&Canvas> = chunk.iter().map(|&i| &data[i].image).collect();
                let target = Tensor::from_rows(&chunk.iter().map(|&i| encode_label(data[i].theta).to_vec()).collect::<Vec<_>>());
                let mut g = Graph::new();
                let mut b = Binder::new().trainable(&self.params);
                let x = g.constant(self.input(&crops));
                let y = self.forward(&mut g, &mut b, x, chunk.len(), &mut tables);
                let loss = g.mse(y, Arc::new(target));
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(CompassError::Numeric(format!("non-finite regressor loss in epoch {epoch}")));
                }
                let grads = g.param_grads(&g.backward(loss));
                drop(b);
                opt.update(&mut self.params, &grads);
                total += value * chunk.len() as f64;
                count += chunk.len();
            }
            let r = EpochReport {
                epoch,
                loss: total / count as f64,
            };
            on_epoch(&r);
            reports.push(r);
        }
        Ok(reports)
    }

    /// Mean circular error over `data`.
    pub fn mean_error(&self, data: &[LabeledCrop]) -> Result<f64> {
        if data.is_empty() {
            return Err(CompassError::Data("no labelled crops".into()));
        }
        let mut total = 0.0;
        for chunk in data.chunks(256) {
            let crops: Vec<&Canvas> = chunk.iter().map(|d| &d.image).collect();
            let out = self.head_outputs(&crops);
            for (i, d) in chunk.iter().enumerate() {
                total += circular_distance(decode_head(out.get(i, 0), out.get(i, 1))?, d.theta)?;
            }
        }
        Ok(total / data.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CompassError::io(dir, e))?;
        let p = dir.join("regressor.json");
        write_atomic(&p, serde_json::to_string_pretty(&self.config)?.as_bytes()).map_err(|e| CompassError::io(p, e))?;
        let p = dir.join("regressor.weights");
        write_atomic(&p, &self.params.to_bytes()).map_err(|e| CompassError::io(p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("regressor.json");
        let config: RegressorConfig =
            serde_json::from_slice(&std::fs::read(&p).map_err(|e| CompassError::io(&p, e))?)?;
        let p = dir.join("regressor.weights");
        let params = ParamStore::from_bytes(&std::fs::read(&p).map_err(|e| CompassError::io(&p, e))?)?;
        let fresh = Self::init(config.clone())?;
        if fresh.params.names().ne(params.names()) {
            return Err(CompassError::Data("regressor weights do not match its config".into()));
        }
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_examples() {
        assert_eq!(decode_head(0.0, 1.0).unwrap(), 0.0);
        assert!((decode_head(1.0, 0.0).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!(matches!(decode_head(0.0, 0.0), Err(CompassError::Prediction(_))));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(theta in 0.0..TAU) {
            let [s, c] = encode_label(theta);
            let back = decode_head(s, c).unwrap();
            prop_assert!(circular_distance(back, theta).unwrap() < 1e-9);
        }
    }

    #[test]
    fn layouts() {
        let r = RegressorConfig::resnet18();
        assert_eq!(r.depth(), 1 + 16 + 3);
        assert_eq!(r.head_hidden, vec![128, 128]);
        assert_eq!((r.batch_size, r.learning_rate, r.epochs), (128, 5e-5, 95));
        assert!(RegressorConfig { input_size: 10, ..RegressorConfig::toy() }.validate().is_err());
    }

    #[test]
    fn prediction_is_an_angle_and_crop_is_checked() {
        let reg = OrientationRegressor::init(RegressorConfig::toy()).unwrap();
        let img = Canvas::from_data(20, 20, (0..400).map(|i| (i % 5) as f64 / 4.0).collect()).unwrap();
        let th = reg.predict(&img, None).unwrap();
        assert!((0.0..TAU).contains(&th));
        let bad = Box2D::new(10.0, 10.0, 25.0, 15.0).unwrap();
        assert!(matches!(reg.predict(&img, Some(&bad)), Err(CompassError::Input(_))));
    }

    #[test]
    fn batched_rows_match_single_predictions() {
        let reg = OrientationRegressor::init(RegressorConfig::toy()).unwrap();
        let a = Canvas::from_data(16, 16, (0..256).map(|i| (i % 3) as f64 / 2.0).collect()).unwrap();
        let b = Canvas::from_data(16, 16, (0..256).map(|i| (i % 11) as f64 / 10.0).collect()).unwrap();
        let both = reg.head_outputs(&[&a, &b]);
        let one = reg.head_outputs(&[&b]);
        assert!((both.get(1, 0) - one.get(0, 0)).abs() < 1e-12);
        assert!((both.get(1, 1) - one.get(0, 1)).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let mut reg = OrientationRegressor::init(RegressorConfig::toy()).unwrap();
        let d = [LabeledCrop {
            image: Canvas::new(16, 16),
            theta: 7.0,
        }];
        assert!(matches!(reg.train(&d, |_| {}), Err(CompassError::Data(_))));
    }
}
