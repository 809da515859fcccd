//! The built-in tiny latent-diffusion backbone.
//!
//! Images are grayscale; the "latent" is a pixel-unshuffle of the image
//! into `patch x patch` blocks mapped to `[-1, 1]`, so every grid cell
//! carries `patch²` channels and decoding is exact.

pub mod schedule;
pub mod text;
pub mod unet;

use compass_autograd::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::call_attention::{AttentionSites, Grid, SiteInfo};
use crate::conditioning::CompassEncoderParams;
use crate::error::{CompassError, Result};
use crate::imaging::Canvas;
use crate::nn::Binder;
use crate::tokenizer::Tokenizer;

pub use schedule::NoiseSchedule;
pub use text::TextEncoder;
pub use unet::{DenoiseContext, Denoiser, PROJECTIONS, SITES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub text_dim: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let tok = Tokenizer::default();
        Self {
            image_size: 32,
            patch: 4,
            channels: 32,
            text_dim: 32,
            attn_dim: 32,
            time_dim: 32,
            context_len: tok.context_len(),
            vocab_size: tok.vocab_size(),
        }
    }
}

impl BackboneConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn latent_channels(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % (2 * self.patch) != 0 {
            return Err(CompassError::Config(format!(
                "image size {} must be a multiple of twice the patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.channels < 2 || self.text_dim == 0 || self.attn_dim == 0 || self.time_dim < 2 {
            return Err(CompassError::Config("backbone widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ToyBackbone {
    pub config: BackboneConfig,
    pub text: TextEncoder,
    pub unet: Denoiser,
    pub schedule: NoiseSchedule,
}

impl AttentionSites for ToyBackbone {
    fn cross_attention_sites(&self) -> Vec<SiteInfo> {
        self.unet.sites()
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }
}

/// All weights needed to run the conditioned backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    /// Frozen base weights (`text.*`, `unet.*`).
    pub base: ParamStore,
    pub compass: CompassEncoderParams,
    /// Low-rank adapters (`lora.*`, plus any `subject.<token>.*`).
    pub adapters: ParamStore,
}

impl ModelWeights {
    /// Distinct adapter prefixes present in `adapters`.
    pub fn adapter_prefixes(&self) -> Vec<String> {
        adapter_prefixes(&self.adapters)
    }
}

/// Prefix of every `<prefix>.<site>.<proj>.<a|b>` name, deduplicated.
pub fn adapter_prefixes(store: &ParamStore) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for name in store.names() {
        let parts: Vec<&str> = name.rsplitn(4, '.').collect();
        if parts.len() == 4 {
            let prefix = parts[3].to_string();
            if !out.contains(&prefix) {
                out.push(prefix);
            }
        }
    }
    out
}

impl ToyBackbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            text: TextEncoder {
                vocab_size: config.vocab_size,
                context_len: config.context_len,
                dim: config.text_dim,
            },
            unet: Denoiser::new(&config),
            schedule: NoiseSchedule::default(),
            config,
        })
    }

    /// Random base weights.
    pub fn init_base(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.text.init(&mut store, &mut rng);
        self.unet.init(&mut store, &mut rng);
        store
    }

    pub fn init_adapters(&self, prefix: &str, rank: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.unet.init_adapters(prefix, rank, &mut rng)
    }

    pub fn init_compass(&self, n_angles: usize, seed: u64) -> CompassEncoderParams {
        CompassEncoderParams::new(n_angles, self.config.text_dim, seed)
    }

    /// Distinct attention grids, coarsest last.
    pub fn resolutions(&self) -> Vec<Grid> {
        let mut out: Vec<Grid> = Vec::new();
        for s in self.unet.sites() {
            if !out.contains(&s.grid) {
                out.push(s.grid);
            }
        }
        out
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    /// Image → latent (`cells x patch²`, values in `[-1, 1]`).
    pub fn encode_image(&self, img: &Canvas) -> Result<Tensor> {
        let s = self.config.image_size;
        if img.width() != s || img.height() != s {
            return Err(CompassError::Input(format!(
                "backbone expects {s}x{s} images, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let p = self.config.patch;
        let g = self.config.grid();
        let mut t = Tensor::zeros(g * g, p * p);
        for cy in 0..g {
            for cx in 0..g {
                let row = t.row_mut(cy * g + cx);
                for dy in 0..p {
                    for dx in 0..p {
                        row[dy * p + dx] = 2.0 * img.get(cx * p + dx, cy * p + dy) - 1.0;
                    }
                }
            }
        }
        Ok(t)
    }

    pub fn decode_latent(&self, latent: &Tensor) -> Canvas {
        let s = self.config.image_size;
        let p = self.config.patch;
        let g = self.config.grid();
        let mut img = Canvas::new(s, s);
        for cy in 0..g {
            for cx in 0..g {
                let row = latent.row(cy * g + cx);
                for dy in 0..p {
                    for dx in 0..p {
                        let v = ((row[dy * p + dx] + 1.0) / 2.0).clamp(0.0, 1.0);
                        img.set(cx * p + dx, cy * p + dy, v);
                    }
                }
            }
        }
        img
    }

    /// Velocity prediction as a graph node.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        x: Var,
        t: f64,
        cond: Var,
        ctx: &mut DenoiseContext,
    ) -> Var {
        self.unet.forward(g, b, x, t, cond, ctx)
    }

    /// Plain-tensor velocity prediction with every weight frozen.
    pub fn predict_velocity(
        &self,
        weights: &ModelWeights,
        x_t: &Tensor,
        t: usize,
        cond: &Tensor,
        ctx: &mut DenoiseContext,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new().frozen(&weights.base).frozen(&weights.adapters);
        let x = g.constant(x_t.clone());
        let c = g.constant(cond.clone());
        let y = self.forward(&mut g, &mut b, x, t as f64, c, ctx);
        let out = g.value(y).clone();
        if !out.is_finite() {
            return Err(CompassError::Numeric(format!("non-finite velocity prediction at t={t}")));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_codec_round_trips() {
        let bb = ToyBackbone::new(BackboneConfig::default()).unwrap();
        let data: Vec<f64> = (0..32 * 32).map(|i| (i % 17) as f64 / 16.0).collect();
        let img = Canvas::from_data(32, 32, data).unwrap();
        let lat = bb.encode_image(&img).unwrap();
        assert_eq!(lat.shape(), (64, 16));
        let back = bb.decode_latent(&lat);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_resolutions_three_sites() {
        let bb = ToyBackbone::new(BackboneConfig::default()).unwrap();
        assert_eq!(bb.cross_attention_sites().len(), 3);
        assert_eq!(bb.resolutions(), vec![(8, 8), (4, 4)]);
    }

    #[test]
    fn adapter_prefix_detection() {
        let bb = ToyBackbone::new(BackboneConfig::default()).unwrap();
        let mut s = bb.init_adapters("lora", 4, 0);
        s.extend(&bb.init_adapters("subject.sks", 4, 1));
        assert_eq!(adapter_prefixes(&s), vec!["lora".to_string(), "subject.sks".to_string()]);
    }
}
