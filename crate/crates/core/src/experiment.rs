//! The small end-to-end run on the built-in backbone: render a corpus at a
//! few discrete headings, pretrain the backbone, train the compass stage
//! and read headings back off generated images.

use std::f64::consts::TAU;
use std::path::Path;

use compass_autograd::ParamStore;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ModelWeights, ToyBackbone};
use crate::dataset::{
    generate_corpus, pixel_moment_heading, sample_scene_spec, AssetCatalog, CorpusPlan, SceneConfig, SceneRecord,
    StubRenderer,
};
use crate::error::Result;
use crate::generation::{GenerationRequest, Generator, RequestObject};
use crate::geometry::{circular_distance, Orientation};
use crate::tokenizer::Tokenizer;
use crate::training::{load_examples, pretrain_base, BaseTrainConfig, LossRow, TrainConfig, Trainer, TrainingData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyPlan {
    pub single: usize,
    pub multi: usize,
    pub orientation_levels: usize,
    pub seed: u64,
    pub base: BaseTrainConfig,
    pub train: TrainConfig,
    pub samples_per_orientation: usize,
    pub sample_steps: usize,
    pub guidance_scale: f64,
    /// Object depth range in world units; nearer than the generic scene
    /// default so glyphs span more latent cells.
    pub depth_range: (f64, f64),
    pub x_range: (f64, f64),
}

impl Default for ToyPlan {
    fn default() -> Self {
        Self {
            single: 1000,
            multi: 1000,
            orientation_levels: 8,
            seed: 0,
            base: TrainConfig::toy().base,
            train: TrainConfig::toy(),
            samples_per_orientation: 64,
            sample_steps: 50,
            guidance_scale: 3.0,
            depth_range: (4.0, 6.0),
            x_range: (-1.8, 1.8),
        }
    }
}

impl ToyPlan {
    pub fn scene(&self, image_size: usize) -> SceneConfig {
        SceneConfig {
            orientation_levels: Some(self.orientation_levels),
            depth_range: self.depth_range,
            x_range: self.x_range,
            ..SceneConfig::for_image_size(image_size)
        }
    }

    pub fn headings(&self) -> Vec<f64> {
        (0..self.orientation_levels)
            .map(|k| k as f64 * TAU / self.orientation_levels as f64)
            .collect()
    }
}

/// Renders the corpus into `root` with the built-in stub renderer.
pub fn build_corpus(plan: &ToyPlan, backbone: &ToyBackbone, root: &Path) -> Result<Vec<SceneRecord>> {
    let catalog = AssetCatalog::builtin();
    let corpus = CorpusPlan {
        single: plan.single,
        multi: plan.multi,
        seed: plan.seed,
        scene: plan.scene(backbone.image_size()),
    };
    generate_corpus(&corpus, &catalog, &StubRenderer { catalog: catalog.clone() }, root)
}

/// Pretrains the backbone on `records`.
pub fn pretrain(plan: &ToyPlan, backbone: &ToyBackbone, records: &[SceneRecord], root: &Path) -> Result<(ParamStore, Vec<LossRow>)> {
    let examples = load_examples(records, root, backbone)?;
    let tok = Tokenizer::new(backbone.config.context_len);
    pretrain_base(backbone, &tok, &examples, &plan.base, plan.train.padding, plan.seed, |_, _| {})
}

/// Compass stage on top of `base` with `config`.
pub fn train_compass(
    backbone: &ToyBackbone,
    config: TrainConfig,
    base: ParamStore,
    records: &[SceneRecord],
    root: &Path,
) -> Result<(ModelWeights, Vec<LossRow>)> {
    let examples = load_examples(records, root, backbone)?;
    let data = TrainingData::new(examples, config.include_augmented);
    let mut trainer = Trainer::new(backbone, config, base)?;
    trainer.run(&data, None, None, |_| {})?;
    Ok((trainer.weights()?, trainer.history().to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadingSample {
    pub target: f64,
    pub seed: u64,
    pub measured: Option<f64>,
    /// Circular error in radians; `None` when no heading could be read.
    pub error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadingReport {
    pub samples: Vec<HeadingSample>,
    pub tolerance: f64,
}

impl HeadingReport {
    /// Fraction of samples whose heading is within tolerance; unreadable
    /// samples count as misses.
    pub fn within(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let hits = self
            .samples
            .iter()
            .filter(|s| s.error.is_some_and(|e| e <= self.tolerance))
            .count();
        hits as f64 / self.samples.len() as f64
    }

    pub fn mean_error(&self) -> Option<f64> {
        let errs: Vec<f64> = self.samples.iter().filter_map(|s| s.error).collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

/// Generates `samples_per_orientation` single-arrow images per heading and
/// measures each one's heading from its pixel moment. Boxes come from the
/// training scene distribution; sample `i` uses seed `seed + i` so two
/// models can be compared on identical noise and boxes.
pub fn heading_eval(
    plan: &ToyPlan,
    backbone: &ToyBackbone,
    weights: &ModelWeights,
    use_call: bool,
    tolerance: f64,
) -> Result<HeadingReport> {
    let gen = Generator::new(backbone, weights);
    let catalog = AssetCatalog::builtin();
    let scene = plan.scene(backbone.image_size());
    let mut samples = Vec::new();
    for (k, &target) in plan.headings().iter().enumerate() {
        for i in 0..plan.samples_per_orientation {
            let seed = plan.seed.wrapping_add(1_000_003 * k as u64 + i as u64);
            let spec = sample_scene_spec(1, &catalog, &scene, seed)?;
            let tight = crate::dataset::scene::project_spec(&spec, &catalog)?[0];
            let mut req = GenerationRequest::new(
                "a photo of a {arrow}",
                vec![RequestObject {
                    name: "arrow".into(),
                    theta: Orientation::yaw(target)?,
                    tight_box: Some(tight),
                }],
                seed,
            );
            req.steps = plan.sample_steps;
            req.guidance_scale = plan.guidance_scale;
            req.padding = plan.train.padding;
            req.use_call = use_call;
            let out = gen.generate(&req)?;
            let o = &out.result.objects[0];
            let measured = pixel_moment_heading(&out.image, &o.loose_box.region, o.tight_box.center());
            let error = measured.map(|m| circular_distance(m, target)).transpose()?;
            samples.push(HeadingSample {
                target,
                seed,
                measured,
                error,
            });
        }
    }
    Ok(HeadingReport { samples, tolerance })
}

/// Default backbone for the toy run.
pub fn toy_backbone() -> Result<ToyBackbone> {
    ToyBackbone::new(BackboneConfig::default())
}
