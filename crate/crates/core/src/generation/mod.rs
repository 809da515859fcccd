//! Orientation-conditioned sampling and subject personalization.

pub mod personalize;
pub mod request;

use compass_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{DenoiseContext, ModelWeights, ToyBackbone};
use crate::call_attention::{attach_hooks, build_mask_set, AttentionProbe, HookRegistry};
use crate::conditioning::{
    assemble_prompt, compass_tokens_for, condition_sequence, PromptBinding, PromptObject,
};
use crate::error::{CompassError, Result};
use crate::geometry::{spawn_boxes_avoiding, Box2D, LooseBox, Orientation, SpawnConfig};
use crate::imaging::Canvas;
use crate::tokenizer::Tokenizer;
use crate::training::ADAPTER_PREFIX;

pub use personalize::{personalize, subject_prefix};
pub use request::{GenerationRequest, RequestObject, DEFAULT_GUIDANCE, DEFAULT_STEPS};

pub const RESULT_SCHEMA: &str = "compass.generation-result/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedObject {
    pub name: String,
    pub theta: Orientation,
    /// Tight box in output-image pixels.
    #[serde(rename = "box")]
    pub tight_box: Box2D,
    pub loose_box: LooseBox,
    pub spawned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub schema: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ResolvedObject>,
    /// Binding in backbone pixel space.
    pub binding: PromptBinding,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub image: Canvas,
    pub result: GenerationResult,
}

/// Boxes for every object: given ones are kept (overlaps only warn),
/// missing ones are spawned clear of all given boxes.
pub fn spawn_or_validate_boxes(
    objects: &[RequestObject],
    width: f64,
    height: f64,
    seed: u64,
) -> Result<(Vec<Box2D>, Vec<bool>, Vec<String>)> {
    let mut warnings = Vec::new();
    let given: Vec<Box2D> = objects.iter().filter_map(|o| o.tight_box).collect();
    for (i, o) in objects.iter().enumerate() {
        let Some(b) = o.tight_box else { continue };
        if !b.within_image(width, height) {
            return Err(CompassError::Input(format!(
                "box of object {i} (`{}`) is outside the {width}x{height} image",
                o.name
            )));
        }
        for (j, p) in objects.iter().enumerate().skip(i + 1) {
            if let Some(c) = p.tight_box {
                if b.intersection_area(&c) > 0.0 {
                    warnings.push(format!(
                        "boxes of objects {i} (`{}`) and {j} (`{}`) overlap",
                        o.name, p.name
                    ));
                }
            }
        }
    }
    let missing = objects.iter().filter(|o| o.tight_box.is_none()).count();
    let mut spawned = spawn_boxes_avoiding(missing, &given, width, height, seed, &SpawnConfig::default())?.into_iter();
    let mut boxes = Vec::with_capacity(objects.len());
    let mut flags = Vec::with_capacity(objects.len());
    for o in objects {
        match o.tight_box {
            Some(b) => {
                boxes.push(b);
                flags.push(false);
            }
            None => {
                boxes.push(spawned.next().expect("one spawned box per missing box"));
                flags.push(true);
            }
        }
    }
    Ok((boxes, flags, warnings))
}

/// Everything fixed for one request before sampling starts.
pub struct Prepared {
    pub binding: PromptBinding,
    pub cond: Tensor,
    pub uncond: Tensor,
    pub hooks: Option<HookRegistry>,
    pub adapters: Vec<String>,
    pub result: GenerationResult,
}

pub struct Generator<'a> {
    backbone: &'a ToyBackbone,
    weights: &'a ModelWeights,
    tokenizer: Tokenizer,
}

impl<'a> Generator<'a> {
    pub fn new(backbone: &'a ToyBackbone, weights: &'a ModelWeights) -> Self {
        Self {
            backbone,
            weights,
            tokenizer: Tokenizer::new(backbone.config.context_len),
        }
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Resolves boxes, assembles the prompt, encodes both guidance branches
    /// and builds the localization hooks.
    pub fn prepare(&self, req: &GenerationRequest) -> Result<Prepared> {
        req.check()?;
        let (w, h) = req.size(self.backbone.image_size());
        let (boxes, spawned, warnings) = spawn_or_validate_boxes(&req.objects, w as f64, h as f64, req.seed)?;
        let s = self.backbone.image_size() as f64;
        let (sx, sy) = (s / w as f64, s / h as f64);
        let objects: Vec<PromptObject> = req
            .objects
            .iter()
            .zip(&boxes)
            .map(|(o, b)| {
                Ok(PromptObject {
                    name: o.name.clone(),
                    orientation: o.theta.clone(),
                    tight_box: Box2D::new(b.x0 * sx, b.y0 * sy, b.x1 * sx, b.y1 * sy)?,
                })
            })
            .collect::<Result<_>>()?;
        let binding = assemble_prompt(&self.tokenizer, &req.prompt, &objects, req.padding, s, s)?;
        let tokens = compass_tokens_for(&self.weights.compass, &binding, &objects)?;
        let cond = condition_sequence(&binding, &tokens, &self.backbone.text, &self.weights.base)?;
        let empty = assemble_prompt(&self.tokenizer, "", &[], req.padding, s, s)?;
        let uncond = condition_sequence(&empty, &[], &self.backbone.text, &self.weights.base)?;
        let hooks = if req.use_call && !binding.entries.is_empty() {
            let set = build_mask_set(&binding, &self.backbone.resolutions(), s, s)?;
            Some(attach_hooks(self.backbone, &set, true)?)
        } else {
            None
        };
        let mut adapters: Vec<String> = Vec::new();
        let available = self.weights.adapter_prefixes();
        if available.iter().any(|p| p == ADAPTER_PREFIX) {
            adapters.push(ADAPTER_PREFIX.into());
        }
        for subject in &req.subjects {
            let prefix = subject_prefix(subject);
            if !available.contains(&prefix) {
                return Err(CompassError::Input(format!("no adapter loaded for subject `{subject}`")));
            }
            adapters.push(prefix);
        }
        let resolved = req
            .objects
            .iter()
            .zip(&boxes)
            .zip(&spawned)
            .map(|((o, b), &sp)| {
                Ok(ResolvedObject {
                    name: o.name.clone(),
                    theta: o.theta.clone(),
                    tight_box: *b,
                    loose_box: crate::geometry::loose_box(b, req.padding, w as f64, h as f64)?,
                    spawned: sp,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            result: GenerationResult {
                schema: RESULT_SCHEMA.into(),
                seed: req.seed,
                steps: req.steps,
                guidance_scale: req.guidance_scale,
                width: w,
                height: h,
                objects: resolved,
                binding: binding.clone(),
                warnings,
            },
            binding,
            cond,
            uncond,
            hooks,
            adapters,
        })
    }

    /// Initial latent noise for `seed`.
    pub fn initial_noise(&self, seed: u64) -> Tensor {
        let g = self.backbone.config.grid();
        let c = self.backbone.config.latent_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..g * g * c).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::from_vec(g * g, c, data)
    }

    /// Guided velocity estimate. With guidance scale 1 the unconditional
    /// branch is skipped entirely.
    pub fn guided_velocity(
        &self,
        p: &Prepared,
        x: &Tensor,
        t: usize,
        guidance: f64,
        probe: Option<&mut AttentionProbe>,
    ) -> Result<Tensor> {
        let mut ctx = DenoiseContext {
            hooks: p.hooks.as_ref(),
            adapters: &p.adapters,
            probe,
        };
        let v_c = self.backbone.predict_velocity(self.weights, x, t, &p.cond, &mut ctx)?;
        if guidance == 1.0 {
            return Ok(v_c);
        }
        let mut ctx = DenoiseContext {
            hooks: None,
            adapters: &p.adapters,
            probe: None,
        };
        let v_u = self.backbone.predict_velocity(self.weights, x, t, &p.uncond, &mut ctx)?;
        Ok(v_u.zip_map(&v_c, |u, c| u + guidance * (c - u)))
    }

    /// Runs the sampler from `x` and returns the final latent.
    pub fn sample(
        &self,
        p: &Prepared,
        mut x: Tensor,
        steps: usize,
        guidance: f64,
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<Tensor> {
        let ts = self.backbone.schedule.sampling_timesteps(steps);
        for (i, &t) in ts.iter().enumerate() {
            if let Some(pr) = probe.as_deref_mut() {
                pr.set_step(i, t as f64);
            }
            let v = self.guided_velocity(p, &x, t, guidance, probe.as_deref_mut())?;
            x = self.backbone.schedule.ddim_step(&x, &v, t, ts.get(i + 1).copied());
        }
        Ok(x)
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<Generated> {
        self.generate_probed(req, None)
    }

    pub fn generate_probed(&self, req: &GenerationRequest, probe: Option<&mut AttentionProbe>) -> Result<Generated> {
        let p = self.prepare(req)?;
        let x = self.sample(&p, self.initial_noise(req.seed), req.steps, req.guidance_scale, probe)?;
        let img = self.backbone.decode_latent(&x);
        let (w, h) = (p.result.width, p.result.height);
        Ok(Generated {
            image: img.resize(w, h),
            result: p.result,
        })
    }
}
