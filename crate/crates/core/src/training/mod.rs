//! Noise-prediction training: pretraining of the built-in backbone and the
//! staged compass fine-tuning (compass encoder + low-rank adapters, base
//! frozen).

pub mod checkpoint;
pub mod config;

use std::path::Path;
use std::sync::Arc;

use compass_autograd::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{DenoiseContext, ModelWeights, ToyBackbone};
use crate::call_attention::{attach_hooks, build_mask_set};
use crate::conditioning::{
    assemble_prompt, compass_forward, featurize, substitute_compass, CompassEncoderParams,
    PromptBinding, PromptObject,
};
use crate::dataset::{heading_word, Provenance, SceneRecord, Stage};
use crate::error::{CompassError, Result};
use crate::imaging::Canvas;
use crate::nn::Binder;
use crate::tokenizer::Tokenizer;

pub use checkpoint::{Checkpoint, CheckpointMeta, LossRow};
pub use config::{ablation_suite, BaseTrainConfig, StagePlan, TrainConfig};

/// Adapter prefix trained by the compass stage.
pub const ADAPTER_PREFIX: &str = "lora";

/// A training record with its image already in latent form.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub latent: Arc<Tensor>,
    /// Slot template (`a photo of a {arrow}`).
    pub template: String,
    pub objects: Vec<PromptObject>,
    pub augmented: bool,
}

impl Example {
    pub fn is_single(&self) -> bool {
        self.objects.len() == 1
    }
}

/// Loads every record's image and converts it to a latent.
pub fn load_examples(records: &[SceneRecord], root: &Path, backbone: &ToyBackbone) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let path = if r.image.is_absolute() { r.image.clone() } else { root.join(&r.image) };
            let img = Canvas::load(&path)?;
            Ok(Example {
                id: r.id.clone(),
                latent: Arc::new(backbone.encode_image(&img)?),
                template: r.caption_template(),
                objects: r
                    .objects
                    .iter()
                    .map(|o| PromptObject {
                        name: o.name.clone(),
                        orientation: o.orientation.clone(),
                        tight_box: o.tight_box,
                    })
                    .collect(),
                augmented: matches!(r.provenance, Provenance::Augmented { .. }),
            })
        })
        .collect()
}

/// Random choices for one batch element.
#[derive(Clone, Debug)]
pub struct Draw {
    pub example: usize,
    pub t: usize,
    pub eps: Tensor,
    pub drop_cond: bool,
    /// Base pretraining only: placeholder carries the heading word.
    pub heading_word: bool,
    /// Base pretraining only: attend through the localization masks.
    pub masked: bool,
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_batch(
    rng: &mut ChaCha8Rng,
    pool: &[usize],
    batch: usize,
    shape: (usize, usize),
    dropout: f64,
    heading_prob: f64,
    mask_prob: f64,
    timesteps: std::ops::Range<usize>,
) -> Vec<Draw> {
    (0..batch)
        .map(|_| {
            let example = pool[rng.random_range(0..pool.len())];
            let t = rng.random_range(timesteps.clone());
            let data = (0..shape.0 * shape.1).map(|_| rng.sample(StandardNormal)).collect();
            Draw {
                example,
                t,
                eps: Tensor::from_vec(shape.0, shape.1, data),
                drop_cond: rng.random::<f64>() < dropout,
                heading_word: rng.random::<f64>() < heading_prob,
                masked: rng.random::<f64>() < mask_prob,
            }
        })
        .collect()
}

enum Mode {
    Base,
    Compass { use_call: bool },
}

struct LossSetup<'a> {
    backbone: &'a ToyBackbone,
    tokenizer: &'a Tokenizer,
    frozen: &'a ParamStore,
    padding: f64,
    mode: Mode,
}

fn binding_for(setup: &LossSetup, ex: &Example, drop: bool) -> Result<PromptBinding> {
    let s = setup.backbone.image_size() as f64;
    if drop {
        assemble_prompt(setup.tokenizer, "", &[], setup.padding, s, s)
    } else {
        assemble_prompt(setup.tokenizer, &ex.template, &ex.objects, setup.padding, s, s)
    }
}

/// Loss and parameter gradients of one batch element.
fn draw_loss(
    setup: &LossSetup,
    trainable: &ParamStore,
    ex: &Example,
    d: &Draw,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let bb = setup.backbone;
    let s = bb.image_size() as f64;
    let binding = binding_for(setup, ex, d.drop_cond)?;
    let mut g = Graph::new();
    let mut b = Binder::new().trainable(trainable).frozen(setup.frozen);
    let (cond, masked, adapters) = match setup.mode {
        Mode::Base => {
            let mut ids = binding.token_ids.clone();
            if d.heading_word {
                for e in &binding.entries {
                    let word = heading_word(ex.objects[e.object_index].orientation.theta());
                    ids[e.compass_token_index] = setup.tokenizer.word_id(word);
                }
            }
            let emb = bb.text.embed(&mut g, &mut b, &ids)?;
            (bb.text.encode(&mut g, &mut b, emb), d.masked, vec![])
        }
        Mode::Compass { use_call } => {
            let compass = if binding.entries.is_empty() {
                None
            } else {
                let feats: Vec<Vec<f64>> = binding
                    .entries
                    .iter()
                    .map(|e| featurize(&ex.objects[e.object_index].orientation))
                    .collect();
                let f = g.constant(Tensor::from_rows(&feats));
                Some(compass_forward(&mut g, &mut b, f))
            };
            let emb = substitute_compass(&mut g, &mut b, &bb.text, &binding, compass)?;
            (bb.text.encode(&mut g, &mut b, emb), use_call, vec![ADAPTER_PREFIX.to_string()])
        }
    };
    let hooks = if masked && !binding.entries.is_empty() {
        let set = build_mask_set(&binding, &bb.resolutions(), s, s)?;
        Some(attach_hooks(bb, &set, true)?)
    } else {
        None
    };
    let x_t = bb.schedule.add_noise(&ex.latent, &d.eps, d.t);
    let x = g.constant(x_t);
    let mut ctx = DenoiseContext {
        hooks: hooks.as_ref(),
        adapters: &adapters,
        probe: None,
    };
    let pred = bb.forward(&mut g, &mut b, x, d.t as f64, cond, &mut ctx);
    let target = bb.schedule.velocity(&ex.latent, &d.eps, d.t);
    let loss = g.mse(pred, Arc::new(target));
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(CompassError::Numeric(format!("non-finite loss on example {}", ex.id)));
    }
    let grads = g.param_grads(&g.backward(loss));
    Ok((value, grads))
}

/// Mean loss and mean gradients over a batch.
fn batch_loss(
    setup: &LossSetup,
    trainable: &ParamStore,
    examples: &[Example],
    draws: &[Draw],
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let mut total = 0.0;
    let mut acc: Vec<(String, Tensor)> = Vec::new();
    let w = 1.0 / draws.len() as f64;
    for d in draws {
        let (l, grads) = draw_loss(setup, trainable, &examples[d.example], d)?;
        total += l * w;
        for (name, gt) in grads {
            match acc.iter_mut().find(|(n, _)| *n == name) {
                Some((_, a)) => a.axpy(w, &gt),
                None => acc.push((name, gt.scale(w))),
            }
        }
    }
    Ok((total, acc))
}

/// Pretrains every base weight of the built-in backbone on `examples`.
/// Captions put the heading word at the compass position part of the
/// time, and part of the steps attend through the localization masks.
pub fn pretrain_base(
    backbone: &ToyBackbone,
    tokenizer: &Tokenizer,
    examples: &[Example],
    cfg: &BaseTrainConfig,
    padding: f64,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(ParamStore, Vec<LossRow>)> {
    if examples.is_empty() {
        return Err(CompassError::Data("no training examples".into()));
    }
    let mut params = backbone.init_base(seed);
    let empty = ParamStore::new();
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let pool: Vec<usize> = (0..examples.len()).collect();
    let shape = examples[0].latent.shape();
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut rng = step_rng(seed ^ 0xba5e, it as u64);
        let draws = draw_batch(
            &mut rng,
            &pool,
            cfg.batch_size,
            shape,
            cfg.cond_dropout,
            cfg.heading_word_prob,
            cfg.mask_prob,
            cfg.min_timestep..backbone.schedule.len(),
        );
        let setup = LossSetup {
            backbone,
            tokenizer,
            frozen: &empty,
            padding,
            mode: Mode::Base,
        };
        let (loss, grads) = batch_loss(&setup, &params, examples, &draws)?;
        // Cosine decay to 10% keeps the late steps stable.
        let progress = it as f64 / cfg.iterations.max(1) as f64;
        opt.config.learning_rate =
            cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        opt.update(&mut params, &grads);
        history.push(LossRow {
            iteration: it,
            stage: "base".into(),
            loss,
        });
        on_step(it, loss);
    }
    Ok((params, history))
}

/// Index pools per stage after the augmentation switch.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub examples: Vec<Example>,
    single: Vec<usize>,
    mixed: Vec<usize>,
}

impl TrainingData {
    pub fn new(examples: Vec<Example>, include_augmented: bool) -> Self {
        let usable: Vec<usize> = (0..examples.len())
            .filter(|&i| include_augmented || !examples[i].augmented)
            .collect();
        let single = usable.iter().copied().filter(|&i| examples[i].is_single()).collect();
        Self {
            examples,
            single,
            mixed: usable,
        }
    }

    pub fn pool(&self, stage: Stage) -> &[usize] {
        match stage {
            Stage::Single => &self.single,
            Stage::Mixed => &self.mixed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub stage_index: usize,
    pub stage: Stage,
    pub loss: f64,
    /// Ids of the sampled records.
    pub batch: Vec<String>,
    /// Object count of each sampled record.
    pub objects: Vec<usize>,
}

/// Compass fine-tuning state.
pub struct Trainer<'a> {
    backbone: &'a ToyBackbone,
    tokenizer: Tokenizer,
    config: TrainConfig,
    base: ParamStore,
    trainable: ParamStore,
    optimizer: AdamW,
    iteration: usize,
    history: Vec<LossRow>,
}

impl<'a> Trainer<'a> {
    /// Fresh compass encoder and adapters on top of frozen `base` weights.
    pub fn new(backbone: &'a ToyBackbone, config: TrainConfig, base: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut trainable = backbone.init_compass(config.n_angles, config.seed ^ 0xc0).store().clone();
        trainable.extend(&backbone.init_adapters(ADAPTER_PREFIX, config.adapter_rank, config.seed ^ 0xad));
        Ok(Self {
            backbone,
            tokenizer: Tokenizer::new(backbone.config.context_len),
            optimizer: AdamW::new(AdamWConfig {
                learning_rate: config.learning_rate,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            }),
            config,
            base,
            trainable,
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(backbone: &'a ToyBackbone, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(backbone, ckpt.meta.train.clone(), ckpt.base.clone())?;
        t.trainable = ckpt.compass.store().clone();
        t.trainable.extend(&ckpt.adapters);
        t.optimizer.step = ckpt.meta.optimizer_step;
        t.optimizer.moments = ckpt.optimizer_moments.clone();
        t.iteration = ckpt.meta.iteration;
        t.history = ckpt.history.clone();
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[LossRow] {
        &self.history
    }

    pub fn base(&self) -> &ParamStore {
        &self.base
    }

    pub fn trainable(&self) -> &ParamStore {
        &self.trainable
    }

    pub fn trainable_mut(&mut self) -> &mut ParamStore {
        &mut self.trainable
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.total_iterations()
    }

    /// The batch that iteration `it` trains on.
    pub fn draws_at(&self, data: &TrainingData, it: usize) -> Result<(usize, Stage, Vec<Draw>)> {
        let (si, stage) = self
            .config
            .stage_at(it)
            .ok_or_else(|| CompassError::Config(format!("iteration {it} is past the last stage")))?;
        let pool = data.pool(stage);
        if pool.is_empty() {
            return Err(CompassError::Data(format!("no usable records for stage {si}")));
        }
        let shape = data.examples[pool[0]].latent.shape();
        let mut rng = step_rng(self.config.seed, it as u64);
        let draws = draw_batch(
            &mut rng,
            pool,
            self.config.batch_size,
            shape,
            self.config.cond_dropout,
            0.0,
            0.0,
            self.config.min_timestep..self.backbone.schedule.len(),
        );
        Ok((si, stage, draws))
    }

    fn setup(&self) -> LossSetup<'_> {
        LossSetup {
            backbone: self.backbone,
            tokenizer: &self.tokenizer,
            frozen: &self.base,
            padding: self.config.padding,
            mode: Mode::Compass {
                use_call: self.config.use_call,
            },
        }
    }

    /// Loss and gradients of iteration `it`'s batch under `trainable`.
    pub fn loss_and_grads(
        &self,
        data: &TrainingData,
        it: usize,
        trainable: &ParamStore,
    ) -> Result<(f64, Vec<(String, Tensor)>)> {
        let (_, _, draws) = self.draws_at(data, it)?;
        batch_loss(&self.setup(), trainable, &data.examples, &draws)
    }

    /// One optimizer step.
    pub fn step(&mut self, data: &TrainingData) -> Result<StepReport> {
        let it = self.iteration;
        let (stage_index, stage, draws) = self.draws_at(data, it)?;
        let (loss, grads) = batch_loss(&self.setup(), &self.trainable, &data.examples, &draws)?;
        self.optimizer.update(&mut self.trainable, &grads);
        self.iteration += 1;
        self.history.push(LossRow {
            iteration: it,
            stage: (stage_index + 1).to_string(),
            loss,
        });
        Ok(StepReport {
            iteration: it,
            stage_index,
            stage,
            loss,
            batch: draws.iter().map(|d| data.examples[d.example].id.clone()).collect(),
            objects: draws.iter().map(|d| data.examples[d.example].objects.len()).collect(),
        })
    }

    /// Trains until `until` (or the end of the plan), saving a checkpoint
    /// to `checkpoint_dir` every `checkpoint_every` iterations and at the end.
    pub fn run(
        &mut self,
        data: &TrainingData,
        until: Option<usize>,
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<()> {
        let end = until
            .unwrap_or(usize::MAX)
            .min(self.config.total_iterations());
        while self.iteration < end {
            let report = self.step(data)?;
            on_step(&report);
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.iteration % every == 0 && self.iteration < end {
                    self.checkpoint().save(dir)?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.checkpoint().save(dir)?;
        }
        Ok(())
    }

    /// Splits the trainable store back into encoder and adapters.
    pub fn weights(&self) -> Result<ModelWeights> {
        let (compass, adapters) = split_trainable(&self.trainable)?;
        Ok(ModelWeights {
            base: self.base.clone(),
            compass,
            adapters,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (compass, adapters) = split_trainable(&self.trainable).expect("trainer holds a valid encoder");
        Checkpoint {
            meta: CheckpointMeta::new(
                self.backbone.config.clone(),
                self.config.clone(),
                self.iteration,
                self.optimizer.step,
            ),
            base: self.base.clone(),
            compass,
            adapters,
            optimizer_moments: self.optimizer.moments.clone(),
            history: self.history.clone(),
        }
    }
}

fn split_trainable(store: &ParamStore) -> Result<(CompassEncoderParams, ParamStore)> {
    let mut enc = ParamStore::new();
    let mut ad = ParamStore::new();
    for (name, t) in store.iter() {
        if name.starts_with("compass.") {
            enc.insert(name, (**t).clone());
        } else {
            ad.insert(name, (**t).clone());
        }
    }
    Ok((CompassEncoderParams::from_store(enc)?, ad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::geometry::{Box2D, Orientation};

    fn toy_examples(bb: &ToyBackbone) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..6)
            .map(|i| {
                let n = if i % 2 == 0 { 1 } else { 2 };
                let objects = (0..n)
                    .map(|k| PromptObject {
                        name: ["arrow", "triangle"][k].into(),
                        orientation: Orientation::yaw(rng.random_range(0.0..6.28)).unwrap(),
                        tight_box: Box2D::new(2.0 + 14.0 * k as f64, 4.0, 14.0 + 14.0 * k as f64, 16.0).unwrap(),
                    })
                    .collect::<Vec<_>>();
                let template = if n == 1 { "a photo of a {arrow}" } else { "a photo of a {arrow} and a {triangle}" };
                let data = (0..64 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
                Example {
                    id: format!("e{i}"),
                    latent: Arc::new(Tensor::from_vec(64, 16, data)),
                    template: template.into(),
                    objects,
                    augmented: i == 5,
                }
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|e| {
                assert_eq!(e.latent.shape(), (bb.config.grid() * bb.config.grid(), 16));
                e
            })
            .collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            stages: vec![
                StagePlan {
                    stage: Stage::Single,
                    iterations: 3,
                },
                StagePlan {
                    stage: Stage::Mixed,
                    iterations: 3,
                },
            ],
            learning_rate: 1e-3,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn base_weights_stay_bit_identical() {
        let bb = ToyBackbone::new(BackboneConfig::default()).unwrap();
        let base = bb.init_base(1);
        let data = TrainingData::new(toy_examples(&bb), true);
        let mut t = Trainer::new(&bb, tiny_config(), base.clone()).unwrap();
        let before = t.trainable().clone();
        t.run(&data, None, None, |_| {}).unwrap();
        assert_eq!(t.base().to_bytes(), base.to_bytes());
        assert_ne!(t.trainable().to_bytes(), before.to_bytes());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let bb = ToyBackbone::new(BackboneConfig::default()).unwrap();
        let data = TrainingData::new(toy_examples(&bb), true);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_config()
        };
        let mut t = Trainer::new(&bb, cfg, bb.init_base(1)).unwrap();
        let before = t.trainable().to_bytes();
        t.run(&data, None, None, |_| {}).unwrap();
        assert_eq!(t.trainable().to_bytes(), before);
    }

    #[test]
    fn stage_one_batches_are_single_object_and_augmentation_switch_applies() {
        let bb = ToyBackbone::new(BackboneConfig::default()).unwrap();
        let data = TrainingData::new(toy_examples(&bb), false);
        assert!(!data.pool(Stage::Mixed).contains(&5));
        let mut t = Trainer::new(&bb, tiny_config(), bb.init_base(1)).unwrap();
        let mut reports = Vec::new();
        t.run(&data, None, None, |r| reports.push(r.clone())).unwrap();
        assert_eq!(reports.len(), 6);
        for r in &reports[..3] {
            assert!(r.objects.iter().all(|&n| n == 1));
        }
        assert_eq!(t.history().len(), 6);
        assert_eq!(t.history()[4].stage, "2");
    }

    #[test]
    fn pretraining_reduces_loss() {
        let bb = ToyBackbone::new(BackboneConfig::default()).unwrap();
        let tok = Tokenizer::default();
        let ex = toy_examples(&bb);
        let cfg = BaseTrainConfig {
            iterations: 30,
            learning_rate: 3e-3,
            ..BaseTrainConfig::default()
        };
        let (_, hist) = pretrain_base(&bb, &tok, &ex, &cfg, 1.2, 0, |_, _| {}).unwrap();
        let first: f64 = hist[..5].iter().map(|r| r.loss).sum();
        let last: f64 = hist[25..].iter().map(|r| r.loss).sum();
        assert!(last < first, "{first} -> {last}");
    }
}
