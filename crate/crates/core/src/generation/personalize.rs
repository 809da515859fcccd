//! Subject personalization: low-rank adapters fitted to a handful of
//! photos of one subject, with everything else frozen.

use std::sync::Arc;

use compass_autograd::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{DenoiseContext, ModelWeights, ToyBackbone};
use crate::conditioning::PersonalizationConfig;
use crate::error::{CompassError, Result};
use crate::imaging::Canvas;
use crate::nn::Binder;
use crate::tokenizer::Tokenizer;
use crate::training::ADAPTER_PREFIX;

/// Adapter prefix for a subject token: `subject.<token>`.
pub fn subject_prefix(token: &str) -> String {
    format!("subject.{}", token.to_lowercase())
}

/// Fits `subject.<token>.*` adapters to `images`. The caption is
/// "a photo of a <token> <class>" with no compass token and no masks; the
/// compass encoder and the base adapters stay frozen. Returns only the new
/// adapter weights.
pub fn personalize(
    backbone: &ToyBackbone,
    weights: &ModelWeights,
    cfg: &PersonalizationConfig,
    images: &[Canvas],
    mut on_step: impl FnMut(usize, f64),
) -> Result<ParamStore> {
    if images.is_empty() {
        return Err(CompassError::Input("personalization needs at least one image".into()));
    }
    let tokenizer = Tokenizer::new(backbone.config.context_len);
    cfg.validate(&tokenizer)?;
    let prefix = subject_prefix(&cfg.subject_token);
    if weights.adapter_prefixes().contains(&prefix) {
        return Err(CompassError::Config(format!("adapters `{prefix}` already exist")));
    }
    let s = backbone.image_size();
    let latents = images
        .iter()
        .map(|img| backbone.encode_image(&img.resize(s, s)))
        .collect::<Result<Vec<_>>>()?;
    let ids = tokenizer.encode(&format!("a photo of a {} {}", cfg.subject_token, cfg.class_name))?;
    let mut adapters = vec![prefix.clone()];
    if weights.adapter_prefixes().iter().any(|p| p == ADAPTER_PREFIX) {
        adapters.insert(0, ADAPTER_PREFIX.to_string());
    }

    let mut trainable = backbone.init_adapters(&prefix, cfg.adapter_rank, cfg.seed ^ 0x5b);
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let shape = latents[0].shape();
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64);
        let latent = &latents[rng.random_range(0..latents.len())];
        let t = rng.random_range(0..backbone.schedule.len());
        let eps = Tensor::from_vec(shape.0, shape.1, (0..shape.0 * shape.1).map(|_| rng.sample(StandardNormal)).collect());

        let mut g = Graph::new();
        let mut b = Binder::new()
            .trainable(&trainable)
            .frozen(&weights.base)
            .frozen(&weights.adapters);
        let emb = backbone.text.embed(&mut g, &mut b, &ids)?;
        let cond = backbone.text.encode(&mut g, &mut b, emb);
        let x = g.constant(backbone.schedule.add_noise(latent, &eps, t));
        let mut ctx = DenoiseContext {
            hooks: None,
            adapters: &adapters,
            probe: None,
        };
        let pred = backbone.forward(&mut g, &mut b, x, t as f64, cond, &mut ctx);
        let loss = g.mse(pred, Arc::new(backbone.schedule.velocity(latent, &eps, t)));
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(CompassError::Numeric(format!("non-finite personalization loss at step {step}")));
        }
        let grads = g.param_grads(&g.backward(loss));
        opt.update(&mut trainable, &grads);
        on_step(step, value);
    }
    Ok(trainable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn setup() -> (ToyBackbone, ModelWeights) {
        let bb = ToyBackbone::new(BackboneConfig::default()).unwrap();
        let w = ModelWeights {
            base: bb.init_base(0),
            compass: bb.init_compass(1, 0),
            adapters: bb.init_adapters(ADAPTER_PREFIX, 4, 0),
        };
        (bb, w)
    }

    #[test]
    fn empty_image_list_is_an_input_error() {
        let (bb, w) = setup();
        let cfg = PersonalizationConfig::new("sks", "car");
        let err = personalize(&bb, &w, &cfg, &[], |_, _| {}).unwrap_err();
        assert!(matches!(err, CompassError::Input(_)));
    }

    #[test]
    fn only_subject_adapters_are_returned_and_trained() {
        let (bb, w) = setup();
        let mut cfg = PersonalizationConfig::new("sks", "car");
        cfg.steps = 3;
        cfg.learning_rate = 1e-2;
        let img = Canvas::from_data(40, 40, (0..1600).map(|i| (i % 7) as f64 / 6.0).collect()).unwrap();
        let out = personalize(&bb, &w, &cfg, &[img], |_, _| {}).unwrap();
        assert!(out.names().all(|n| n.starts_with("subject.sks.")));
        assert_eq!(out.names().count(), w.adapters.names().count());
        let fresh = bb.init_adapters("subject.sks", 4, cfg.seed ^ 0x5b);
        assert_ne!(out, fresh);
    }

    #[test]
    fn two_subjects_coexist() {
        let (bb, mut w) = setup();
        let img = Canvas::new(32, 32);
        for tok in ["sks", "zwx"] {
            let mut cfg = PersonalizationConfig::new(tok, "car");
            cfg.steps = 1;
            let a = personalize(&bb, &w, &cfg, &[img.clone()], |_, _| {}).unwrap();
            w.adapters.extend(&a);
        }
        assert_eq!(
            w.adapter_prefixes(),
            vec!["lora".to_string(), "subject.sks".into(), "subject.zwx".into()]
        );
        let again = PersonalizationConfig::new("sks", "car");
        assert!(personalize(&bb, &w, &again, &[img], |_, _| {}).is_err());
    }
}
