use serde::{Deserialize, Serialize};

use crate::backbone::schedule::TRAIN_TIMESTEPS;
use crate::dataset::Stage;
use crate::error::{CompassError, Result};
use crate::geometry::DEFAULT_PADDING;

/// The toy denoiser is not trained on the lowest-noise timesteps; see
/// [`TrainConfig::toy`].
pub const TOY_MIN_TIMESTEP: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    pub iterations: usize,
}

/// Pretraining of the built-in backbone itself (all base weights trainable).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probability that the compass placeholder carries the heading word.
    pub heading_word_prob: f64,
    /// Probability that a step attends through the localization masks.
    pub mask_prob: f64,
    pub cond_dropout: f64,
    /// Training timesteps are drawn from `[min_timestep, T)`.
    pub min_timestep: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            learning_rate: 2e-3,
            batch_size: 4,
            heading_word_prob: 0.7,
            mask_prob: 0.5,
            cond_dropout: 0.1,
            min_timestep: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub adapter_rank: usize,
    pub padding: f64,
    pub stages: Vec<StagePlan>,
    /// Coupled attention localization during training.
    pub use_call: bool,
    /// Whether augmented records take part.
    pub include_augmented: bool,
    pub cond_dropout: f64,
    /// Angles per orientation (1 = yaw only, 3 = yaw/pitch/roll).
    pub n_angles: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Training timesteps are drawn from `[min_timestep, T)`.
    pub min_timestep: usize,
    pub base: BaseTrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::staged()
    }
}

impl TrainConfig {
    /// 30K single-object iterations followed by 70K mixed ones.
    pub fn staged() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            batch_size: 4,
            adapter_rank: 4,
            padding: DEFAULT_PADDING,
            stages: vec![
                StagePlan {
                    stage: Stage::Single,
                    iterations: 30_000,
                },
                StagePlan {
                    stage: Stage::Mixed,
                    iterations: 70_000,
                },
            ],
            use_call: true,
            include_augmented: true,
            cond_dropout: 0.1,
            n_angles: 1,
            seed: 0,
            checkpoint_every: 5_000,
            min_timestep: 0,
            base: BaseTrainConfig::default(),
        }
    }

    /// 25K iterations on the mixed corpus in one stage.
    pub fn single_stage_25k() -> Self {
        Self {
            stages: vec![StagePlan {
                stage: Stage::Mixed,
                iterations: 25_000,
            }],
            ..Self::staged()
        }
    }

    /// CPU-sized schedule for the built-in backbone. Its denoiser is trained
    /// on timesteps from 300 up only: trained on all of them, the tiny model
    /// spent its capacity on the low-noise end and headings came out near
    /// chance.
    pub fn toy() -> Self {
        Self {
            learning_rate: 2e-3,
            weight_decay: 0.0,
            stages: vec![
                StagePlan {
                    stage: Stage::Single,
                    iterations: 600,
                },
                StagePlan {
                    stage: Stage::Mixed,
                    iterations: 1400,
                },
            ],
            checkpoint_every: 500,
            min_timestep: TOY_MIN_TIMESTEP,
            base: BaseTrainConfig {
                iterations: 10_000,
                heading_word_prob: 1.0,
                mask_prob: 1.0,
                min_timestep: TOY_MIN_TIMESTEP,
                ..BaseTrainConfig::default()
            },
            ..Self::staged()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "staged" | "default" => Ok(Self::staged()),
            "single-stage-25k" => Ok(Self::single_stage_25k()),
            "toy" => Ok(Self::toy()),
            _ => Err(CompassError::Config(format!(
                "unknown preset `{name}` (staged, single-stage-25k, toy)"
            ))),
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }

    /// `(stage index, stage)` that `iteration` falls into.
    pub fn stage_at(&self, iteration: usize) -> Option<(usize, Stage)> {
        let mut end = 0;
        for (i, s) in self.stages.iter().enumerate() {
            end += s.iterations;
            if iteration < end {
                return Some((i, s.stage));
            }
        }
        None
    }

    /// Same settings with one switch flipped: `no-call`, `single-stage`
    /// (all iterations in one mixed stage) or `no-augmentation`. `full`
    /// returns the config unchanged.
    pub fn ablation(&self, name: &str) -> Result<Self> {
        let mut c = self.clone();
        match name {
            "full" => {}
            "no-call" => c.use_call = false,
            "no-augmentation" => c.include_augmented = false,
            "single-stage" => {
                c.stages = vec![StagePlan {
                    stage: Stage::Mixed,
                    iterations: self.total_iterations(),
                }]
            }
            _ => {
                return Err(CompassError::Config(format!(
                    "unknown ablation `{name}` (full, no-call, single-stage, no-augmentation)"
                )))
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            bad.push("learning_rate must be a non-negative number".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".into());
        }
        if self.adapter_rank == 0 {
            bad.push("adapter_rank must be positive".into());
        }
        if !(self.padding.is_finite() && self.padding >= 1.0) {
            bad.push("padding must be at least 1".into());
        }
        if self.stages.is_empty() {
            bad.push("at least one stage is required".into());
        }
        if !(self.n_angles == 1 || self.n_angles == 3) {
            bad.push("n_angles must be 1 or 3".into());
        }
        if self.min_timestep >= TRAIN_TIMESTEPS || self.base.min_timestep >= TRAIN_TIMESTEPS {
            bad.push(format!("min_timestep must be below {TRAIN_TIMESTEPS}"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            bad.push("cond_dropout must be in [0, 1]".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CompassError::Config(bad.join("; ")))
        }
    }
}

/// The four ablation variants, named.
pub fn ablation_suite(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    ["full", "no-call", "single-stage", "no-augmentation"]
        .iter()
        .map(|n| (n.to_string(), base.ablation(n).expect("known ablation")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let s = TrainConfig::staged();
        assert_eq!(s.total_iterations(), 100_000);
        assert_eq!(s.learning_rate, 1e-4);
        assert_eq!(s.batch_size, 4);
        assert_eq!(s.adapter_rank, 4);
        assert_eq!(s.padding, 1.2);
        assert_eq!(s.stage_at(29_999), Some((0, Stage::Single)));
        assert_eq!(s.stage_at(30_000), Some((1, Stage::Mixed)));
        assert_eq!(s.stage_at(100_000), None);
        assert_eq!(TrainConfig::single_stage_25k().total_iterations(), 25_000);
        assert!(TrainConfig::preset("nope").is_err());
    }

    #[test]
    fn ablations_flip_one_switch() {
        let base = TrainConfig::staged();
        let suite = ablation_suite(&base);
        assert_eq!(suite.len(), 4);
        assert!(!suite[1].1.use_call);
        assert_eq!(suite[2].1.stages.len(), 1);
        assert_eq!(suite[2].1.total_iterations(), 100_000);
        assert!(!suite[3].1.include_augmented);
        assert_eq!(suite[0].1, base);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let c = TrainConfig::toy();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.total_iterations(), 100_000);
    }
}
