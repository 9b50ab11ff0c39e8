use std::path::Path;

use mace_core::bcm::GeneratorConfig;
use mace_core::digest::json_digest;
use mace_core::evalsuite::EvalProtocol;
use mace_core::model::ModelConfig;
use mace_core::training::TrainConfig;
use mace_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Training settings other than the task distribution, which lives in the
/// top-level `generator` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub total_tasks: u64,
    pub epochs: u64,
    pub eval_every: u64,
    pub validation_tasks: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    /// Steps between checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            base_lr: t.base_lr,
            warmup_fraction: t.warmup_fraction,
            batch_size: t.batch_size,
            total_tasks: t.total_tasks,
            epochs: t.epochs,
            eval_every: t.eval_every,
            validation_tasks: t.validation_tasks,
            seed: t.seed,
            clip_norm: t.clip_norm,
            init_seed: 0,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalProtocol,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let config: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        config.generator.validate()?;
        config.model.validate()?;
        config.eval.validate()?;
        config.train_config().validate()?;
        Ok(config)
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            base_lr: t.base_lr,
            warmup_fraction: t.warmup_fraction,
            batch_size: t.batch_size,
            total_tasks: t.total_tasks,
            epochs: t.epochs,
            generator: self.generator.clone(),
            eval_every: t.eval_every,
            validation_tasks: t.validation_tasks,
            seed: t.seed,
            clip_norm: t.clip_norm,
        }
    }
}
