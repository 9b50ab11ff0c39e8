//! Meta-training: task streaming, the learning-rate schedule, Adam updates,
//! and checkpoints.

mod checkpoint;
#[cfg(test)]
mod tests;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::bcm::{make_task, task_seed, GeneratorConfig, TaskBundle};
use crate::diffengine::{adam_step, AdamState, Gradients};
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::formats::atomic_write;
use crate::model::{Model, ModelConfig};

/// Salt separating validation task seeds from the training stream.
const VALIDATION_STREAM: u64 = 0x7661_6c69_6461_7465;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    /// Tasks drawn per epoch.
    pub total_tasks: u64,
    /// More than one epoch replays a fixed pre-generated corpus.
    pub epochs: u64,
    pub generator: GeneratorConfig,
    /// Validation cadence in steps; 0 disables validation.
    pub eval_every: u64,
    pub validation_tasks: usize,
    pub seed: u64,
    /// Optional global-norm gradient clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            warmup_fraction: 0.02,
            batch_size: 32,
            total_tasks: 50_000,
            epochs: 1,
            generator: GeneratorConfig::default(),
            eval_every: 1000,
            validation_tasks: 100,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.generator.validate()
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_tasks * self.epochs).div_ceil(self.batch_size as u64)
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps() as f64
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

/// Linear warmup from 0 to `base_lr`, then constant.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_steps();
    if warmup <= 0.0 || step as f64 >= warmup {
        config.base_lr
    } else {
        config.base_lr * step as f64 / warmup
    }
}

/// Where training tasks come from.
#[derive(Clone, Debug)]
pub enum TaskSource {
    /// Fresh tasks from `(seed, index)`; no index is ever reused.
    Stream,
    /// A fixed corpus, reshuffled every epoch.
    Corpus(Arc<Vec<TaskBundle>>),
}

impl TaskSource {
    /// The source implied by the config: epochs > 1 pre-generate `total_tasks` tasks.
    pub fn for_config(config: &TrainConfig) -> Result<Self> {
        if config.epochs <= 1 {
            return Ok(TaskSource::Stream);
        }
        let tasks = (0..config.total_tasks)
            .into_par_iter()
            .map(|k| make_task(&config.generator, task_seed(config.seed, k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskSource::Corpus(Arc::new(tasks)))
    }

    fn task(&self, config: &TrainConfig, position: u64) -> Result<TaskBundle> {
        match self {
            TaskSource::Stream => make_task(&config.generator, task_seed(config.seed, position)),
            TaskSource::Corpus(tasks) => {
                let n = tasks.len() as u64;
                if n == 0 {
                    return Err(Error::Config("empty training corpus".into()));
                }
                let (epoch, offset) = (position / n, position % n);
                let mut order: Vec<usize> = (0..tasks.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(task_seed(config.seed, u64::MAX - epoch)));
                Ok(tasks[order[offset as usize]].clone())
            }
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub val_loss: Option<f64>,
}

/// Mean over tasks of the per-query NLL and the matching gradient. Gradients
/// are summed in task order, so the result does not depend on thread count.
pub fn batch_gradient(model: &Model, tasks: &[TaskBundle]) -> Result<(f64, Gradients)> {
    if tasks.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let per_task = tasks
        .par_iter()
        .map(|task| {
            let (loss, mut grads) = model.loss_and_grad(task)?;
            let scale = 1.0 / task.n_int() as f64;
            grads.scale(scale);
            Ok((loss * scale, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let b = tasks.len() as f64;
    let mut iter = per_task.into_iter();
    let (mut loss, mut total) = iter.next().expect("non-empty");
    for (l, g) in iter {
        loss += l;
        total.accumulate(&g)?;
    }
    total.scale(1.0 / b);
    Ok((loss / b, total))
}

/// Mean per-query NLL on `tasks` without gradients.
pub fn mean_loss(model: &Model, tasks: &[TaskBundle]) -> Result<f64> {
    let losses = tasks
        .par_iter()
        .map(|t| {
            let mog = model.forward(t)?;
            Ok(crate::model::loss(&mog, &t.outcomes())? / t.n_int() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Training state; everything needed to resume lives in [`Checkpoint`].
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub step: u64,
    /// Position in the task stream (the next task index to draw).
    pub tasks_seen: u64,
    /// Run-config digest recorded in checkpoints.
    pub run_digest: Option<String>,
    source: TaskSource,
    validation: Vec<TaskBundle>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model_config: ModelConfig, init_seed: u64) -> Result<Self> {
        let model = Model::init(model_config, init_seed)?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        let source = TaskSource::for_config(&config)?;
        Self::with_model_and_source(config, model, source)
    }

    pub fn with_model_and_source(config: TrainConfig, model: Model, source: TaskSource) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&model.params);
        let validation = validation_set(&config)?;
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            tasks_seen: 0,
            run_digest: None,
            source,
            validation,
        })
    }

    pub fn resume(config: TrainConfig, checkpoint: Checkpoint) -> Result<Self> {
        let source = TaskSource::for_config(&config)?;
        Self::resume_with_source(config, checkpoint, source)
    }

    pub fn resume_with_source(config: TrainConfig, checkpoint: Checkpoint, source: TaskSource) -> Result<Self> {
        if checkpoint.train_digest != config.digest() {
            return Err(Error::Config("checkpoint was written under a different training config".into()));
        }
        let model = Model::from_parts(checkpoint.model_config, checkpoint.params)?;
        let mut trainer = Self::with_model_and_source(config, model, source)?;
        trainer.run_digest = checkpoint.run_digest;
        trainer.adam = checkpoint.adam;
        trainer.step = checkpoint.step;
        trainer.tasks_seen = checkpoint.tasks_seen;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            tasks_seen: self.tasks_seen,
            train_digest: self.config.digest(),
            generator_digest: self.config.generator.prior_digest(),
            run_digest: self.run_digest.clone(),
        }
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    fn next_batch(&self) -> Result<Vec<TaskBundle>> {
        let b = self.config.batch_size as u64;
        (self.tasks_seen..self.tasks_seen + b)
            .into_par_iter()
            .map(|pos| self.source.task(&self.config, pos))
            .collect()
    }

    /// One optimizer step on the next batch. A non-finite loss or gradient
    /// leaves the state untouched and returns an error.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let batch = self.next_batch()?;
        self.step_on(&batch)
    }

    /// One optimizer step on an explicit batch (advances the stream position anyway).
    pub fn step_on(&mut self, batch: &[TaskBundle]) -> Result<LogRow> {
        let (loss, mut grads) = batch_gradient(&self.model, batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        let grad_norm = grads.global_norm();
        if let Some(c) = self.config.clip_norm {
            if grad_norm > c {
                grads.scale(c / grad_norm);
            }
        }
        let lr = lr_at(self.step, &self.config);
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr)?;
        self.step += 1;
        self.tasks_seen += batch.len() as u64;
        let val_loss = if self.config.eval_every > 0 && self.step % self.config.eval_every == 0 && !self.validation.is_empty() {
            Some(mean_loss(&self.model, &self.validation)?)
        } else {
            None
        };
        Ok(LogRow {
            step: self.step,
            lr,
            loss,
            grad_norm,
            val_loss,
        })
    }

    /// Runs until `total_steps`, or `max_steps` more steps, whichever is first.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<Vec<LogRow>> {
        let stop = max_steps.map_or(self.config.total_steps(), |m| (self.step + m).min(self.config.total_steps()));
        let mut log = Vec::new();
        while self.step < stop {
            log.push(self.train_step()?);
        }
        Ok(log)
    }
}

fn validation_set(config: &TrainConfig) -> Result<Vec<TaskBundle>> {
    if config.eval_every == 0 {
        return Ok(Vec::new());
    }
    (0..config.validation_tasks as u64)
        .into_par_iter()
        .map(|k| make_task(&config.generator, task_seed(config.seed ^ VALIDATION_STREAM, k)))
        .collect()
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "lr", "loss", "grad_norm", "val_loss"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            r.grad_norm.to_string(),
            r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    atomic_write(path, &bytes)
}

/// Full run with artifacts in `out_dir`: `checkpoint.mack` (written every
/// `checkpoint_every` steps and at the end) and `train_log.csv`. On a numeric
/// failure the last good state is saved before the error is returned.
pub fn train(config: TrainConfig, model: Model, out_dir: &Path, checkpoint_every: u64) -> Result<(Checkpoint, Vec<LogRow>)> {
    std::fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::with_model(config, model)?;
    train_loop(&mut trainer, out_dir, checkpoint_every, Vec::new())
}

pub fn train_loop(trainer: &mut Trainer, out_dir: &Path, checkpoint_every: u64, mut log: Vec<LogRow>) -> Result<(Checkpoint, Vec<LogRow>)> {
    let ckpt_path = out_dir.join("checkpoint.mack");
    let log_path = out_dir.join("train_log.csv");
    while !trainer.finished() {
        match trainer.train_step() {
            Ok(row) => log.push(row),
            Err(e) => {
                save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
                write_log_csv(&log_path, &log)?;
                return Err(e);
            }
        }
        if checkpoint_every > 0 && trainer.step % checkpoint_every == 0 {
            save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
            write_log_csv(&log_path, &log)?;
        }
    }
    let ckpt = trainer.checkpoint();
    save_checkpoint(&ckpt_path, &ckpt)?;
    write_log_csv(&log_path, &log)?;
    Ok((ckpt, log))
}
