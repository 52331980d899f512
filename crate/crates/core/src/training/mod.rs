//! REINFORCE training with per-instance normalized multi-start advantages.

mod adam;
mod advantage;
mod loss;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use advantage::{
    advantage_moments, normalized_advantages, normalized_advantages_with, AdvantageScale, AdvantageStats,
    SIGMA_FLOOR,
};
pub use loss::{reinforce_backward, reinforce_loss, FrozenBatch};

use crate::error::{Error, Result};
use crate::instance::{generate_instances, Instance};
use crate::neural::{load_policy, save_checkpoint, GradBuffer};
use crate::policy::Policy;
use crate::rollout::{rollout_batch, DecodeMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub instances_per_epoch: usize,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Nodes per training instance.
    pub n: usize,
    /// Overrides the model's clipping constant when set.
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Save a checkpoint every this many batches (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: f64,
    #[serde(default)]
    pub advantage_scale: AdvantageScale,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_wd() -> f64 {
    1e-6
}

fn default_max_grad_norm() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            instances_per_epoch: 10_000,
            epochs: 5,
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            n: 20,
            clip: None,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            max_grad_norm: default_max_grad_norm(),
            advantage_scale: AdvantageScale::StdDev,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config { field: field.into(), msg });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.instances_per_epoch < self.batch_size {
            return bad(
                "instances_per_epoch",
                format!("must be at least batch_size ({})", self.batch_size),
            );
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return bad("learning_rate", format!("must lie in (0, 1), got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if self.n < 2 {
            return bad("n", format!("must be at least 2, got {}", self.n));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("clip", format!("must be positive, got {c}"));
            }
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm", format!("must be positive, got {}", self.max_grad_norm));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return bad("checkpoint_dir", "required when checkpoint_every is set".into());
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.instances_per_epoch / self.batch_size
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchMetrics {
    pub epoch: usize,
    pub batch: usize,
    /// Mean length over all B·N sampled trajectories.
    pub mean_len: f64,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub wallclock_s: f64,
    /// Largest per-instance `|mean advantage|` in the batch.
    pub max_adv_mean: f64,
    /// Largest per-instance `|std(advantage) − 1|` over non-degenerate instances.
    pub max_adv_std_err: f64,
}

pub trait MetricsSink {
    fn record(&mut self, metrics: &BatchMetrics) -> Result<()>;
}

impl MetricsSink for Vec<BatchMetrics> {
    fn record(&mut self, metrics: &BatchMetrics) -> Result<()> {
        self.push(metrics.clone());
        Ok(())
    }
}

pub const METRICS_HEADER: &str = "epoch,batch,mean_len,loss,grad_norm,wallclock_s";

/// Writes metrics as CSV rows, with the header first unless appending.
pub struct CsvSink<W: Write> {
    out: W,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W, header: bool) -> Result<Self> {
        if header {
            writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::io("<metrics>", e))?;
        }
        Ok(CsvSink { out })
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, m: &BatchMetrics) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{:.6},{:.8},{:.6},{:.3}",
            m.epoch, m.batch, m.mean_len, m.loss, m.grad_norm, m.wallclock_s
        )
        .and_then(|_| self.out.flush())
        .map_err(|e| Error::io("<metrics>", e))
    }
}

/// Independent seed for `(tag, index)` derived from a root seed.
pub fn derive_seed(root: u64, tag: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(tag);
    rng.set_word_pos(u128::from(index) * 16);
    rng.next_u64()
}

const INSTANCE_TAG: u64 = 1;
const ROLLOUT_TAG: u64 = 2;

/// Position in the run; the next batch to train is `(epoch, batch)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub batch: usize,
    pub steps: u64,
    pub wallclock_s: f64,
}

pub struct Trainer {
    config: TrainConfig,
    policy: Policy<f32>,
    adam: Adam,
    grads: GradBuffer,
    state: TrainState,
}

const MODEL_FILE: &str = "model.json";
const OPTIMIZER_FILE: &str = "optimizer.json";
const STATE_FILE: &str = "state.json";

impl Trainer {
    pub fn new(config: TrainConfig, mut policy: Policy<f32>) -> Result<Self> {
        config.validate()?;
        if let Some(c) = config.clip {
            policy.set_clip(c)?;
        }
        let adam = Adam::new(config.adam(), policy.params());
        let grads = GradBuffer::zeros_like(policy.params());
        Ok(Trainer {
            config,
            policy,
            adam,
            grads,
            state: TrainState::default(),
        })
    }

    /// Continues from a directory written by [`Trainer::save`].
    pub fn resume(config: TrainConfig, dir: &Path) -> Result<Self> {
        config.validate()?;
        let mut policy = load_policy(&dir.join(MODEL_FILE), None)?;
        if let Some(c) = config.clip {
            policy.set_clip(c)?;
        }
        let mut adam = Adam::load(&dir.join(OPTIMIZER_FILE), policy.params())?;
        adam.config = config.adam();
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainState = serde_json::from_str(&text)?;
        let grads = GradBuffer::zeros_like(policy.params());
        Ok(Trainer {
            config,
            policy,
            adam,
            grads,
            state,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(self.policy.store(), self.policy.config(), &dir.join(MODEL_FILE))?;
        self.adam.save(&dir.join(OPTIMIZER_FILE))?;
        let path = dir.join(STATE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.state)?).map_err(|e| Error::io(&path, e))
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn policy(&self) -> &Policy<f32> {
        &self.policy
    }

    pub fn into_policy(self) -> Policy<f32> {
        self.policy
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    fn epoch_instances(&self, epoch: usize) -> Result<Vec<Instance>> {
        let seed = derive_seed(self.config.seed, INSTANCE_TAG, epoch as u64);
        generate_instances(seed, self.config.n, self.config.instances_per_epoch)
    }

    /// One optimizer step on `instances`.
    pub fn train_batch(&mut self, instances: &[&Instance], rollout_seed: u64) -> Result<BatchMetrics> {
        let (batch, _) = rollout_batch(&self.policy, instances, DecodeMode::Sample, Some(rollout_seed))?;
        let mut advantages = Vec::with_capacity(batch.len());
        let (mut max_adv_mean, mut max_adv_std_err) = (0.0f64, 0.0f64);
        for trajs in &batch.trajectories {
            let rewards: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
            let stats = normalized_advantages_with(&rewards, self.config.advantage_scale)?;
            let (m, s) = advantage_moments(&stats);
            max_adv_mean = max_adv_mean.max(m);
            max_adv_std_err = max_adv_std_err.max(s);
            advantages.push(stats.advantages);
        }
        let frozen = FrozenBatch::from_rollout(&batch, advantages)?;
        self.grads.zero();
        let loss = reinforce_backward(&self.policy, instances, &frozen, &mut self.grads)?;
        let grad_norm = clip_grad_norm(&mut self.grads, self.config.max_grad_norm);
        self.adam.step(&mut self.policy.store_mut().params, &self.grads)?;
        Ok(BatchMetrics {
            epoch: self.state.epoch,
            batch: self.state.batch,
            mean_len: batch.mean_length(),
            loss,
            grad_norm,
            wallclock_s: 0.0,
            max_adv_mean,
            max_adv_std_err,
        })
    }

    /// Trains until the configured epochs are done or `max_batches` more
    /// batches have run, checkpointing on the configured cadence.
    pub fn run(&mut self, sink: &mut dyn MetricsSink, max_batches: Option<usize>) -> Result<()> {
        let started = Instant::now();
        let base_clock = self.state.wallclock_s;
        let per_epoch = self.config.batches_per_epoch();
        let b = self.config.batch_size;
        let mut ran = 0;
        while !self.is_finished() {
            let instances = self.epoch_instances(self.state.epoch)?;
            while self.state.batch < per_epoch {
                if max_batches.is_some_and(|m| ran >= m) {
                    return Ok(());
                }
                let chunk: Vec<&Instance> = instances[self.state.batch * b..(self.state.batch + 1) * b]
                    .iter()
                    .collect();
                let seed = derive_seed(self.config.seed, ROLLOUT_TAG, self.state.steps);
                let mut metrics = self.train_batch(&chunk, seed)?;
                self.state.wallclock_s = base_clock + started.elapsed().as_secs_f64();
                metrics.wallclock_s = self.state.wallclock_s;
                sink.record(&metrics)?;
                log::debug!(
                    "epoch {} batch {} mean_len {:.4} loss {:.6}",
                    metrics.epoch,
                    metrics.batch,
                    metrics.mean_len,
                    metrics.loss
                );
                self.state.batch += 1;
                self.state.steps += 1;
                ran += 1;
                let every = self.config.checkpoint_every;
                if every > 0 && self.state.steps.is_multiple_of(every as u64) {
                    self.checkpoint()?;
                }
            }
            self.state.epoch += 1;
            self.state.batch = 0;
            log::info!("finished epoch {}", self.state.epoch);
        }
        self.checkpoint()
    }

    fn checkpoint(&self) -> Result<()> {
        match &self.config.checkpoint_dir {
            Some(dir) => self.save(dir),
            None => Ok(()),
        }
    }
}

/// Full training run from a freshly initialized or pretrained policy.
pub fn train(config: &TrainConfig, policy: Policy<f32>, sink: &mut dyn MetricsSink) -> Result<Policy<f32>> {
    let mut trainer = Trainer::new(config.clone(), policy)?;
    trainer.run(sink, None)?;
    Ok(trainer.into_policy())
}
