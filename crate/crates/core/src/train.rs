//! Teacher-forced training with periodic checkpoints and validation selection.

use std::path::{Path, PathBuf};

use pht_tensor::{AdamConfig, AdamState, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::mix;
use crate::error::{file_err, Error, Result};
use crate::model::{Pht, Source};

/// One training pair: model input and reference summary ids.
pub type Example = (Source, Vec<usize>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total optimizer steps; a resumed run continues up to this count.
    pub steps: u64,
    pub batch_size: usize,
    pub base_rate: f64,
    pub warmup_steps: u64,
    /// Save every this many steps (0 saves only at the end).
    pub checkpoint_every: u64,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            base_rate: 1.0,
            warmup_steps: 200,
            checkpoint_every: 500,
            seed: 1,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be positive".into()));
        }
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return Err(Error::Config(format!(
                "base_rate must be positive, got {}",
                self.base_rate
            )));
        }
        Ok(())
    }

    fn adam(&self, model_dim: usize) -> AdamConfig {
        AdamConfig {
            base_rate: self.base_rate,
            warmup_steps: self.warmup_steps,
            model_dim,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedCheckpoint {
    pub step: u64,
    pub path: PathBuf,
    pub validation_loss: Option<f64>,
}

/// Contents of the best-checkpoint marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMarker {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    /// Training loss of every step taken in this run.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<SavedCheckpoint>,
    pub best: Option<BestMarker>,
}

pub const BEST_MARKER: &str = "best.json";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:08}.bin")
}

pub fn read_best(dir: impl AsRef<Path>) -> Result<Option<BestMarker>> {
    let path = dir.as_ref().join(BEST_MARKER);
    match std::fs::read_to_string(&path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(file_err(path)(e)),
    }
}

/// Owns a model and its optimizer state across steps.
pub struct Trainer {
    model: Pht,
    adam: AdamState,
    config: TrainConfig,
    vocab_hash: String,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: Pht, config: TrainConfig, vocab_hash: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(config.adam(model.config().model_dim), model.params());
        Ok(Self {
            model,
            adam,
            config,
            vocab_hash: vocab_hash.into(),
            last_checkpoint: None,
        })
    }

    /// Restores model and optimizer from a checkpoint written by [`Trainer::run`].
    pub fn resume(checkpoint: impl AsRef<Path>, config: TrainConfig) -> Result<Self> {
        let checkpoint = checkpoint.as_ref();
        let (model, vocab_hash, entries) = Pht::load(checkpoint)?;
        let mut trainer = Self::new(model, config, vocab_hash)?;
        trainer.adam.load_entries(trainer.model.params(), &entries)?;
        trainer.last_checkpoint = Some(checkpoint.to_path_buf());
        Ok(trainer)
    }

    pub fn model(&self) -> &Pht {
        &self.model
    }

    pub fn into_model(self) -> Pht {
        self.model
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Example indices of batch `step`: a fixed per-epoch shuffle walked in order.
    fn batch_indices(&self, step: u64, n: usize, cache: &mut Option<(u64, Vec<usize>)>) -> Vec<usize> {
        let b = self.config.batch_size as u64;
        (0..b)
            .map(|i| {
                let p = step * b + i;
                let epoch = p / n as u64;
                if cache.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch)));
                    *cache = Some((epoch, order));
                }
                cache.as_ref().expect("cached order").1[(p % n as u64) as usize]
            })
            .collect()
    }

    /// Mean eval-mode loss over `examples`.
    pub fn evaluate(&self, examples: &[Example]) -> Result<f64> {
        let batch: Vec<(&Source, &[usize])> = examples.iter().map(|(s, y)| (s, y.as_slice())).collect();
        self.model.loss(&batch)
    }

    fn save(&self, dir: &Path, validation_loss: Option<f64>) -> Result<PathBuf> {
        let path = dir.join(checkpoint_name(self.adam.step));
        let mut extra = self.adam.entries(self.model.params());
        if let Some(v) = validation_loss {
            extra.push(("train.validation_loss".into(), Tensor::scalar(v)));
        }
        self.model.save(&path, &self.vocab_hash, &extra)?;
        Ok(path)
    }

    /// Trains until `config.steps`, checkpointing into `out_dir` when given.
    pub fn run(&mut self, train: &[Example], validation: &[Example], out_dir: Option<&Path>) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(file_err(dir))?;
        }
        let mut outcome = TrainOutcome {
            best: match out_dir {
                Some(d) => read_best(d)?,
                None => None,
            },
            ..TrainOutcome::default()
        };
        let mut order = None;
        while self.adam.step < self.config.steps {
            let step = self.adam.step;
            let idx = self.batch_indices(step, train.len(), &mut order);
            let batch: Vec<(&Source, &[usize])> = idx.iter().map(|&i| (&train[i].0, train[i].1.as_slice())).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed ^ 0xd0_0d, step));
            let diverged = || Error::Diverged {
                step: step + 1,
                last_checkpoint: self.last_checkpoint.clone(),
            };
            let (loss, grads) = match self.model.loss_and_grads(&batch, Some(&mut rng)) {
                Err(Error::Tensor(TensorError::NonFinite(_))) => return Err(diverged()),
                r => r?,
            };
            if !loss.is_finite() {
                return Err(diverged());
            }
            let params = self.model.params_mut();
            params.zero_grads();
            params.accumulate_grads(&grads)?;
            self.adam.step(params)?;
            outcome.losses.push(loss);
            let done = self.adam.step;
            if self.config.log_every > 0 && done.is_multiple_of(self.config.log_every) {
                log::info!("step {done}: loss {loss:.5}");
            }
            let every = self.config.checkpoint_every;
            let due = (every > 0 && done.is_multiple_of(every)) || done == self.config.steps;
            if let (Some(dir), true) = (out_dir, due) {
                let vloss = if validation.is_empty() {
                    None
                } else {
                    Some(self.evaluate(validation)?)
                };
                let path = self.save(dir, vloss)?;
                self.last_checkpoint = Some(path.clone());
                log::info!("saved {} (validation loss {vloss:?})", path.display());
                if let Some(v) = vloss {
                    if outcome.best.as_ref().is_none_or(|b| v < b.validation_loss) {
                        let marker = BestMarker {
                            checkpoint: path.clone(),
                            step: done,
                            validation_loss: v,
                        };
                        let mpath = dir.join(BEST_MARKER);
                        std::fs::write(&mpath, serde_json::to_string_pretty(&marker)?).map_err(file_err(&mpath))?;
                        outcome.best = Some(marker);
                    }
                }
                outcome.checkpoints.push(SavedCheckpoint {
                    step: done,
                    path,
                    validation_loss: vloss,
                });
            }
        }
        Ok(outcome)
    }
}
