//! Training configuration and the shared minibatch loop used by every stage.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::evalkit::{accuracy, weighted_f1};
use crate::nn::{permutation, seeded_rng, ParamStore};
use crate::optim::{clip_global_norm, AdamW};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Scheduling only; results are identical either way.
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage()
    }
}

impl TrainConfig {
    /// Defaults for the Stage I/II/III runs.
    pub fn stage() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            batch_size: 32,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            patience: None,
            seed: 0,
            execution: Execution::default(),
        }
    }

    /// Defaults for text-encoder pre-training on pseudo-labels.
    pub fn pretrain() -> Self {
        Self { epochs: 10, ..Self::stage() }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_batch_size(mut self, batch: usize) -> Self {
        self.batch_size = batch;
        self
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Hash of every field that can change the trained parameters.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::json!({
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "clip_norm": self.clip_norm,
            "patience": self.patience,
            "seed": self.seed,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss per scored target over the epoch.
    pub train_loss: f64,
    pub val_weighted_f1: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn best_val_f1(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.epochs.iter().find(|e| e.epoch == best)?.val_weighted_f1
    }

    /// First epoch whose validation weighted F1 reaches `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.val_weighted_f1.is_some_and(|f| f >= target)).map(|e| e.epoch)
    }
}

/// A model plus its training data, seen by [`fit`] as opaque items.
pub trait Objective: Sync {
    /// Parameter stores in tape-group order.
    fn stores(&self) -> Vec<&ParamStore>;

    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;

    /// Groups the optimizer must leave untouched.
    fn frozen_groups(&self) -> Vec<usize> {
        Vec::new()
    }

    fn train_len(&self) -> usize;

    /// Adds the gradient of the summed loss over `items` into `grads`;
    /// returns that loss and the number of scored targets.
    fn chunk_loss(&self, items: &[usize], grads: &mut Gradients) -> Result<(f64, usize)>;

    /// Validation predictions and gold labels; empty when there is no
    /// validation data.
    fn validation(&self, exec: Execution) -> Result<(Vec<usize>, Vec<usize>)>;

    fn n_classes(&self) -> usize;

    /// Items per gradient chunk. Chunks are the unit of parallel work and are
    /// reduced in a fixed order, so this must not depend on the thread count.
    fn chunk_size(&self) -> usize {
        8
    }
}

/// Minibatch AdamW over shuffled items. After every epoch the model is scored
/// on validation data; the weights with the highest weighted F1 (earliest
/// epoch on ties) are restored at the end.
pub fn fit<O: Objective>(objective: &mut O, config: &TrainConfig) -> Result<History> {
    config.validate()?;
    let mut history = History::default();
    if config.epochs == 0 {
        return Ok(history);
    }
    let n = objective.train_len();
    if n == 0 {
        return Err(Error::Precondition("no training items".into()));
    }
    let sizes: Vec<usize> = objective.stores().iter().map(|s| s.len()).collect();
    let frozen = objective.frozen_groups();
    let mut opt = AdamW::new(&objective.stores(), config.learning_rate, config.weight_decay);
    let mut rng = seeded_rng(config.seed, "shuffle");
    let mut best: Option<(f64, Vec<ParamStore>)> = None;
    let mut since_best = 0usize;
    let chunk = objective.chunk_size().max(1);

    for epoch in 1..=config.epochs {
        let order = permutation(&mut rng, n);
        let (mut epoch_loss, mut epoch_targets) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let chunks: Vec<&[usize]> = batch.chunks(chunk).collect();
            let obj: &O = objective;
            let parts = par::map(config.execution, &chunks, |items| {
                let mut g = Gradients::new(&sizes);
                obj.chunk_loss(items, &mut g).map(|(loss, count)| (g, loss, count))
            });
            let mut grads = Gradients::new(&sizes);
            let (mut loss, mut count) = (0.0, 0usize);
            for part in parts {
                let (g, l, c) = part?;
                grads.merge(&g);
                loss += l;
                count += c;
            }
            if count == 0 {
                continue;
            }
            grads.scale(1.0 / count as f64);
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            opt.step(&mut objective.stores_mut(), &grads, &frozen);
            epoch_loss += loss;
            epoch_targets += count;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Precondition(format!("training diverged at epoch {epoch}")));
        }

        let (preds, golds) = objective.validation(config.execution)?;
        let (f1, acc) = if golds.is_empty() {
            (None, None)
        } else {
            (Some(weighted_f1(&preds, &golds, objective.n_classes())?), Some(accuracy(&preds, &golds)?))
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / epoch_targets.max(1) as f64,
            val_weighted_f1: f1,
            val_accuracy: acc,
        });
        log::debug!("epoch {epoch}: loss {:.4} val f1 {f1:?}", epoch_loss / epoch_targets.max(1) as f64);

        match f1 {
            Some(f) if best.as_ref().is_none_or(|(b, _)| f > *b) => {
                best = Some((f, objective.stores().into_iter().cloned().collect()));
                history.best_epoch = Some(epoch);
                since_best = 0;
            }
            Some(_) => since_best += 1,
            None => history.best_epoch = Some(epoch),
        }
        if config.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }

    if let Some((_, snapshot)) = best {
        for (store, saved) in objective.stores_mut().into_iter().zip(&snapshot) {
            store.load_from(saved);
        }
    }
    Ok(history)
}
