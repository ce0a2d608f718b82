//! Mini-batch Adam with early stopping on a held-out slice.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of the examples held out for early stopping (seeded).
    pub val_fraction: f64,
    /// Caps the optimizer steps per epoch; each epoch then sees a fresh
    /// random subset of the training examples.
    pub batches_per_epoch: Option<usize>,
    pub max_val_examples: Option<usize>,
    /// Hard cap on optimizer steps over the whole run.
    pub max_steps: Option<usize>,
    /// Cosine decay of the learning rate to zero over `max_steps`.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            max_epochs: 1000,
            patience: 30,
            val_fraction: 0.1,
            batches_per_epoch: None,
            max_val_examples: None,
            max_steps: None,
            cosine_decay: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} is not positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.batches_per_epoch == Some(0) || self.max_steps == Some(0) {
            return Err(Error::invalid("batches_per_epoch and max_steps must be positive"));
        }
        if self.cosine_decay && self.max_steps.is_none() {
            return Err(Error::invalid("cosine_decay needs max_steps"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch (training loss when nothing is held out).
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

/// What the trainer minimizes. `idx` indexes the caller's examples.
pub trait Objective {
    fn loss(&self, g: &mut Graph, store: &ParamStore, idx: &[usize], training: bool) -> Result<Var>;

    /// Hook after each optimizer step (running statistics and such).
    fn after_step(&self, _store: &mut ParamStore) -> Result<()> {
        Ok(())
    }
}

const EVAL_CHUNK: usize = 256;

fn evaluate(store: &ParamStore, obj: &dyn Objective, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let l = obj.loss(&mut g, store, chunk, false)?;
        total += g.value(l).data()[0] * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains `store` on examples `0..n`, restores the parameters of the best
/// epoch and marks the store trained.
pub fn fit(store: &mut ParamStore, n: usize, obj: &dyn Objective, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("no training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * cfg.val_fraction).floor() as usize).min(n - 1);
    let (val, train) = order.split_at(n_val);
    let val = &val[..cfg.max_val_examples.map_or(val.len(), |m| m.min(val.len()))];
    let mut train = train.to_vec();

    store.set_optimizer(AdamConfig::with_lr(cfg.learning_rate));
    store.zero_grads();
    let mut hist = History { best_loss: f64::INFINITY, ..Default::default() };
    let mut best = store.values();
    let mut wait = 0;
    for epoch in 0..cfg.max_epochs {
        train.shuffle(&mut rng);
        let left = cfg.max_steps.map_or(usize::MAX, |m| m - hist.steps);
        let batches = train.chunks(cfg.batch_size).take(cfg.batches_per_epoch.unwrap_or(usize::MAX).min(left));
        let (mut sum, mut seen) = (0.0, 0usize);
        for batch in batches {
            if let (true, Some(m)) = (cfg.cosine_decay, cfg.max_steps) {
                let frac = hist.steps as f64 / m as f64;
                store.set_learning_rate(cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
            }
            let mut g = Graph::new();
            let loss = obj.loss(&mut g, store, batch, true)?;
            let l = g.value(loss).data()[0];
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, step: hist.steps, loss: l });
            }
            g.backward(loss, store)?;
            store.step()?;
            store.zero_grads();
            obj.after_step(store)?;
            hist.steps += 1;
            sum += l * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = sum / seen as f64;
        let val_loss = if val.is_empty() { train_loss } else { evaluate(store, obj, val)? };
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, step: hist.steps, loss: val_loss });
        }
        log::debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
        hist.train_loss.push(train_loss);
        hist.val_loss.push(val_loss);
        if val_loss < hist.best_loss {
            hist.best_loss = val_loss;
            hist.best_epoch = epoch;
            best = store.values();
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                hist.stopped_early = true;
                break;
            }
        }
        if cfg.max_steps.is_some_and(|m| hist.steps >= m) {
            break;
        }
    }
    store.load_values(&best)?;
    store.mark_trained();
    Ok(hist)
}
