//! Optimizers, learning-rate schedule and the early-stopping training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::NormalizedSample;
use crate::models::{Batch, Mode, Model};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrain,
    #[error("validation set is empty")]
    EmptyVal,
    #[error("non-finite loss {loss} in epoch {epoch}")]
    NonFinite { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Independent deterministic streams derived from one seed: weight init,
/// epoch shuffling and dropout masks never perturb each other.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SAMPLING: u64 = 3;
}

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Decoupled weight decay.
    Adamw,
    /// Weight decay, if any, added to the gradient.
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Scheduler {
    None,
    Steplr { step: usize, gamma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub scheduler: Scheduler,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// AdamW, lr 1e-3, weight decay 1e-5, batch 16, 20 epochs, StepLR(3, 0.8).
    pub fn mamba2() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 20,
            scheduler: Scheduler::Steplr { step: 3, gamma: 0.8 },
            early_stop_patience: 5,
            seed: 0,
        }
    }

    /// Adam, lr 1e-3, batch 16, 400 epochs, no scheduler.
    pub fn cnn_lstm() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            epochs: 400,
            scheduler: Scheduler::None,
            ..Self::mamba2()
        }
    }

    /// Unpublished recipe; Adam, lr 1e-3, batch 16, 50 epochs.
    pub fn baseline() -> Self {
        Self {
            epochs: 50,
            ..Self::cnn_lstm()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return bad("weight_decay must be >= 0 and adam_eps > 0");
        }
        if let Scheduler::Steplr { step, gamma } = self.scheduler {
            if step == 0 || gamma <= 0.0 {
                return bad("steplr needs step >= 1 and gamma > 0");
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.scheduler {
            Scheduler::None => self.lr,
            Scheduler::Steplr { step, gamma } => step_lr(self.lr, epoch, step, gamma),
        }
    }
}

/// `base * gamma^floor(epoch / step)`.
pub fn step_lr(base: f64, epoch: usize, step: usize, gamma: f64) -> f64 {
    base * gamma.powi((epoch / step.max(1)) as i32)
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

fn adam_update(params: &mut [Tensor], grads: &[Tensor], st: &mut AdamState, h: &AdamHyper, decoupled: bool) {
    st.t += 1;
    let bc1 = 1.0 - h.beta1.powi(st.t as i32);
    let bc2 = 1.0 - h.beta2.powi(st.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut st.m).zip(&mut st.v) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let mut gi = g.data()[i];
            if decoupled {
                p[i] -= h.lr * h.weight_decay * p[i];
            } else {
                gi += h.weight_decay * p[i];
            }
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= h.lr * mh / (vh.sqrt() + h.eps);
        }
    }
}

/// Adam with decoupled weight decay (`p -= lr * wd * p` before the moment step).
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, h: &AdamHyper) {
    adam_update(params, grads, state, h, true);
}

/// Plain Adam; weight decay enters as an L2 term on the gradient.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, h: &AdamHyper) {
    adam_update(params, grads, state, h, false);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Evaluation-mode accuracy on the training set after the epoch.
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Epoch whose weights were kept (highest val accuracy, earliest on ties).
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub epoch: Vec<EpochRecord>,
}

impl History {
    pub fn best(&self) -> &EpochRecord {
        &self.epoch[self.best_epoch]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("history serializes")
    }
}

pub const EVAL_BATCH: usize = 32;

/// Eval-mode class predictions, in sample order.
pub fn predict_samples(model: &Model, samples: &[NormalizedSample]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&NormalizedSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, model.n_views())?;
        out.extend(model.predict(&batch)?);
    }
    Ok(out)
}

pub fn accuracy_on(model: &Model, samples: &[NormalizedSample]) -> Result<f64> {
    let preds = predict_samples(model, samples)?;
    let hits = preds.iter().zip(samples).filter(|(p, s)| **p == s.label.code()).count();
    Ok(hits as f64 / samples.len().max(1) as f64)
}

/// Optimizer state and the two training-time random streams for one model.
pub struct Trainer {
    pub config: TrainConfig,
    state: AdamState,
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &Model, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            state: AdamState::new(model.store.values()),
            shuffle: rng_stream(config.seed, streams::SHUFFLE),
            dropout: rng_stream(config.seed, streams::DROPOUT),
        })
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
            weight_decay: self.config.weight_decay,
        }
    }

    /// One optimizer step on `batch`; returns the batch loss. Diverged
    /// weights report a NaN loss rather than tripping input checks deeper
    /// in the forward pass.
    pub fn step(&mut self, model: &mut Model, batch: &Batch, targets: &[usize], lr: f64) -> Result<f64> {
        if !model.store.values().iter().all(Tensor::all_finite) {
            return Ok(f64::NAN);
        }
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, batch, Mode::Train(&mut self.dropout))?;
        let loss = tape.cross_entropy(out.logits, targets)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Ok(value);
        }
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        let h = self.hyper(lr);
        match self.config.optimizer {
            OptimizerKind::Adamw => adamw_step(model.store.values_mut(), &grads, &mut self.state, &h),
            OptimizerKind::Adam => adam_step(model.store.values_mut(), &grads, &mut self.state, &h),
        }
        model.apply_running(&out.running);
        Ok(value)
    }

    /// A shuffled pass over `train`; returns the sample-weighted mean loss.
    pub fn epoch(&mut self, model: &mut Model, train: &[NormalizedSample], epoch: usize) -> Result<f64> {
        if train.is_empty() {
            return Err(TrainError::EmptyTrain);
        }
        let lr = self.config.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let refs: Vec<&NormalizedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let targets: Vec<usize> = refs.iter().map(|s| s.label.code()).collect();
            let batch = Batch::from_samples(&refs, model.n_views())?;
            let loss = self.step(model, &batch, &targets, lr)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, loss });
            }
            total += loss * chunk.len() as f64;
        }
        Ok(total / train.len() as f64)
    }
}

/// Trains with per-epoch validation, early stopping and best-weight
/// restoration. On return `model` holds the weights of `History::best_epoch`.
pub fn fit(model: &mut Model, train: &[NormalizedSample], val: &[NormalizedSample], config: &TrainConfig) -> Result<History> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if val.is_empty() {
        return Err(TrainError::EmptyVal);
    }
    let mut trainer = Trainer::new(model, config)?;
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stopped_early = false;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let train_loss = trainer.epoch(model, train, epoch)?;
        let train_acc = accuracy_on(model, train)?;
        let val_acc = accuracy_on(model, val)?;
        log::info!("epoch {epoch}: lr {lr:.3e} loss {train_loss:.4} train {train_acc:.4} val {val_acc:.4}");
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            train_acc,
            val_acc,
        });
        if best.as_ref().map_or(true, |(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, model.store.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if config.early_stop_patience > 0 && epoch - best_epoch >= config.early_stop_patience {
            stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }
    let Some((best_epoch, _, store)) = best else {
        return Err(TrainError::Config("epochs must be at least 1".into()));
    };
    model.store = store;
    Ok(History {
        best_epoch,
        stopped_early,
        epoch: records,
    })
}

/// Runs epochs until every training sample is classified correctly; returns
/// the number of epochs that took, or `None` if `max_epochs` was not enough.
pub fn fit_until_memorized(model: &mut Model, train: &[NormalizedSample], config: &TrainConfig, max_epochs: usize) -> Result<Option<usize>> {
    let mut trainer = Trainer::new(model, config)?;
    for epoch in 0..max_epochs {
        trainer.epoch(model, train, epoch)?;
        let preds = predict_samples(model, train)?;
        if preds.iter().zip(train).all(|(p, s)| *p == s.label.code()) {
            return Ok(Some(epoch + 1));
        }
    }
    Ok(None)
}

/// Eval-mode mean cross-entropy of `samples`.
pub fn eval_loss(model: &Model, samples: &[NormalizedSample]) -> Result<f64> {
    let refs: Vec<&NormalizedSample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, model.n_views())?;
    let targets: Vec<usize> = samples.iter().map(|s| s.label.code()).collect();
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, &batch, Mode::Eval)?;
    let loss = tape.cross_entropy(out.logits, &targets)?;
    Ok(tape.value(loss).data()[0])
}
