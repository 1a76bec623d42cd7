//! Toy-scale training on synthetic images, evaluation, a small convolutional
//! baseline and the module ablation lattice.

mod ablation;
mod baseline;
mod data;

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ablation::{ablation_lattice, ablation_suite, AblationRow};
pub use baseline::ConvBaseline;
pub use data::{GeneratorKind, Samples, SynthDataset};

use crate::blocks::{argmax_rows, Model, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{ops, Backend, BnStats, Eager, GradTape, Tensor};

/// Batch-norm running-statistic momentum used during training.
pub const BN_MOMENTUM: f64 = 0.1;

/// A network the trainer can fit.
pub trait Trainable {
    fn logits<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value>;
    fn params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor));
    fn apply_bn_stats(&mut self, stats: &[BnStats], momentum: f64) -> Result<()>;
}

impl Trainable for Model {
    fn logits<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        self.forward(b, x)
    }

    fn params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.for_each_param_mut(f)
    }

    fn apply_bn_stats(&mut self, stats: &[BnStats], momentum: f64) -> Result<()> {
        Model::apply_bn_stats(self, stats, momentum)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    SgdMomentum { momentum: f64 },
    /// Adam moments with decoupled weight decay.
    AdamWLite { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::SgdMomentum { momentum: 0.9 }
    }

    pub fn adamw() -> Self {
        Optimizer::AdamWLite {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::SgdMomentum { .. } => "sgd-momentum",
            Optimizer::AdamWLite { .. } => "adamw-lite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" => Ok(Self::sgd()),
            "adamw-lite" => Ok(Self::adamw()),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}`; expected sgd-momentum or adamw-lite"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup_steps: usize,
    /// Applied to convolution weights only.
    pub weight_decay: f64,
    pub seed: u64,
    /// Steps per history point.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            optimizer: Optimizer::adamw(),
            lr: 2e-3,
            warmup_steps: 50,
            weight_decay: 1e-4,
            seed: 0,
            eval_interval: 50,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is allowed and leaves every weight untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup of {} steps exceeds the {} training steps",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch size and eval interval must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay {} is negative", self.weight_decay)));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        0.5 * self.lr * (1.0 + (PI * t.min(1.0)).cos())
    }
}

/// Mean training loss and accuracy over one eval interval.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryPoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Default)]
struct OptState {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

fn update(
    state: &mut OptState,
    opt: Optimizer,
    path: &str,
    kind: ParamKind,
    w: &mut Tensor,
    g: &Tensor,
    lr: f64,
    wd: f64,
    t: usize,
) {
    let n = w.numel();
    let wd = if kind == ParamKind::Weight { wd } else { 0.0 };
    let m = state.m.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
    let data = w.data_mut();
    match opt {
        Optimizer::SgdMomentum { momentum } => {
            for ((x, &gi), mi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()) {
                let x64 = *x as f64;
                *mi = momentum * *mi + gi as f64 + wd * x64;
                *x = (x64 - lr * *mi) as f32;
            }
        }
        Optimizer::AdamWLite { beta1, beta2, eps } => {
            let v = state.v.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
            let c1 = 1.0 - beta1.powi(t as i32);
            let c2 = 1.0 - beta2.powi(t as i32);
            for (((x, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g64 = gi as f64;
                *mi = beta1 * *mi + (1.0 - beta1) * g64;
                *vi = beta2 * *vi + (1.0 - beta2) * g64 * g64;
                let x64 = *x as f64;
                *x = (x64 - lr * ((*mi / c1) / ((*vi / c2).sqrt() + eps) + wd * x64)) as f32;
            }
        }
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

/// Fits `model` on `data` and returns the loss/accuracy history.
///
/// Batches are drawn from a seeded reshuffle per epoch; the whole run is a
/// pure function of the model, the data and `config`. Batch norm uses batch
/// statistics and folds them into running statistics with
/// [`BN_MOMENTUM`]. A non-finite loss aborts with [`Error::Diverged`].
pub fn train<M: Trainable>(model: &mut M, data: &Samples, config: &TrainConfig) -> Result<Vec<HistoryPoint>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut state = OptState::default();
    let mut history = Vec::new();
    let (mut loss_sum, mut correct, mut seen, mut batches) = (0f64, 0usize, 0usize, 0usize);
    for step in 0..config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (x, labels) = data.batch(&idx)?;

        let mut tape = GradTape::<f32>::new(true);
        let xv = tape.leaf(x, false);
        let logits = model.logits(&mut tape, &xv).map_err(|e| diverged(step, e))?;
        let loss = tape.cross_entropy(&logits, &labels).map_err(|e| diverged(step, e))?;
        let loss_value = tape.value(&loss)?.data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, loss: loss_value });
        }
        let preds = argmax_rows(tape.value(&logits)?);
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        seen += labels.len();
        loss_sum += loss_value;
        batches += 1;

        let grads = tape.backward(&loss)?;
        let lr = config.lr_at(step);
        let mut missing = None;
        if lr > 0.0 {
            model.params_mut(&mut |path, kind, w| {
                if !kind.is_trainable() {
                    return;
                }
                match grads.by_name(path) {
                    Some(g) => update(&mut state, config.optimizer, path, kind, w, g, lr, config.weight_decay, step + 1),
                    None => missing = Some(path.to_string()),
                }
            });
        }
        if let Some(p) = missing {
            return Err(Error::MissingParam(p));
        }
        model.apply_bn_stats(tape.bn_stats(), BN_MOMENTUM)?;

        if (step + 1) % config.eval_interval == 0 || step + 1 == config.steps {
            history.push(HistoryPoint {
                step: step + 1,
                loss: loss_sum / batches as f64,
                accuracy: correct as f64 / seen as f64,
            });
            (loss_sum, correct, seen, batches) = (0.0, 0, 0, 0);
        }
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

/// Fraction of rows of `(N, K, 1, 1)` logits whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let preds = argmax_rows(logits);
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

/// Inference-mode accuracy and mean loss over all of `data`.
pub fn evaluate<M: Trainable>(model: &M, data: &Samples) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    const CHUNK: usize = 64;
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss = 0f64;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(CHUNK) {
        let (x, labels) = data.batch(idx)?;
        let logits = model.logits(&mut Eager::<f32>::inference(), &x)?;
        loss += ops::cross_entropy(&logits, &labels)?.0 * labels.len() as f64;
        predictions.extend(argmax_rows(&logits));
    }
    let correct = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
        predictions,
    })
}

/// Fraction of positions where two prediction lists agree.
pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() || a.len() != b.len() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

#[cfg(test)]
mod tests;
