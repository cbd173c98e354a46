//! Optimization loop, schedule and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{
    config_fingerprint, load_checkpoint, load_checkpoint_checked, read_checkpoint,
    save_checkpoint, write_checkpoint, Checkpoint,
};
pub use optim::{warmup_lr, AdamW};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{video_loss, LossBreakdown, LossWeights, VideoTargets};
use crate::model::{forward, init_model, ForwardGraph, ModelConfig, Parameters};
use crate::rng::rng_indexed;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            warmup_steps: 200,
            epochs: 50,
            batch_size: 32,
            weight_decay: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {}", self.weight_decay)));
        }
        self.weights.validate()
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample<S> {
    pub id: String,
    pub frames: Matrix<S>,
    pub mhi: Option<Matrix<S>>,
    pub targets: VideoTargets,
}

impl<S: Scalar> Sample<S> {
    /// The first `len` frames of the example.
    pub fn truncated(&self, len: usize) -> Result<Sample<S>> {
        let t = self.frames.rows();
        if len == 0 || len > t {
            return Err(Error::Config(format!("cannot truncate {t} frames to {len}")));
        }
        let cut = |m: &Matrix<S>| Matrix::from_fn(len, m.cols(), |r, c| m[(r, c)]);
        Ok(Sample {
            id: self.id.clone(),
            frames: cut(&self.frames),
            mhi: self.mhi.as_ref().map(cut),
            targets: VideoTargets::new(self.targets.labels[..len].to_vec(), self.targets.transfer)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub val_accuracy: f64,
    pub val_frame_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Mean losses and accuracies of a model on a set of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub accuracy: f64,
    pub frame_accuracy: f64,
}

pub struct TrainOutcome<S> {
    pub best: Checkpoint<S>,
    pub last: Checkpoint<S>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

fn run_forward<S: Scalar>(
    params: &Parameters<S>,
    cfg: &ModelConfig,
    sample: &Sample<S>,
) -> Result<ForwardGraph<S>> {
    forward(params, cfg, &sample.frames, sample.mhi.as_ref())
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss, transferability accuracy and frame accuracy from the final block.
pub fn evaluate<S: Scalar>(
    params: &Parameters<S>,
    cfg: &ModelConfig,
    weights: &LossWeights,
    samples: &[Sample<S>],
) -> Result<Evaluation> {
    let mut losses = Vec::with_capacity(samples.len());
    let mut correct = 0usize;
    let mut frames_correct = 0usize;
    let mut frames_total = 0usize;
    for s in samples {
        let mut g = run_forward(params, cfg, s)?;
        let (_, b, _) = video_loss(&mut g, &s.targets, weights)?;
        losses.push(b);
        let last = *g.last();
        let trans = g.tape.value(last.trans_probs);
        correct += usize::from(argmax(trans.row(0)) == s.targets.transfer.index());
        let fp = g.tape.value(last.frame_probs);
        for (t, l) in s.targets.labels.iter().enumerate() {
            frames_correct += usize::from(argmax(fp.row(t)) == l.index());
        }
        frames_total += s.targets.labels.len();
    }
    let n = samples.len().max(1) as f64;
    Ok(Evaluation {
        loss: LossBreakdown::mean(&losses),
        accuracy: correct as f64 / n,
        frame_accuracy: frames_correct as f64 / frames_total.max(1) as f64,
    })
}

/// Mutable state of a run between epochs.
pub struct Trainer<S> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: Parameters<S>,
    pub optimizer: AdamW<S>,
    /// Completed epochs.
    pub epoch: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_model::<S>(&model, config.seed)?;
        let optimizer = AdamW::new(&params, config.weight_decay);
        Ok(Trainer {
            model,
            config,
            params,
            optimizer,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint<S>) -> Result<Self> {
        ck.train.validate()?;
        ck.params.check_config(&ck.model)?;
        Ok(Trainer {
            model: ck.model.clone(),
            config: ck.train.clone(),
            params: ck.params.clone(),
            optimizer: ck.optimizer.clone(),
            epoch: ck.epoch,
        })
    }

    pub fn checkpoint(&self, val_loss: f64) -> Checkpoint<S> {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            val_loss,
        }
    }

    /// Visiting order of the training set in a given epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_indexed(self.config.seed, "shuffle", epoch as u64));
        order
    }

    /// One optimizer step on a batch; returns the batch-mean breakdown.
    pub fn step(&mut self, batch: &[&Sample<S>], batch_id: &str) -> Result<LossBreakdown> {
        let mut grads: Vec<Matrix<S>> = self
            .params
            .values()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        let k = S::one() / S::of_usize(batch.len());
        let mut losses = Vec::with_capacity(batch.len());
        for s in batch {
            let mut g = run_forward(&self.params, &self.model, s)?;
            let (root, b, _) = video_loss(&mut g, &s.targets, &self.config.weights)?;
            if !b.total.is_finite() {
                return Err(nan_error(batch_id, batch, &b));
            }
            let mut gr = g.tape.backward(root)?;
            for (acc, &v) in grads.iter_mut().zip(&g.param_vars) {
                if let Some(mut d) = gr.take(v) {
                    d.scale_assign(k);
                    acc.add_assign(&d);
                }
            }
            losses.push(b);
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(nan_error(batch_id, batch, &LossBreakdown::mean(&losses)));
        }
        let lr = warmup_lr(self.optimizer.step + 1, &self.config);
        self.optimizer.update(&mut self.params, &grads, lr);
        if !self.params.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameters after batch {batch_id}"
            )));
        }
        Ok(LossBreakdown::mean(&losses))
    }

    /// Trains one epoch and returns per-step records.
    pub fn run_epoch(&mut self, train: &[Sample<S>]) -> Result<Vec<StepRecord>> {
        if train.is_empty() {
            return Err(Error::InsufficientInput("empty training set".into()));
        }
        let epoch = self.epoch + 1;
        let order = self.epoch_order(epoch, train.len());
        let mut records = Vec::new();
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Sample<S>> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = self.step(&batch, &format!("epoch {epoch} batch {b}"))?;
            records.push(StepRecord {
                step: self.optimizer.step,
                loss,
            });
        }
        self.epoch = epoch;
        Ok(records)
    }

    /// Continues until `config.epochs`, keeping the lowest-validation-loss
    /// state as `best`.
    pub fn run(mut self, train: &[Sample<S>], val: &[Sample<S>]) -> Result<TrainOutcome<S>> {
        let mut history = Vec::new();
        let mut steps = Vec::new();
        let mut best: Option<Checkpoint<S>> = None;
        let mut last_val = f64::INFINITY;
        while self.epoch < self.config.epochs {
            let recs = self.run_epoch(train)?;
            let train_loss = LossBreakdown::mean(&recs.iter().map(|r| r.loss).collect::<Vec<_>>());
            steps.extend(recs);
            let ev = evaluate(&self.params, &self.model, &self.config.weights, val)?;
            last_val = ev.loss.total;
            log::info!(
                "epoch {} train {:.4} val {:.4} acc {:.3} frame-acc {:.3}",
                self.epoch,
                train_loss.total,
                ev.loss.total,
                ev.accuracy,
                ev.frame_accuracy
            );
            history.push(EpochRecord {
                epoch: self.epoch,
                train: train_loss,
                val: ev.loss,
                val_accuracy: ev.accuracy,
                val_frame_accuracy: ev.frame_accuracy,
            });
            if best.as_ref().map_or(true, |b| ev.loss.total < b.val_loss) {
                best = Some(self.checkpoint(ev.loss.total));
            }
        }
        let last = self.checkpoint(last_val);
        let best = best.unwrap_or_else(|| last.clone());
        Ok(TrainOutcome {
            best,
            last,
            history,
            steps,
        })
    }
}

fn nan_error<S: Scalar>(batch_id: &str, batch: &[&Sample<S>], b: &LossBreakdown) -> Error {
    let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
    Error::Numeric(format!(
        "non-finite loss in {batch_id} (videos {}): {:?}",
        ids.join(","),
        b
    ))
}

/// Trains from scratch.
pub fn train<S: Scalar>(
    model: &ModelConfig,
    config: &TrainConfig,
    train: &[Sample<S>],
    val: &[Sample<S>],
) -> Result<TrainOutcome<S>> {
    Trainer::new(model.clone(), config.clone())?.run(train, val)
}
