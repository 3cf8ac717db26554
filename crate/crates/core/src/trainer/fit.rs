use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;

use crate::model::{Model, Task};
use crate::nn::{ForwardCtx, GradStore, Tape};
use crate::objectives::{
    combined_depth_loss_on, nll_label_smoothing_on, DepthLossConfig, LABEL_SMOOTHING,
};

use super::augment::{augment_stream, augment_windows, AugmentConfig};
use super::data::{ClfDataset, DepthDataset};
use super::eval::{evaluate_clf, evaluate_depth};
use super::optim::{clip_gradients, AdamW, AdamWConfig};
use super::{keyed_rng, save_checkpoint, TrainError, TAG_AUGMENT, TAG_DROPOUT, TAG_SHUFFLE};

/// Learning rate of the default training configuration (batch 8).
/// Level weight the trainer puts on the mean log-depth residual. With 0.5
/// the depth loss equals `(1/n)ΣR² − (1/2n²)(ΣR)²`.
pub const DEPTH_LEVEL_WEIGHT: f64 = 0.5;

pub const SMALL_BATCH_LR: f64 = 3e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to [`AdamWConfig::default`] with the learning rate lowered
    /// to [`SMALL_BATCH_LR`] for the small default batch.
    pub optimizer: AdamWConfig,
    /// Global L2 clip norm.
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub depth_loss: DepthLossConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Where to write a checkpoint if training diverges.
    pub dump_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: SMALL_BATCH_LR,
                ..AdamWConfig::default()
            },
            clip_norm: 1.0,
            label_smoothing: LABEL_SMOOTHING,
            depth_loss: DepthLossConfig {
                level_weight: DEPTH_LEVEL_WEIGHT,
                ..DepthLossConfig::default()
            },
            augment: AugmentConfig::default(),
            seed: 0,
            dump_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.depth_loss.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config(format!(
                "clip norm {} must be positive",
                self.clip_norm
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainError::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Metrics at the end of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: u64,
    /// Mean training loss over the epoch's steps run in this call.
    pub train_loss: f64,
    /// Validation accuracy (classification) or mean absolute error in
    /// meters over all valid pixels (depth).
    pub val_metric: Option<f64>,
}

/// CSV with header `epoch,step,train_loss,<metric>`.
pub fn history_csv(records: &[EpochRecord], metric: &str) -> String {
    let mut s = format!("epoch,step,train_loss,{metric}\n");
    for r in records {
        let v = r.val_metric.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.step, r.train_loss, v);
    }
    s
}

/// A model together with its optimizer state.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
}

impl Trainer {
    /// Fresh optimizer state over every parameter, positional table included.
    pub fn new(model: Model, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let optimizer = AdamW::new(&model.params, config.optimizer);
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    /// Resumes from a restored optimizer state.
    pub fn with_optimizer(
        model: Model,
        optimizer: AdamW,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if optimizer.m.len() != model.params.len() {
            return Err(TrainError::Config(
                "optimizer state does not match the model".into(),
            ));
        }
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    /// Sample indices of global step `step` for a dataset of `n` examples.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch(n).max(1);
        let epoch = step / spe;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut keyed_rng(self.config.seed, TAG_SHUFFLE, epoch, 0));
        let lo = (step % spe) as usize * self.config.batch_size;
        perm[lo..(lo + self.config.batch_size).min(n)].to_vec()
    }

    fn apply(&mut self, mut grads: GradStore, loss: f64) -> Result<f64, TrainError> {
        if !loss.is_finite() {
            return self.diverged(loss);
        }
        clip_gradients(&mut grads, self.config.clip_norm);
        if let Err(e) = self.optimizer.update(&mut self.model.params, &grads) {
            self.dump();
            return Err(e);
        }
        Ok(loss)
    }

    fn dump(&self) {
        if let Some(p) = &self.config.dump_path {
            let _ = save_checkpoint(p, &self.model, Some(&self.optimizer));
        }
    }

    fn diverged(&self, loss: f64) -> Result<f64, TrainError> {
        self.dump();
        Err(TrainError::Diverged {
            step: self.optimizer.step,
            loss,
        })
    }

    fn ctx(&self, key: u64) -> ForwardCtx {
        let rng = keyed_rng(self.config.seed, TAG_DROPOUT, self.optimizer.step, key);
        ForwardCtx::training(self.config.augment.dropout, rng)
    }

    /// One optimizer step on the given classification examples; returns
    /// the mean loss over all augmented copies.
    pub fn clf_step(&mut self, data: &ClfDataset, indices: &[usize]) -> Result<f64, TrainError> {
        if !matches!(self.model.config.task, Task::Classification { .. }) {
            return Err(crate::model::ModelError::WrongTask(
                "classification training",
                "classification",
            )
            .into());
        }
        let reps = self.config.augment.repetitions;
        let count = (indices.len() * reps) as f64;
        let mut grads = GradStore::zeros_like(&self.model.params);
        let mut total = 0.0;
        for (slot, &i) in indices.iter().enumerate() {
            let ex = &data.examples[i];
            for r in 0..reps {
                let key = (slot * reps + r) as u64;
                let mut rng = keyed_rng(self.config.seed, TAG_AUGMENT, self.optimizer.step, key);
                let windows = augment_stream(
                    &ex.stream,
                    &data.tokenizer,
                    (data.t_start, data.t_stop),
                    false,
                    &self.config.augment,
                    &mut rng,
                )?;
                let mut ctx = self.ctx(key);
                let mut tape = Tape::new(&self.model.params);
                let logits = self.model.forward_clf(&mut tape, &mut ctx, &windows)?;
                let loss = nll_label_smoothing_on(
                    &mut tape,
                    logits,
                    ex.label,
                    self.config.label_smoothing,
                )?;
                total += tape.value(loss).data()[0];
                let scaled = tape.scale(loss, 1.0 / count);
                tape.backward_into(scaled, &mut grads);
            }
        }
        self.apply(grads, total / count)
    }

    /// One optimizer step on the given depth examples.
    pub fn depth_step(
        &mut self,
        data: &DepthDataset,
        indices: &[usize],
    ) -> Result<f64, TrainError> {
        if self.model.config.task != Task::Depth {
            return Err(crate::model::ModelError::WrongTask("depth training", "depth").into());
        }
        let reps = self.config.augment.repetitions;
        let count = (indices.len() * reps) as f64;
        let mut grads = GradStore::zeros_like(&self.model.params);
        let mut total = 0.0;
        for (slot, &i) in indices.iter().enumerate() {
            let ex = &data.examples[i];
            for r in 0..reps {
                let key = (slot * reps + r) as u64;
                let mut rng = keyed_rng(self.config.seed, TAG_AUGMENT, self.optimizer.step, key);
                let windows = augment_windows(&ex.windows, &self.config.augment, &mut rng);
                let mut ctx = self.ctx(key);
                let mut tape = Tape::new(&self.model.params);
                let pred = self.model.forward_depth(&mut tape, &mut ctx, &windows)?;
                let loss = combined_depth_loss_on(
                    &mut tape,
                    pred,
                    &ex.target,
                    &ex.mask,
                    data.height,
                    data.width,
                    &self.config.depth_loss,
                )?;
                total += tape.value(loss).data()[0];
                let scaled = tape.scale(loss, 1.0 / count);
                tape.backward_into(scaled, &mut grads);
            }
        }
        self.apply(grads, total / count)
    }

    fn fit<F>(
        &mut self,
        n: usize,
        mut step: F,
        mut validate: impl FnMut(&Model) -> Result<Option<f64>, TrainError>,
        on_epoch: &mut dyn FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>, TrainError>
    where
        F: FnMut(&mut Self, &[usize]) -> Result<f64, TrainError>,
    {
        if n == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let spe = self.steps_per_epoch(n);
        let total = spe * self.config.epochs as u64;
        let mut history = Vec::new();
        let (mut sum, mut count) = (0.0, 0usize);
        while self.optimizer.step < total {
            let idx = self.batch_indices(n, self.optimizer.step);
            sum += step(self, &idx)?;
            count += 1;
            if self.optimizer.step % spe == 0 {
                let record = EpochRecord {
                    epoch: (self.optimizer.step / spe) as usize,
                    step: self.optimizer.step,
                    train_loss: sum / count as f64,
                    val_metric: validate(&self.model)?,
                };
                on_epoch(&record);
                history.push(record);
                (sum, count) = (0.0, 0);
            }
        }
        Ok(history)
    }

    /// Trains until `config.epochs` epochs worth of steps have been taken
    /// (counting steps already in the optimizer state), reporting
    /// validation accuracy after every epoch.
    pub fn fit_clf(
        &mut self,
        train: &ClfDataset,
        val: Option<&ClfDataset>,
        on_epoch: &mut dyn FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>, TrainError> {
        self.fit(
            train.len(),
            |t, idx| t.clf_step(train, idx),
            |m| {
                val.filter(|v| !v.is_empty())
                    .map(|v| evaluate_clf(m, v))
                    .transpose()
            },
            on_epoch,
        )
    }

    /// Depth counterpart of [`Trainer::fit_clf`]; the validation metric is
    /// the mean absolute error over all valid pixels.
    pub fn fit_depth(
        &mut self,
        train: &DepthDataset,
        val: Option<&DepthDataset>,
        on_epoch: &mut dyn FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>, TrainError> {
        let loss = self.config.depth_loss.clone();
        self.fit(
            train.len(),
            |t, idx| t.depth_step(train, idx),
            |m| {
                Ok(match val {
                    Some(v) if !v.is_empty() => evaluate_depth(m, v, &[f64::INFINITY], &loss)?[0],
                    _ => None,
                })
            },
            on_epoch,
        )
    }
}
