//! Optimization loop: one randomly placed window per training record per
//! epoch, mini-batches of windows, AdamW with a per-step cosine schedule,
//! validation vote-F1 after every epoch and best/final checkpoints.
//!
//! The trainer is addressed by optimizer step: everything a step needs
//! (epoch order, window draws, dropout streams) is derived from the seed and
//! the step index, so a run resumed from a checkpoint continues the same
//! trajectory.

mod checkpoint;
mod gradcheck;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, toy_batch, toy_model_config, toy_modalities, GradCheckConfig, GradCheckReport, GroupReport};
pub use optim::{cosine_lr, AdamW};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::datamodel::{DatasetManifest, ModalityDescriptor, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_records, summarize, EvalConfig};
use crate::model::{GradientOptions, Model, ModelConfig};
use crate::params::ParamStore;
use crate::rng::{derive_seed, derived_rng};
use crate::windowing::{check_fits, sample_training_window, Window};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub window_seconds: f64,
    pub seed: u64,
    pub presence_threshold: f64,
    pub gate_modality: Option<String>,
    pub class_weighting: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            epochs: 200,
            batch_size: 8,
            optimizer: AdamW::default(),
            window_seconds: 9.0,
            seed: 0,
            presence_threshold: 0.5,
            gate_modality: None,
            class_weighting: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.window_seconds > 0.0 && self.window_seconds.is_finite()) {
            return Err(Error::Config(format!("window_seconds {} must be positive", self.window_seconds)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.base_lr)));
        }
        if !(0.0..=1.0).contains(&self.presence_threshold) {
            return Err(Error::Config(format!("presence threshold {} outside [0, 1]", self.presence_threshold)));
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            window_seconds: self.window_seconds,
            presence_threshold: self.presence_threshold,
            gate_modality: self.gate_modality.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Zero-based epoch the step belongs to.
    pub epoch: usize,
    /// Zero-based optimizer step.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_f1: Option<f64>,
}

pub fn history_text(epochs: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\tstep\tlr\ttrain_loss\tval_f1\n");
    for e in epochs {
        let val = e.val_f1.map_or_else(|| "-".to_string(), |v| v.to_string());
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", e.epoch, e.step, e.lr, e.train_loss, val);
    }
    out
}

pub fn write_history(epochs: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_text(epochs)).map_err(|e| Error::io(path, e))
}

/// Records long enough for one window, warning about the rest.
fn usable_records<'a>(records: &'a [VideoRecord], window_seconds: f64, what: &str) -> Result<Vec<&'a VideoRecord>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match check_fits(r, window_seconds) {
            Ok(_) => out.push(r),
            Err(Error::TooShort { span_seconds, .. }) => {
                log::warn!("skipping {what} record {}: {span_seconds:.2}s is shorter than one window", r.id)
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Inverse-frequency weights `N / (2 N_c)`; a missing class gets weight 0.
pub fn class_weights(labels: &[u8]) -> [f64; 2] {
    let n = labels.len() as f64;
    let ones = labels.iter().filter(|&&l| l == 1).count() as f64;
    let w = |count: f64| if count == 0.0 { 0.0 } else { n / (2.0 * count) };
    [w(n - ones), w(ones)]
}

pub struct Trainer<'a> {
    config: TrainConfig,
    model: Model,
    m: ParamStore,
    v: ParamStore,
    step: u64,
    train: Vec<&'a VideoRecord>,
    val: &'a [VideoRecord],
    steps_per_epoch: u64,
    class_weights: Option<[f64; 2]>,
    steps: Vec<StepRecord>,
    epochs: Vec<EpochRecord>,
    epoch_losses: Vec<f64>,
    best: Option<(f64, Checkpoint)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        train: &'a [VideoRecord],
        val: &'a [VideoRecord],
        modalities: Vec<ModalityDescriptor>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        for r in train.iter().chain(val) {
            if r.split == Split::Test {
                return Err(Error::Contract(format!("test record {} passed to the trainer", r.id)));
            }
        }
        if let Some(gate) = &config.gate_modality {
            if !modalities.iter().any(|m| &m.name == gate) {
                return Err(Error::Config(format!("gate modality {gate:?} is not configured")));
            }
        }
        let usable = usable_records(train, config.window_seconds, "training")?;
        if usable.is_empty() {
            return Err(Error::Dataset("no training record is long enough for one window".into()));
        }
        let labels: Vec<u8> = usable.iter().map(|r| r.label).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            log::warn!("all training records have label {}", labels[0]);
        }
        let model = Model::new(modalities, config.model.clone(), config.seed)?;
        let steps_per_epoch = usable.len().div_ceil(config.batch_size) as u64;
        Ok(Self {
            class_weights: config.class_weighting.then(|| class_weights(&labels)),
            m: model.params.zeros_like(),
            v: model.params.zeros_like(),
            model,
            step: 0,
            train: usable,
            val,
            steps_per_epoch,
            config,
            steps: Vec::new(),
            epochs: Vec::new(),
            epoch_losses: Vec::new(),
            best: None,
        })
    }

    /// Continues from a checkpoint written by a trainer with the same
    /// configuration and data.
    pub fn resume(
        train: &'a [VideoRecord],
        val: &'a [VideoRecord],
        modalities: Vec<ModalityDescriptor>,
        config: TrainConfig,
        checkpoint: &Checkpoint,
    ) -> Result<Self> {
        let mut trainer = Self::new(train, val, modalities, config)?;
        checkpoint.restore_into(&mut trainer.model)?;
        trainer.model.params.check_layout(&checkpoint.m, "first moments")?;
        trainer.model.params.check_layout(&checkpoint.v, "second moments")?;
        if checkpoint.step > trainer.total_steps() {
            return Err(Error::Config(format!(
                "checkpoint step {} beyond the schedule of {} steps",
                checkpoint.step,
                trainer.total_steps()
            )));
        }
        trainer.m = checkpoint.m.clone();
        trainer.v = checkpoint.v.clone();
        trainer.step = checkpoint.step;
        Ok(trainer)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.config.epochs as u64
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn step_history(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.epochs
    }

    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_ref().map(|(_, c)| c)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.step, self.m.clone(), self.v.clone())
    }

    /// Record order for an epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut derived_rng(self.config.seed, &["shuffle".into(), epoch.into()]));
        order
    }

    /// The training window drawn for `record` in `epoch`.
    pub fn draw_window(&self, record: &VideoRecord, epoch: usize) -> Result<Window> {
        let mut rng = derived_rng(self.config.seed, &["window".into(), record.id.as_str().into(), epoch.into()]);
        let sampled = sample_training_window(
            record,
            self.config.window_seconds,
            self.config.presence_threshold,
            self.config.gate_modality.as_deref(),
            &mut rng,
        )?;
        if sampled.below_threshold {
            log::debug!(
                "record {} epoch {epoch}: best window keeps gate presence {:.3}",
                record.id,
                sampled.gate_ratio.unwrap_or(0.0)
            );
        }
        Ok(sampled.window)
    }

    /// One optimizer step; finishes the epoch bookkeeping at epoch ends.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        if self.is_finished() {
            return Err(Error::Contract("training schedule already complete".into()));
        }
        let epoch = (self.step / self.steps_per_epoch) as usize;
        let batch_index = (self.step % self.steps_per_epoch) as usize;
        let order = self.epoch_order(epoch);
        let bs = self.config.batch_size;
        let members = &order[batch_index * bs..((batch_index + 1) * bs).min(order.len())];
        let mut windows = Vec::with_capacity(members.len());
        let mut seeds = Vec::with_capacity(members.len());
        for &i in members {
            let record = self.train[i];
            let window = self.draw_window(record, epoch)?;
            if window.present_frames() == 0 {
                log::warn!("record {} epoch {epoch}: window has no present frame, left out", record.id);
                continue;
            }
            windows.push(window);
            seeds.push(derive_seed(self.config.seed, &["dropout".into(), record.id.as_str().into(), epoch.into()]));
        }
        let lr = cosine_lr(self.step, self.total_steps(), self.config.base_lr)?;
        let loss = if windows.is_empty() {
            f64::NAN
        } else {
            let refs: Vec<&Window> = windows.iter().collect();
            let opts = GradientOptions { class_weights: self.class_weights, dropout_seeds: Some(seeds) };
            let out = self.model.compute_gradients(&refs, &opts)?;
            self.config
                .optimizer
                .step(&mut self.model.params, &out.grads, &mut self.m, &mut self.v, self.step + 1, lr)?;
            self.model.params.round_to_f32();
            self.m.round_to_f32();
            self.v.round_to_f32();
            self.model.update_running_stats(&out.stats);
            out.loss
        };
        let record = StepRecord { epoch, step: self.step, lr, loss };
        self.steps.push(record);
        if loss.is_finite() {
            self.epoch_losses.push(loss);
        }
        self.step += 1;
        if self.step.is_multiple_of(self.steps_per_epoch) {
            self.finish_epoch(epoch, lr)?;
        }
        Ok(record)
    }

    fn finish_epoch(&mut self, epoch: usize, lr: f64) -> Result<()> {
        let train_loss = if self.epoch_losses.is_empty() {
            f64::NAN
        } else {
            self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len() as f64
        };
        self.epoch_losses.clear();
        let val_f1 = if self.val.is_empty() {
            None
        } else {
            let results = evaluate_records(self.val, &self.model, &self.config.eval_config())?;
            Some(summarize(&results, None)?.f1)
        };
        let record = EpochRecord { epoch: epoch + 1, step: self.step, lr, train_loss, val_f1 };
        log::info!(
            "epoch {} step {} lr {:.3e} loss {:.4} val_f1 {}",
            record.epoch,
            record.step,
            lr,
            train_loss,
            val_f1.map_or("-".into(), |v| format!("{v:.4}"))
        );
        if let Some(f1) = val_f1 {
            // Ties go to the later epoch: small validation splits saturate
            // early, and the later model has trained longer.
            if self.best.as_ref().is_none_or(|(b, _)| f1 >= *b) {
                self.best = Some((f1, self.checkpoint()));
            }
        }
        self.epochs.push(record);
        Ok(())
    }

    /// Runs to the end of the schedule.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.train_step()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub final_checkpoint: Checkpoint,
    /// Best validation vote-F1 checkpoint; `None` without validation data.
    pub best_checkpoint: Option<Checkpoint>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// Trains on the train split, validating on the val split. Test records are
/// never loaded.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainOutcome> {
    let train = manifest.load_split(Split::Train)?;
    let val = manifest.load_split(Split::Val)?;
    train_records(&train, &val, manifest.modality_config.clone(), config)
}

pub fn train_records(
    train: &[VideoRecord],
    val: &[VideoRecord],
    modalities: Vec<ModalityDescriptor>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(train, val, modalities, config.clone())?;
    trainer.run()?;
    let final_checkpoint = trainer.checkpoint();
    let best_checkpoint = trainer.best_checkpoint().cloned();
    let epochs = trainer.history().to_vec();
    let steps = trainer.step_history().to_vec();
    Ok(TrainOutcome { model: trainer.into_model(), final_checkpoint, best_checkpoint, epochs, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_frequency_weights() {
        assert_eq!(class_weights(&[0, 0, 0, 1]), [4.0 / 6.0, 2.0]);
        assert_eq!(class_weights(&[0, 1]), [1.0, 1.0]);
        assert_eq!(class_weights(&[1, 1]), [0.0, 0.5]);
    }

    #[test]
    fn history_format() {
        let e = EpochRecord { epoch: 1, step: 3, lr: 0.5, train_loss: 0.25, val_f1: None };
        assert_eq!(history_text(&[e]), "epoch\tstep\tlr\ttrain_loss\tval_f1\n1\t3\t0.5\t0.25\t-\n");
    }
}
