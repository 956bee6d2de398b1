//! Mini-batch training with validation-loss early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tte_engine::{AdamConfig, Mode, ParamStore, Tape, Tensor};

use crate::dataset::accuracy;
use crate::error::{Error, Result};
use crate::models::{Batch, FeatureSource, Model};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    /// Absolute validation-loss improvement required to reset patience.
    pub min_delta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 10,
            min_delta: 0.01,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "max_epochs, patience and batch_size must be at least 1".into(),
            ));
        }
        if !(self.min_delta >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "min_delta {} must be >= 0 and lr {} > 0",
                self.min_delta, self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record the validation loss of `epoch`. Returns whether it became the
    /// new best, and whether training should stop.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> (bool, Decision) {
        let improved = match self.best {
            None => true,
            Some(best) => val_loss < best - self.min_delta,
        };
        if improved {
            self.best = Some(val_loss);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let decision = if self.stale >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        };
        (improved, decision)
    }
}

/// What the epoch loop needs from a training run.
pub trait EpochRunner {
    /// Train one epoch (1-based) and return `(train_loss, val_loss)`.
    fn run_epoch(&mut self, epoch: usize) -> Result<(f64, f64)>;
    fn save_best(&mut self);
    fn restore_best(&mut self) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_val_loss: f64,
}

/// Run epochs until `max_epochs` or until patience runs out, then restore
/// the best weights.
pub fn run_epochs(config: &TrainConfig, runner: &mut dyn EpochRunner) -> Result<EpochHistory> {
    config.validate()?;
    let mut stopper = EarlyStopping::new(config.patience, config.min_delta);
    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut stopped_epoch = config.max_epochs;
    for epoch in 1..=config.max_epochs {
        let (tl, vl) = runner.run_epoch(epoch)?;
        train_loss.push(tl);
        val_loss.push(vl);
        let (improved, decision) = stopper.update(epoch, vl);
        log::debug!("epoch {epoch}: train {tl:.5} val {vl:.5}{}", if improved { " *" } else { "" });
        if improved {
            runner.save_best();
        }
        if decision == Decision::Stop {
            stopped_epoch = epoch;
            break;
        }
    }
    runner.restore_best()?;
    Ok(EpochHistory {
        train_loss,
        val_loss,
        best_epoch: stopper.best_epoch,
        stopped_epoch,
        best_val_loss: stopper.best.unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_val_loss: f64,
    pub test_accuracy: f64,
    pub param_count: usize,
    /// Checksum of the weights used for the test evaluation.
    pub best_checksum: String,
    /// Checksum of the weights at the last trained epoch.
    pub final_checksum: String,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_time_secs: 0.0,
            ..r.clone()
        };
        let (a, b) = (strip(self), strip(other));
        // bitwise comparison of the float fields
        a.train_loss.iter().map(|x| x.to_bits()).eq(b.train_loss.iter().map(|x| x.to_bits()))
            && a.val_loss.iter().map(|x| x.to_bits()).eq(b.val_loss.iter().map(|x| x.to_bits()))
            && a.best_val_loss.to_bits() == b.best_val_loss.to_bits()
            && a.test_accuracy.to_bits() == b.test_accuracy.to_bits()
            && a.best_epoch == b.best_epoch
            && a.stopped_epoch == b.stopped_epoch
            && a.best_checksum == b.best_checksum
            && a.final_checksum == b.final_checksum
            && a.param_count == b.param_count
    }
}

/// Split shuffled indices into batches; a trailing batch of one row is
/// folded into the previous batch so batch norm always sees two rows.
pub fn make_batches(indices: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
        let start = indices.len() - 1 - batches.last().map_or(0, |b| b.len());
        *batches.last_mut().unwrap() = &indices[start..];
    }
    batches
}

/// One optimisation step; returns the batch loss.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    batch: &Batch<f32>,
    labels: &[usize],
    adam: &AdamConfig,
    tape_seed: u64,
) -> Result<f64> {
    let (loss, grads, updates) = {
        let mut tape = Tape::new(store, Mode::Train, tape_seed);
        let logits = model.logits(&mut tape, batch)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let value = f64::from(tape.value(loss).data()[0]);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
        }
        let grads = tape.backward(loss)?;
        (value, grads, tape.take_buffer_updates())
    };
    grads.accumulate_into(store);
    updates.apply(store);
    store.adam_step(adam);
    Ok(loss)
}

/// Eval-mode logits for `rows`, computed in chunks of `batch_size`.
pub fn predict_logits(
    model: &Model,
    store: &ParamStore<f32>,
    source: &FeatureSource<'_>,
    rows: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = source.batch::<f32>(chunk);
        let mut tape = Tape::new(store, Mode::Eval, 0);
        let logits = model.logits(&mut tape, &batch)?;
        let v: &Tensor<f32> = tape.value(logits);
        let c = v.last_dim();
        out.extend(v.data().chunks_exact(c).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Index of the largest logit; ties go to the lowest class id.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    source: &FeatureSource<'_>,
    labels: &[usize],
    rows: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let preds: Vec<usize> = predict_logits(model, store, source, rows, batch_size)?
        .iter()
        .map(|l| argmax(l))
        .collect();
    let truth: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    accuracy(&preds, &truth)
}

/// Sample-averaged eval-mode cross-entropy over `rows`.
pub fn mean_loss(
    model: &Model,
    store: &ParamStore<f32>,
    source: &FeatureSource<'_>,
    labels: &[usize],
    rows: &[usize],
    batch_size: usize,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Invalid("loss over an empty index set".into()));
    }
    let mut total = 0.0;
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = source.batch::<f32>(chunk);
        let y: Vec<usize> = chunk.iter().map(|&r| labels[r]).collect();
        let mut tape = Tape::new(store, Mode::Eval, 0);
        let logits = model.logits(&mut tape, &batch)?;
        let loss = tape.softmax_cross_entropy(logits, &y)?;
        total += f64::from(tape.value(loss).data()[0]) * chunk.len() as f64;
    }
    Ok(total / rows.len() as f64)
}

struct Run<'a, 'b> {
    model: &'a Model,
    store: &'a mut ParamStore<f32>,
    source: &'a FeatureSource<'b>,
    labels: &'a [usize],
    fit: &'a [usize],
    val: &'a [usize],
    config: &'a TrainConfig,
    adam: AdamConfig,
    best: Option<Vec<Tensor<f32>>>,
    final_checksum: Option<String>,
}

impl EpochRunner for Run<'_, '_> {
    fn run_epoch(&mut self, epoch: usize) -> Result<(f64, f64)> {
        let mut order = self.fit.to_vec();
        let shuffle_seed = seeds::derive(self.config.seed, seeds::SHUFFLE ^ epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let mut total = 0.0;
        for (b, rows) in make_batches(&order, self.config.batch_size).into_iter().enumerate() {
            let batch = self.source.batch::<f32>(rows);
            let y: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
            let tape_seed = seeds::derive(shuffle_seed, seeds::DROPOUT ^ b as u64);
            let loss = match train_step(self.model, self.store, &batch, &y, &self.adam, tape_seed) {
                Err(Error::NonFiniteLoss { .. }) => {
                    return Err(Error::NonFiniteLoss { epoch, batch: b + 1 })
                }
                other => other?,
            };
            total += loss * rows.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = mean_loss(self.model, self.store, self.source, self.labels, self.val, self.config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        Ok((train_loss, val_loss))
    }

    fn save_best(&mut self) {
        self.best = Some(self.store.snapshot());
    }

    fn restore_best(&mut self) -> Result<()> {
        self.final_checksum = Some(self.store.checksum());
        if let Some(best) = &self.best {
            self.store.restore(best)?;
        }
        Ok(())
    }
}

/// Train `store` on `fit`, early-stop on `val`, and report accuracy on
/// `test` with the best weights (left in `store`).
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    source: &FeatureSource<'_>,
    labels: &[usize],
    fit: &[usize],
    val: &[usize],
    test: &[usize],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if fit.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Invalid(format!(
            "fit/val/test sizes {}/{}/{} must all be positive",
            fit.len(),
            val.len(),
            test.len()
        )));
    }
    if source.mode() != model.encoder.mode {
        return Err(Error::Config(format!(
            "{} features fed to a {} model",
            source.mode(),
            model.encoder.mode
        )));
    }
    let start = Instant::now();
    let mut run = Run {
        model,
        store,
        source,
        labels,
        fit,
        val,
        config,
        adam: AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        best: None,
        final_checksum: None,
    };
    let history = run_epochs(config, &mut run)?;
    let final_checksum = run.final_checksum.take().unwrap_or_default();
    let test_accuracy = evaluate(model, store, source, labels, test, config.batch_size)?;
    Ok(TrainReport {
        train_loss: history.train_loss,
        val_loss: history.val_loss,
        best_epoch: history.best_epoch,
        stopped_epoch: history.stopped_epoch,
        best_val_loss: history.best_val_loss,
        test_accuracy,
        param_count: store.param_count(),
        best_checksum: store.checksum(),
        final_checksum,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
