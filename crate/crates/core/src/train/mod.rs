//! Mini-batch training with Adam, validation early stopping and seeded
//! determinism.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, ParamId, ParameterSet, Tape};
use crate::data::{Dialog, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate_features, TaskEvaluation};
use crate::model::{featurize, Checkpoint, DialogFeatures, Model, ModelConfig};


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Dialogs per batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub threshold: f64,
    /// Stop as soon as validation F1 reaches this value.
    pub stop_at_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            grad_clip: 5.0,
            threshold: 0.5,
            stop_at_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} must be finite and ≥ 0", self.lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch size, epochs and patience must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max epochs {}", self.patience, self.max_epochs));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad(format!("gradient clip {} must be positive", self.grad_clip));
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 || self.threshold >= 1.0 {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training BCE per utterance (summed over tasks), dropout on.
    pub train_loss: f64,
    pub val: Vec<TaskEvaluation>,
    pub wall_secs: f64,
}

impl EpochRecord {
    /// Mean validation F1 over the active tasks.
    pub fn monitored_f1(&self) -> f64 {
        self.val.iter().map(|e| e.metrics.f1).sum::<f64>() / self.val.len().max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// CSV with one row per epoch. Wall time is left out so identical runs
    /// give identical files.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let tasks: Vec<_> = self
            .epochs
            .first()
            .map(|e| e.val.iter().map(|v| v.task).collect())
            .unwrap_or_default();
        let mut header = vec!["epoch".to_string(), "train_loss".to_string()];
        for t in &tasks {
            for m in ["p", "r", "f1", "acc"] {
                header.push(format!("{t}_val_{m}"));
            }
        }
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), e.train_loss.to_string()];
            for v in &e.val {
                let m = v.metrics;
                row.extend([m.precision, m.recall, m.f1, m.accuracy].map(|x| x.to_string()));
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch, rounded to `f32` so they
    /// match what a checkpoint stores.
    pub params: ParameterSet,
    pub history: TrainHistory,
}

/// Embed every dialog for `config`, in parallel, preserving order.
pub fn prepare(config: &ModelConfig, dialogs: &[Dialog], embeddings: Option<&EmbeddingTable>) -> Result<Vec<DialogFeatures>> {
    dialogs.par_iter().map(|d| featurize(config, d, embeddings)).collect()
}

/// Dropout stream for dialog `index` in epoch `epoch`.
pub fn dropout_stream(epoch: usize, index: usize) -> u64 {
    ((epoch as u64) << 32) | index as u64
}

fn dropout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct DialogGrad {
    loss: f64,
    utterances: usize,
    grads: Vec<(ParamId, Vec<f64>)>,
}

fn dialog_gradient(model: &Model, ps: &ParameterSet, f: &DialogFeatures, seed: u64, stream: u64) -> Result<DialogGrad> {
    let mut rng = dropout_rng(seed, stream);
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, ps, f, true, false, &mut rng)?;
    let loss = model.loss_sum(&mut tape, &pass, f)?;
    let value = tape.data(loss)[0];
    tape.backward(loss)?;
    Ok(DialogGrad {
        loss: value,
        utterances: f.len(),
        grads: tape.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect(),
    })
}

/// One optimisation step on a batch of `(dropout stream, dialog)` pairs.
/// Dialogs run in parallel; gradients are summed in batch order, so the
/// result does not depend on the thread count. Returns the mean loss per
/// utterance, or `Ok(None)` when it is not finite (no step is taken).
pub fn train_step(
    model: &Model,
    ps: &mut ParameterSet,
    adam: &mut AdamState,
    batch: &[(u64, &DialogFeatures)],
    seed: u64,
    grad_clip: f64,
) -> Result<Option<f64>> {
    ps.zero_grads();
    let mut loss = 0.0;
    let mut utterances = 0;
    let chunk = 2 * rayon::current_num_threads().max(1);
    for part in batch.chunks(chunk) {
        let shared: &ParameterSet = ps;
        let results: Vec<DialogGrad> = part
            .par_iter()
            .map(|&(stream, f)| dialog_gradient(model, shared, f, seed, stream))
            .collect::<Result<_>>()?;
        for r in results {
            loss += r.loss;
            utterances += r.utterances;
            for (id, g) in &r.grads {
                ps.accumulate_grad(*id, g)?;
            }
        }
    }
    let mean = loss / utterances.max(1) as f64;
    if !mean.is_finite() {
        ps.zero_grads();
        return Ok(None);
    }
    ps.scale_grads(1.0 / utterances as f64);
    let norm = ps.grad_norm();
    if norm > grad_clip {
        ps.scale_grads(grad_clip / norm);
    }
    adam.step(ps)?;
    Ok(Some(mean))
}

/// Mean per-utterance loss in eval mode.
pub fn mean_loss(model: &Model, ps: &ParameterSet, feats: &[&DialogFeatures]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = feats
        .par_iter()
        .map(|f| {
            let mut tape = Tape::new();
            let mut rng = dropout_rng(0, 0);
            let pass = model.forward(&mut tape, ps, f, false, false, &mut rng)?;
            let l = model.loss_sum(&mut tape, &pass, f)?;
            Ok((tape.data(l)[0], f.len()))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), &(l, k)| (s + l, n + k));
    Ok(sum / n.max(1) as f64)
}

pub fn train(
    config: &ModelConfig,
    train_set: &[DialogFeatures],
    val_set: &[DialogFeatures],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(config, train_set, val_set, tc, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &ModelConfig,
    train_set: &[DialogFeatures],
    val_set: &[DialogFeatures],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tc.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let (model, mut ps) = Model::init(config, &mut ChaCha8Rng::seed_from_u64(tc.seed))?;
    let mut adam = AdamState::new(&ps, tc.adam());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = dropout_rng(tc.seed, u64::MAX);

    let mut history = TrainHistory::default();
    let mut best = ps.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut batch_id = 0;

    for epoch in 1..=tc.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut utterances = 0;
        for chunk in order.chunks(tc.batch_size) {
            batch_id += 1;
            let batch: Vec<(u64, &DialogFeatures)> =
                chunk.iter().map(|&i| (dropout_stream(epoch, i), &train_set[i])).collect();
            let n: usize = batch.iter().map(|(_, f)| f.len()).sum();
            let mean = train_step(&model, &mut ps, &mut adam, &batch, tc.seed, tc.grad_clip)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { batch: batch_id },
                    e => e,
                })?
                .ok_or(Error::NonFiniteLoss { batch: batch_id })?;
            loss_sum += mean * n as f64;
            utterances += n;
        }
        let val = evaluate_features(&model, &ps, val_set, tc.threshold)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / utterances as f64,
            val,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        let f1 = record.monitored_f1();
        on_epoch(&record);
        history.epochs.push(record);
        if f1 > best_f1 {
            best_f1 = f1;
            best = ps.clone();
            history.best_epoch = Some(epoch);
            since_best = 0;
            if tc.stop_at_f1.is_some_and(|t| f1 >= t) {
                history.stopped_early = epoch < tc.max_epochs;
                break;
            }
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                history.stopped_early = epoch < tc.max_epochs;
                break;
            }
        }
    }
    best.zero_grads();
    best.round_to_f32();
    Ok(TrainOutcome { params: best, history })
}

/// Score `dialogs` with a checkpoint's model.
pub fn evaluate_split(
    checkpoint: &Checkpoint,
    dialogs: &[Dialog],
    embeddings: Option<&EmbeddingTable>,
    threshold: f64,
) -> Result<Vec<TaskEvaluation>> {
    let config = checkpoint.model_config()?;
    let model = Model::bind(&config, &checkpoint.params)?;
    let feats = prepare(&config, dialogs, embeddings)?;
    evaluate_features(&model, &checkpoint.params, &feats, threshold)
}
