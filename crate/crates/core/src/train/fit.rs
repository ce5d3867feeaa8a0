use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport};
use super::optim::{adam_step, AdamConfig, TrainState};
use crate::data::EncodedSample;
use crate::error::{Error, Result};
use crate::model::{AnswerSelection, Q2ATransformer};
use crate::nn::Module;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear learning-rate ramp over the first `warmup_steps` updates.
    pub warmup_steps: u64,
    /// Seed of the minibatch shuffling generator (independent of init).
    pub shuffle_seed: u64,
    /// Stop once overall validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub selection: AnswerSelection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            shuffle_seed: 0,
            target_accuracy: None,
            selection: AnswerSelection::ByQuestionType,
        }
    }
}

impl TrainConfig {
    /// Settings that train [`ModelConfig::reference`] reliably: small
    /// minibatches at a lower rate than the defaults.
    ///
    /// [`ModelConfig::reference`]: crate::model::ModelConfig::reference
    pub fn reference() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 3e-4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config("need lr >= 0 and betas in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    pub val: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds on return, if any ran.
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.history[e - 1])
    }
}

/// Minibatch Adam on the asymmetric loss. After every epoch the model is
/// evaluated on `val`; on return the model holds the parameters of the epoch
/// with the best overall validation accuracy (earliest on ties).
///
/// `on_epoch` is called after each epoch, e.g. for progress output.
pub fn train(
    model: &mut Q2ATransformer,
    train_set: &[EncodedSample],
    val_set: &[EncodedSample],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    state.seed = cfg.shuffle_seed;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grad();
            let samples: Vec<&EncodedSample> = batch.iter().map(|&i| &train_set[i]).collect();
            let (loss, _) = model.batch_loss(&samples)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "train" });
            }
            loss_sum += value * batch.len() as f64;
            loss.backward()?;
            // release the graph so parameter updates need not copy storage
            drop(loss);
            let step_cfg = AdamConfig {
                lr: cfg.lr_at(state.step),
                ..cfg.adam()
            };
            adam_step(&mut model.parameters_mut(), state, &step_cfg)?;
        }
        model.zero_grad();
        let val = evaluate(model, val_set, cfg.selection)?;
        let acc = val.overall_acc.unwrap_or(0.0);
        if best.as_ref().is_none_or(|(_, best_acc, _)| acc > *best_acc) {
            best = Some((epoch, acc, snapshot(model)));
        }
        state.best_val_acc = Some(state.best_val_acc.map_or(acc, |b| b.max(acc)));
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val,
        };
        on_epoch(&record);
        history.push(record);
        if cfg.target_accuracy.is_some_and(|t| acc >= t) {
            break;
        }
    }

    let best_epoch = best.map(|(epoch, _, params)| {
        restore(model, &params);
        epoch
    });
    Ok(TrainOutcome {
        history,
        best_epoch,
    })
}

fn snapshot(model: &Q2ATransformer) -> Vec<Vec<f64>> {
    model
        .parameters()
        .iter()
        .map(|p| p.data().to_vec())
        .collect()
}

fn restore(model: &mut Q2ATransformer, values: &[Vec<f64>]) {
    for (p, v) in model.parameters_mut().into_iter().zip(values) {
        p.update(|d, _| d.copy_from_slice(v));
    }
}

pub const HISTORY_HEADER: [&str; 5] = [
    "epoch",
    "train_loss",
    "val_open_acc",
    "val_closed_acc",
    "val_overall_acc",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes `epoch,train_loss,val_open_acc,val_closed_acc,val_overall_acc`;
/// an undefined accuracy is an empty field.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_HEADER)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            opt(r.val.open_acc),
            opt(r.val.closed_acc),
            opt(r.val.overall_acc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
