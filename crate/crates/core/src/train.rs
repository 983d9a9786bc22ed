//! Training loop with early stopping on validation AUC.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scores, EvalReport, TotalMode};
use crate::model::HamurModel;
use crate::optim::{AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without a new best validation AUC before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 20,
            patience: 3,
            batch_size: 2048,
            eval_batch_size: 8192,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("train.eval_batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub steps: usize,
    pub valid: EvalReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_valid_auc: Option<f64>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// One JSON object per epoch, then a summary line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "best_epoch": self.best_epoch,
            "best_valid_auc": self.best_valid_auc,
            "seconds": self.seconds,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Trains `model` in place and restores the parameters of the epoch with the
/// best total validation AUC.
pub fn train(
    model: &mut HamurModel,
    train_set: &Dataset,
    valid_set: &Dataset,
    config: &TrainConfig,
    optim: &AdamConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let start = Instant::now();
    let mut adam = AdamState::new(*optim, &model.store);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, HamurModel)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        let mut steps = 0usize;
        for batch in batches(train_set, config.batch_size, seed, epoch as u64)? {
            steps += 1;
            let loss = model.train_step(&batch, &mut adam)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step: steps, loss });
            }
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let scores = model.predict(valid_set, config.eval_batch_size)?;
        let valid = evaluate_scores(valid_set, &scores, TotalMode::Pooled)?;
        let auc = valid.total.auc.unwrap_or(f64::NEG_INFINITY);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            steps,
            valid,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        epochs.push(record);
        match &best {
            Some((_, b, _)) if auc <= *b => since_best += 1,
            _ => {
                best = Some((epoch, auc, model.clone()));
                since_best = 0;
            }
        }
        if since_best >= config.patience {
            break;
        }
    }
    let (best_epoch, best_auc, best_model) = best.expect("at least one epoch ran");
    *model = best_model;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_valid_auc: best_auc.is_finite().then_some(best_auc),
        seconds: start.elapsed().as_secs_f64(),
    })
}
