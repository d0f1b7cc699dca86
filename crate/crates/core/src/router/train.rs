//! Mini-batch training with a triangular cyclic learning rate and
//! best-validation-accuracy checkpointing.

use std::collections::HashSet;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{self, Params};
use super::RouterModel;
use crate::dataset::{split_by_query, QuerySplit, SplitSpec};
use crate::error::{Error, Result};
use crate::features::{fit_scaler, RoutingFeatures};
use crate::rng::{stream_rng, Stream};
use crate::store::ShardId;

/// One `(query, shard)` training row with its relevance label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// Raw, unscaled features.
    pub features: RoutingFeatures,
    pub label: bool,
    pub query_id: u64,
    pub shard_id: ShardId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum { momentum: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::SgdMomentum { momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Steps per half-cycle; `None` means two epochs' worth of steps.
    pub cycle_length: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` uses `#negatives / #positives` of the training split.
    pub pos_weight: Option<f64>,
    pub dropout_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_min: 0.001,
            lr_max: 0.005,
            cycle_length: None,
            epochs: 50,
            batch_size: 128,
            pos_weight: None,
            dropout_rate: 0.2,
            optimizer: Optimizer::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad("need 0 < lr_min <= lr_max");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.cycle_length == Some(0) {
            return bad("epochs, batch_size and cycle_length must be positive");
        }
        if matches!(self.pos_weight, Some(w) if !(w > 0.0 && w.is_finite())) {
            return bad("pos_weight must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        Ok(())
    }
}

/// Triangular schedule: `lr_min` at step 0, `lr_max` after `half_cycle`
/// steps, back to `lr_min` after `2 * half_cycle`.
pub fn cyclic_lr(step: usize, half_cycle: usize, lr_min: f64, lr_max: f64) -> f64 {
    let pos = step % (2 * half_cycle);
    let frac = if pos < half_cycle {
        pos as f64 / half_cycle as f64
    } else {
        (2 * half_cycle - pos) as f64 / half_cycle as f64
    };
    lr_min + (lr_max - lr_min) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr_min: f64,
    pub lr_max: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RouterModel,
    pub log: Vec<EpochLog>,
    /// 1-based epoch of the retained checkpoint.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub pos_weight: f64,
    pub split: QuerySplit,
}

fn accuracy(logits: &Array1<f64>, labels: &Array1<f64>) -> f64 {
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(&z, &y)| (network::sigmoid(z) >= 0.5) == (y == 1.0))
        .count();
    correct as f64 / labels.len() as f64
}

/// Train a router on labeled examples split at the query level.
pub fn train(examples: &[LabeledExample], split: &SplitSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut seen = HashSet::with_capacity(examples.len());
    for ex in examples {
        if !seen.insert(ex.key()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate example for query {} shard {}",
                ex.query_id, ex.shard_id
            )));
        }
    }
    let query_ids: Vec<u64> = examples.iter().map(|e| e.query_id).collect();
    let qsplit = split_by_query(&query_ids, split)?;
    let (train_ex, val_ex): (Vec<_>, Vec<_>) = {
        let train: Vec<&LabeledExample> = examples.iter().filter(|e| qsplit.train.contains(&e.query_id)).collect();
        let val: Vec<&LabeledExample> = examples.iter().filter(|e| qsplit.val.contains(&e.query_id)).collect();
        (train, val)
    };
    if val_ex.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let positives = train_ex.iter().filter(|e| e.label).count();
    let negatives = train_ex.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let width = train_ex[0].features.len();
    if width < 5 || (width - 3) % 2 != 0 {
        return Err(Error::InvalidArgument(format!("feature width {width} is not 2d+3")));
    }
    let dim = (width - 3) / 2;

    let train_rows: Vec<&RoutingFeatures> = train_ex.iter().map(|e| &e.features).collect();
    let scaler = fit_scaler(&train_rows)?;
    let pos_weight = config.pos_weight.unwrap_or(negatives as f64 / positives as f64);

    let mut init_rng = stream_rng(config.seed, Stream::Init);
    let mut model = RouterModel::new(dim, scaler, config.dropout_rate, config.seed, &mut init_rng)?;

    let x_train = model.standardize(&train_rows)?;
    let y_train: Array1<f64> = train_ex.iter().map(|e| f64::from(u8::from(e.label))).collect();
    let val_rows: Vec<&RoutingFeatures> = val_ex.iter().map(|e| &e.features).collect();
    let x_val = model.standardize(&val_rows)?;
    let y_val: Array1<f64> = val_ex.iter().map(|e| f64::from(u8::from(e.label))).collect();

    let n = x_train.nrows();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let half_cycle = config.cycle_length.unwrap_or(2 * steps_per_epoch);
    let Optimizer::SgdMomentum { momentum } = config.optimizer;

    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(config.seed, Stream::Dropout);
    let mut velocity = Params::zeros(model.params.input_dim(), model.params.hidden1(), model.params.hidden2());
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Params)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let (mut lr_lo, mut lr_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for batch in order.chunks(config.batch_size) {
            let xb = x_train.select(Axis(0), batch);
            let yb = y_train.select(Axis(0), batch);
            let acts = network::forward_batch(&model.params, xb.view(), Some((&mut dropout_rng, config.dropout_rate)));
            let (loss, grads) = network::backward(&model.params, &acts, yb.view(), pos_weight);
            loss_sum += loss * batch.len() as f64;

            let lr = cyclic_lr(step, half_cycle, config.lr_min, config.lr_max);
            lr_lo = lr_lo.min(lr);
            lr_hi = lr_hi.max(lr);
            for ((p, v), g) in model
                .params
                .tensors_mut()
                .into_iter()
                .zip(velocity.tensors_mut())
                .zip(grads.tensors())
            {
                for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            step += 1;
        }
        let val_accuracy = accuracy(&network::logits_eval(&model.params, x_val.view()), &y_val);
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / n as f64,
            val_accuracy,
            lr_min: lr_lo,
            lr_max: lr_hi,
        });
        // Strict improvement only: the earliest epoch wins ties.
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, model.params.clone()));
        }
    }

    let (best_val_accuracy, best_epoch, params) = best.expect("epochs >= 1");
    model.params = params;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_accuracy,
        pos_weight,
        split: qsplit,
    })
}
