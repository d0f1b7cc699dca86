//! Learned per-shard relevance classifier.

mod checkpoint;
pub mod network;
mod train;

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::features::{feature_len, RoutingFeatures, ScalerParams};
use crate::store::ShardId;

pub use checkpoint::{load, save, MODEL_MAGIC, MODEL_VERSION};
pub use network::{loss_bce_logits, sigmoid, Params};
pub use train::{
    cyclic_lr, train, EpochLog, LabeledExample, Optimizer, TrainConfig, TrainOutcome,
};

pub const HIDDEN1: usize = 256;
pub const HIDDEN2: usize = 128;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A trained router: network weights plus the scaler and decision threshold
/// it must be used with.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    pub params: Params,
    pub scaler: ScalerParams,
    /// Embedding dimension `d`; the network input is `2d + 3`.
    pub dim: usize,
    pub dropout_rate: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl RouterModel {
    pub fn new<R: Rng>(dim: usize, scaler: ScalerParams, dropout_rate: f64, seed: u64, rng: &mut R) -> Result<Self> {
        check_dim(feature_len(dim), scaler.width())?;
        Ok(Self {
            params: Params::init(feature_len(dim), HIDDEN1, HIDDEN2, rng),
            scaler,
            dim,
            dropout_rate,
            threshold: DEFAULT_THRESHOLD,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        feature_len(self.dim)
    }

    /// Single-row logit on already-standardized features. In train mode a
    /// dropout mask is drawn from `rng`.
    pub fn forward<R: Rng>(&self, standardized: &[f64], train_mode: bool, rng: &mut R) -> Result<f64> {
        check_dim(self.input_dim(), standardized.len())?;
        if standardized.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("router input"));
        }
        let x = ArrayView1::from(standardized).insert_axis(ndarray::Axis(0));
        let logit = if train_mode {
            network::forward_batch(&self.params, x, Some((rng, self.dropout_rate))).logits[0]
        } else {
            network::logits_eval(&self.params, x)[0]
        };
        Ok(logit)
    }

    /// Standardize raw rows into a `(rows, 2d+3)` matrix.
    pub fn standardize<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Array2<f64>> {
        let width = self.input_dim();
        let mut x = Array2::zeros((rows.len(), width));
        for (mut out, row) in x.outer_iter_mut().zip(rows) {
            let row = row.as_ref();
            check_dim(width, row.len())?;
            let out = out.as_slice_mut().expect("row-major");
            out.copy_from_slice(row);
            self.scaler.transform_in_place(out)?;
        }
        Ok(x)
    }

    /// Relevance probabilities for raw (unscaled) feature rows, in order.
    pub fn predict_batch(&self, rows: &[RoutingFeatures]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.standardize(rows)?;
        Ok(network::logits_eval(&self.params, x.view())
            .iter()
            .map(|&z| sigmoid(z))
            .collect())
    }
}

/// Per-shard relevance decision for a probability vector.
pub fn select(probabilities: &[f64], threshold: f64) -> Vec<bool> {
    probabilities.iter().map(|&p| p >= threshold).collect()
}

impl LabeledExample {
    pub fn key(&self) -> (u64, ShardId) {
        (self.query_id, self.shard_id)
    }
}
