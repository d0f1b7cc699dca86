//! Router input assembly and standardization.
//!
//! Feature layout for a `(query, shard)` pair with embedding dimension `d`:
//!
//! | slots          | content                                     |
//! |----------------|---------------------------------------------|
//! | `0..d`         | query embedding                             |
//! | `d..2d`        | shard centroid                              |
//! | `2d`           | squared Euclidean query-centroid distance   |
//! | `2d + 1`       | shard item count                            |
//! | `2d + 2`       | shard density                               |

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::store::{shard_distance, ShardStats};

pub const STDDEV_FLOOR: f64 = 1e-8;

pub const fn feature_len(dim: usize) -> usize {
    2 * dim + 3
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingFeatures(Vec<f64>);

impl RoutingFeatures {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("routing features"));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for RoutingFeatures {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn assemble_features(query: &[f32], stats: &ShardStats) -> Result<RoutingFeatures> {
    let distance = shard_distance(query, stats)?;
    let mut out = Vec::with_capacity(feature_len(query.len()));
    out.extend(query.iter().map(|&x| f64::from(x)));
    out.extend_from_slice(&stats.centroid);
    out.push(distance);
    out.push(stats.count as f64);
    out.push(stats.density);
    RoutingFeatures::new(out)
}

/// Per-column standardization parameters (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

pub fn fit_scaler<R: AsRef<[f64]>>(rows: &[R]) -> Result<ScalerParams> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "scaler needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let width = rows[0].as_ref().len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; width];
    for row in rows {
        let row = row.as_ref();
        check_dim(width, row.len())?;
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut var = vec![0.0; width];
    for row in rows {
        for ((v, &x), &m) in var.iter_mut().zip(row.as_ref()).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let stddev = var
        .into_iter()
        .map(|v| (v / n).sqrt().max(STDDEV_FLOOR))
        .collect();
    Ok(ScalerParams { mean, stddev })
}

impl ScalerParams {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>> {
        let mut out = row.to_vec();
        self.transform_in_place(&mut out)?;
        Ok(out)
    }

    pub fn transform_in_place(&self, row: &mut [f64]) -> Result<()> {
        check_dim(self.width(), row.len())?;
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.stddev) {
            *x = (*x - m) / s;
        }
        Ok(())
    }

    pub fn inverse_transform(&self, row: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.width(), row.len())?;
        Ok(row
            .iter()
            .zip(&self.mean)
            .zip(&self.stddev)
            .map(|((z, m), s)| z * s + m)
            .collect())
    }
}
