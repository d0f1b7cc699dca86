//! Exact (flat) nearest-neighbor index for a single shard, plus the shard
//! summary statistics consumed by the router.

mod format;

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub use format::{read_vectors, write_vectors, VectorFile, FVR_MAGIC};

pub type ShardId = u32;
pub type VectorId = u64;

/// A fixed-dimension embedding with finite coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding must have dimension >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Summary of one shard: centroid, size and how tightly it is packed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardStats {
    pub centroid: Vec<f64>,
    pub count: usize,
    /// Mean Euclidean distance of members to the centroid.
    pub mean_distance: f64,
    /// `1 / (1 + mean_distance)`, in (0, 1]; 1 for a singleton shard.
    pub density: f64,
}

impl ShardStats {
    pub fn dim(&self) -> usize {
        self.centroid.len()
    }

    fn compute(dim: usize, data: &[f32]) -> Self {
        let count = data.len() / dim;
        let mut centroid = vec![0.0f64; dim];
        for row in data.chunks_exact(dim) {
            for (c, &x) in centroid.iter_mut().zip(row) {
                *c += f64::from(x);
            }
        }
        let n = count as f64;
        centroid.iter_mut().for_each(|c| *c /= n);

        let total: f64 = data
            .chunks_exact(dim)
            .map(|row| squared_distance_to_centroid(row, &centroid).sqrt())
            .sum();
        let mean_distance = total / n;
        Self {
            centroid,
            count,
            mean_distance,
            density: 1.0 / (1.0 + mean_distance),
        }
    }
}

/// One search result with provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub shard_id: ShardId,
    pub vector_id: VectorId,
    /// Squared Euclidean distance to the query.
    pub distance: f64,
}

impl ScoredHit {
    pub fn key(&self) -> (ShardId, VectorId) {
        (self.shard_id, self.vector_id)
    }
}

impl Eq for ScoredHit {}

impl PartialOrd for ScoredHit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Ascending distance, then `(shard_id, vector_id)`.
impl Ord for ScoredHit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.shard_id.cmp(&other.shard_id))
            .then(self.vector_id.cmp(&other.vector_id))
    }
}

/// Immutable flat index over one shard's vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardIndex {
    shard_id: ShardId,
    dim: usize,
    ids: Vec<VectorId>,
    data: Vec<f32>,
    stats: ShardStats,
}

/// Build a flat index, computing its stats.
pub fn build_index(
    shard_id: ShardId,
    vectors: impl IntoIterator<Item = (VectorId, Embedding)>,
) -> Result<ShardIndex> {
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (id, emb) in vectors {
        let d = *dim.get_or_insert(emb.dim());
        check_dim(d, emb.dim())?;
        ids.push(id);
        data.extend_from_slice(emb.as_slice());
    }
    let dim = dim.ok_or(Error::EmptyShard(shard_id))?;
    ShardIndex::from_flat(shard_id, dim, ids, data)
}

impl ShardIndex {
    /// Build from row-major coordinates (`ids.len() * dim` values).
    pub fn from_flat(
        shard_id: ShardId,
        dim: usize,
        ids: Vec<VectorId>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyShard(shard_id));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        check_dim(ids.len() * dim, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shard vectors"));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &vector_id in &ids {
            if !seen.insert(vector_id) {
                return Err(Error::DuplicateVectorId {
                    shard_id,
                    vector_id,
                });
            }
        }
        let stats = ShardStats::compute(dim, &data);
        Ok(Self {
            shard_id,
            dim,
            ids,
            data,
            stats,
        })
    }

    pub fn shard_id(&self) -> ShardId {
        self.shard_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn stats(&self) -> &ShardStats {
        &self.stats
    }

    pub fn ids(&self) -> &[VectorId] {
        &self.ids
    }

    /// Row-major coordinates.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = (VectorId, &[f32])> {
        self.ids.iter().copied().zip(self.data.chunks_exact(self.dim))
    }

    /// Exact top-k by squared Euclidean distance, ascending, ties broken by
    /// `(shard_id, vector_id)`.
    pub fn search_top_k(&self, query: &[f32], k: usize) -> Result<Vec<ScoredHit>> {
        check_dim(self.dim, query.len())?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        let mut hits: Vec<ScoredHit> = self
            .iter()
            .map(|(vector_id, row)| ScoredHit {
                shard_id: self.shard_id,
                vector_id,
                distance: squared_distance(query, row),
            })
            .collect();
        if k < hits.len() {
            hits.select_nth_unstable(k - 1);
            hits.truncate(k);
        }
        hits.sort_unstable();
        Ok(hits)
    }
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn squared_distance_to_centroid(row: &[f32], centroid: &[f64]) -> f64 {
    row.iter()
        .zip(centroid)
        .map(|(&x, &c)| {
            let d = f64::from(x) - c;
            d * d
        })
        .sum()
}

/// Squared Euclidean distance between a query and a shard centroid.
pub fn shard_distance(query: &[f32], stats: &ShardStats) -> Result<f64> {
    check_dim(stats.dim(), query.len())?;
    Ok(squared_distance_to_centroid(query, &stats.centroid))
}
