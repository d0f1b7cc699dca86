//! Lloyd's k-means with k-means++ seeding, used to carve a flat corpus into
//! shards.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::store::{ShardIndex, VectorFile};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop when the relative inertia change drops below this.
    pub tolerance: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one iteration")
    }
}

fn dist2(point: &[f32], centroid: &[f64]) -> f64 {
    point
        .iter()
        .zip(centroid)
        .map(|(&x, &c)| {
            let d = f64::from(x) - c;
            d * d
        })
        .sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(point: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = dist2(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus<R: Rng>(data: &[f32], dim: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(row(first).iter().map(|&x| f64::from(x)));
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(row(i), &centroids)).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final sum.
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend(row(pick).iter().map(|&x| f64::from(x)));
        let new_c = &centroids[start..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(row(i), new_c));
        }
    }
    centroids
}

/// Cluster `n x dim` row-major data into `k` groups.
pub fn kmeans(data: &[f32], dim: usize, k: usize, seed: u64, params: &KMeansParams) -> Result<KMeans> {
    let n = data.len() / dim.max(1);
    if k < 2 {
        return Err(Error::InvalidArgument("k-means needs k >= 2".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least {k} vectors, got {n}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Clustering);
    let mut centroids = seed_plus_plus(data, dim, k, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut history = Vec::new();

    for _ in 0..params.max_iters {
        // Per-point work is independent; the inertia sum is folded
        // sequentially so the result does not depend on thread count.
        let nearest_all: Vec<(usize, f64)> = data
            .par_chunks_exact(dim)
            .map(|p| nearest(p, &centroids, dim))
            .collect();
        let inertia: f64 = nearest_all.iter().map(|&(_, d)| d).sum();
        for (a, &(j, _)) in assignment.iter_mut().zip(&nearest_all) {
            *a = j;
        }
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| (prev - inertia).abs() <= params.tolerance * prev.max(f64::MIN_POSITIVE));
        history.push(inertia);
        if converged || inertia == 0.0 {
            break;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &j) in data.chunks_exact(dim).zip(&assignment) {
            counts[j] += 1;
            for (s, &x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(p) {
                *s += f64::from(x);
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<(f64, usize)> = data
                .chunks_exact(dim)
                .zip(&assignment)
                .enumerate()
                .map(|(i, (p, &j))| (dist2(p, &centroids[j * dim..(j + 1) * dim]), i))
                .collect();
            far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (j, &(_, i)) in empty.iter().zip(&far) {
                for (c, &x) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                    *c = f64::from(x);
                }
            }
        }
    }

    Ok(KMeans {
        dim,
        centroids,
        assignment,
        inertia_history: history,
    })
}

/// Partition a corpus into `k` shards by k-means; shard ids are cluster
/// indices and vector ids are preserved.
pub fn kmeans_shard(vectors: &VectorFile, k: usize, seed: u64) -> Result<Vec<ShardIndex>> {
    let km = kmeans(&vectors.data, vectors.dim, k, seed, &KMeansParams::default())?;
    let mut ids = vec![Vec::new(); k];
    let mut data = vec![Vec::new(); k];
    for ((id, row), &j) in vectors.rows().zip(&km.assignment) {
        ids[j].push(id);
        data[j].extend_from_slice(row);
    }
    ids.into_iter()
        .zip(data)
        .enumerate()
        .map(|(j, (ids, data))| ShardIndex::from_flat(j as u32, vectors.dim, ids, data))
        .collect()
}
