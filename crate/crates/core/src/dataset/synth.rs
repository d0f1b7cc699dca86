//! Gaussian-mixture stand-in for a real embedding corpus.
//!
//! Cluster centers sit on a sphere of radius `center_radius`; corpus points
//! are `center + N(0, cluster_spread²)`, with cluster sizes skewed by
//! log-normal multipliers. Queries are drawn like corpus points (cluster
//! chosen proportionally to its size) plus `N(0, query_noise²)`.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::store::VectorFile;

/// How a synthetic corpus is cut into shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharding {
    /// Re-cluster the flat corpus with k-means (`n_clusters` shards).
    #[default]
    Kmeans,
    /// One shard per generator cluster.
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub dim: usize,
    /// Inclusive `[min, max]` cluster size.
    pub points_per_cluster: [usize; 2],
    /// Log-normal sigma of the cluster-size multipliers.
    pub size_skew: f64,
    pub center_radius: f64,
    pub cluster_spread: f64,
    pub query_noise: f64,
    pub n_queries: usize,
    pub sharding: Sharding,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clusters: 10,
            dim: 32,
            points_per_cluster: [400, 2000],
            size_skew: 0.5,
            center_radius: 4.0,
            cluster_spread: 1.0,
            query_noise: 0.5,
            n_queries: 2000,
            sharding: Sharding::Kmeans,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.points_per_cluster;
        let ok = self.n_clusters >= 1
            && self.dim >= 1
            && lo >= 1
            && lo <= hi
            && self.n_queries >= 1
            && self.size_skew >= 0.0
            && self.center_radius > 0.0
            && self.cluster_spread > 0.0
            && self.query_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid synthetic spec: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: VectorFile,
    /// Generator cluster of each corpus vector.
    pub corpus_clusters: Vec<usize>,
    pub queries: VectorFile,
    pub query_clusters: Vec<usize>,
    /// Center coordinates, row-major `n_clusters x dim`.
    pub centers: Vec<f64>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Data);
    let dim = spec.dim;

    let mut centers = Vec::with_capacity(spec.n_clusters * dim);
    for _ in 0..spec.n_clusters {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        centers.extend(dir.iter().map(|x| x / norm * spec.center_radius));
    }

    let [lo, hi] = spec.points_per_cluster;
    let base = (lo + hi) as f64 / 2.0;
    let skew = LogNormal::new(-spec.size_skew * spec.size_skew / 2.0, spec.size_skew)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let sizes: Vec<usize> = (0..spec.n_clusters)
        .map(|_| ((base * skew.sample(&mut rng)).round() as usize).clamp(lo, hi))
        .collect();

    let spread = Normal::new(0.0, spec.cluster_spread).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let sample_point = |rng: &mut rand_chacha::ChaCha8Rng, c: usize, out: &mut Vec<f32>| {
        for j in 0..dim {
            out.push((centers[c * dim + j] + spread.sample(rng)) as f32);
        }
    };

    let total: usize = sizes.iter().sum();
    let mut corpus = Vec::with_capacity(total * dim);
    let mut corpus_clusters = Vec::with_capacity(total);
    for (c, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            sample_point(&mut rng, c, &mut corpus);
            corpus_clusters.push(c);
        }
    }

    let mut queries = Vec::with_capacity(spec.n_queries * dim);
    let mut query_clusters = Vec::with_capacity(spec.n_queries);
    let mut point = Vec::with_capacity(dim);
    for _ in 0..spec.n_queries {
        // Cluster proportional to its size.
        let mut r = rng.random_range(0..total);
        let c = sizes
            .iter()
            .position(|&s| {
                if r < s {
                    true
                } else {
                    r -= s;
                    false
                }
            })
            .expect("r < total");
        point.clear();
        sample_point(&mut rng, c, &mut point);
        for x in &point {
            let noise: f64 = if spec.query_noise > 0.0 {
                spec.query_noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            queries.push((f64::from(*x) + noise) as f32);
        }
        query_clusters.push(c);
    }

    Ok(SyntheticData {
        corpus: VectorFile {
            dim,
            ids: (0..total as u64).collect(),
            data: corpus,
        },
        corpus_clusters,
        queries: VectorFile {
            dim,
            ids: (0..spec.n_queries as u64).collect(),
            data: queries,
        },
        query_clusters,
        centers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::squared_distance;

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSpec {
            points_per_cluster: [20, 60],
            n_queries: 30,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        let b = generate_synthetic(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(a.corpus.data, b.corpus.data);
        assert_eq!(a.corpus.dim, b.corpus.dim);
        assert_eq!(a.queries.len(), b.queries.len());
        let lo = 20;
        let hi = 60;
        let mut counts = vec![0usize; spec.n_clusters];
        a.corpus_clusters.iter().for_each(|&c| counts[c] += 1);
        assert!(counts.iter().all(|&c| (lo..=hi).contains(&c)));
    }

    #[test]
    fn noiseless_queries_land_near_their_cluster() {
        let spec = SyntheticSpec {
            dim: 16,
            points_per_cluster: [50, 80],
            center_radius: 30.0,
            query_noise: 0.0,
            n_queries: 40,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        for (q, &c) in data.queries.rows().map(|(_, r)| r).zip(&data.query_clusters) {
            let nearest = data
                .corpus
                .rows()
                .enumerate()
                .min_by(|a, b| squared_distance(q, a.1 .1).total_cmp(&squared_distance(q, b.1 .1)))
                .unwrap()
                .0;
            assert_eq!(data.corpus_clusters[nearest], c);
        }
    }

    #[test]
    fn invalid_spec() {
        let bad = SyntheticSpec { points_per_cluster: [10, 5], ..SyntheticSpec::default() };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticSpec { dim: 0, ..SyntheticSpec::default() };
        assert!(generate_synthetic(&bad).is_err());
    }
}
