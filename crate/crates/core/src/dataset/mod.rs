//! Data ingestion, synthetic benchmark generation, k-means sharding and
//! query-level splits.

mod kmeans;
mod manifest;
mod split;
mod synth;

pub use kmeans::{kmeans, kmeans_shard, KMeans, KMeansParams};
pub use manifest::{export_shards, import_shards, Manifest, ManifestEntry};
pub use split::{split_by_query, QuerySplit, SplitSpec};
pub use synth::{generate_synthetic, Sharding, SyntheticData, SyntheticSpec};
