//! Federated exact vector search with a learned shard router.
//!
//! Each shard is an exact flat index. A small MLP, trained on replayed
//! queries, predicts per `(query, shard)` whether the shard contributes to
//! the global top-k; at query time only predicted-relevant shards are
//! contacted and their partial top-k lists are merged.
//!
//! - [`store`]: flat per-shard index, shard statistics, `FVR1` vector files
//! - [`features`]: router input assembly and standardization
//! - [`router`]: the relevance classifier, its training loop and `RRM1` files
//! - [`federation`]: routing, scatter-gather search, label generation
//! - [`dataset`]: synthetic corpora, k-means sharding, splits, manifests
//! - [`metrics`]: recall, classifier metrics, cost accounting, reports
//! - [`pipeline`]: the `synth`/`import`/`label`/`train`/`eval`/`report` commands

pub mod dataset;
pub mod error;
pub mod features;
pub mod federation;
mod fsutil;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod router;
pub mod store;

pub use error::{Error, Result};
pub use features::{assemble_features, RoutingFeatures, ScalerParams};
pub use federation::{federated_search, naive_search, route, FederatedResult, RoutingDecision};
pub use router::{RouterModel, TrainConfig};
pub use store::{build_index, Embedding, ScoredHit, ShardIndex, ShardStats};
