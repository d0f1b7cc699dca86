//! Query path: route a query to shards, fan out, and merge partial top-k
//! lists into the global top-k.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::features::{assemble_features, RoutingFeatures};
use crate::router::{LabeledExample, RouterModel};
use crate::store::{ScoredHit, ShardId, ShardIndex, ShardStats, VectorFile};

/// Bytes for one id on the wire.
pub const ID_BYTES: u64 = 8;
/// Bytes per embedding coordinate on the wire.
pub const COORD_BYTES: u64 = 4;

/// What the router knows about a remote shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardSummary {
    pub shard_id: ShardId,
    pub stats: ShardStats,
}

pub fn summaries(indexes: &[ShardIndex]) -> Vec<ShardSummary> {
    indexes
        .iter()
        .map(|s| ShardSummary {
            shard_id: s.shard_id(),
            stats: s.stats().clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub query_id: u64,
    pub shard_ids: Vec<ShardId>,
    pub probabilities: Vec<f64>,
    pub selected: Vec<bool>,
    pub fallback_used: bool,
}

impl RoutingDecision {
    /// Threshold the probabilities; if nothing clears the threshold, select
    /// the argmax (lowest position on ties).
    pub fn from_probabilities(query_id: u64, shard_ids: Vec<ShardId>, probabilities: Vec<f64>, threshold: f64) -> Self {
        let mut selected: Vec<bool> = probabilities.iter().map(|&p| p >= threshold).collect();
        let fallback_used = !selected.iter().any(|&s| s) && !selected.is_empty();
        if fallback_used {
            let best = probabilities
                .iter()
                .enumerate()
                .fold(0, |best, (i, &p)| if p > probabilities[best] { i } else { best });
            selected[best] = true;
        }
        Self {
            query_id,
            shard_ids,
            probabilities,
            selected,
            fallback_used,
        }
    }

    /// Contact every shard (naive routing).
    pub fn all(query_id: u64, shard_ids: Vec<ShardId>) -> Self {
        let n = shard_ids.len();
        Self {
            query_id,
            shard_ids,
            probabilities: vec![1.0; n],
            selected: vec![true; n],
            fallback_used: false,
        }
    }

    /// Contact exactly the given shards (ground-truth routing).
    pub fn only(query_id: u64, shard_ids: Vec<ShardId>, relevant: &BTreeSet<ShardId>) -> Self {
        let selected: Vec<bool> = shard_ids.iter().map(|s| relevant.contains(s)).collect();
        let probabilities = selected.iter().map(|&s| f64::from(u8::from(s))).collect();
        Self {
            query_id,
            shard_ids,
            probabilities,
            selected,
            fallback_used: false,
        }
    }

    /// Number of shards contacted.
    pub fn m(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn selected_ids(&self) -> impl Iterator<Item = ShardId> + '_ {
        self.shard_ids
            .iter()
            .zip(&self.selected)
            .filter(|(_, &s)| s)
            .map(|(&id, _)| id)
    }
}

/// Merged answer to one query plus its communication cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedResult {
    pub query_id: u64,
    pub hits: Vec<ScoredHit>,
    pub shards_queried: usize,
    pub embeddings_returned: usize,
    pub bytes_moved: u64,
}

impl FederatedResult {
    /// Shards that contributed at least one hit.
    pub fn contributing_shards(&self) -> BTreeSet<ShardId> {
        self.hits.iter().map(|h| h.shard_id).collect()
    }
}

/// Bytes moved: one request (id + query) per contacted shard and one
/// record (id + embedding) per returned hit.
pub fn bytes_moved(dim: usize, shards_queried: usize, embeddings_returned: usize) -> u64 {
    let record = ID_BYTES + COORD_BYTES * dim as u64;
    record * (shards_queried as u64 + embeddings_returned as u64)
}

/// Probability per shard from the router, then thresholding with fallback.
pub fn route(model: &RouterModel, query_id: u64, query: &[f32], shards: &[ShardSummary]) -> Result<RoutingDecision> {
    check_dim(model.dim, query.len())?;
    if shards.is_empty() {
        return Err(Error::InvalidArgument("no shards to route to".into()));
    }
    let rows = routing_rows(query, shards)?;
    let probabilities = model.predict_batch(&rows)?;
    Ok(RoutingDecision::from_probabilities(
        query_id,
        shards.iter().map(|s| s.shard_id).collect(),
        probabilities,
        model.threshold,
    ))
}

pub fn routing_rows(query: &[f32], shards: &[ShardSummary]) -> Result<Vec<RoutingFeatures>> {
    shards.iter().map(|s| assemble_features(query, &s.stats)).collect()
}

/// k smallest hits across sorted per-shard lists, under the global order.
pub fn merge_top_k(lists: &[Vec<ScoredHit>], k: usize) -> Vec<ScoredHit> {
    let mut heap: BinaryHeap<Reverse<(ScoredHit, usize, usize)>> = lists
        .iter()
        .enumerate()
        .filter_map(|(li, l)| l.first().map(|&h| Reverse((h, li, 0))))
        .collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let Some(Reverse((hit, li, pos))) = heap.pop() else {
            break;
        };
        out.push(hit);
        if let Some(&next) = lists[li].get(pos + 1) {
            heap.push(Reverse((next, li, pos + 1)));
        }
    }
    out
}

/// Query the selected shards concurrently and merge their top-k lists.
pub fn federated_search(
    decision: &RoutingDecision,
    indexes: &[ShardIndex],
    query: &[f32],
    k: usize,
) -> Result<FederatedResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let targets: Vec<&ShardIndex> = decision
        .selected_ids()
        .map(|id| {
            indexes
                .iter()
                .find(|s| s.shard_id() == id)
                .ok_or(Error::ShardUnavailable(id))
        })
        .collect::<Result<_>>()?;
    let partials: Vec<Vec<ScoredHit>> = targets
        .par_iter()
        .map(|shard| shard.search_top_k(query, k))
        .collect::<Result<_>>()?;
    let embeddings_returned = partials.iter().map(Vec::len).sum();
    Ok(FederatedResult {
        query_id: decision.query_id,
        hits: merge_top_k(&partials, k),
        shards_queried: targets.len(),
        embeddings_returned,
        bytes_moved: bytes_moved(query.len(), targets.len(), embeddings_returned),
    })
}

/// Contact every shard; the ground truth for recall and the cost baseline.
pub fn naive_search(query_id: u64, indexes: &[ShardIndex], query: &[f32], k: usize) -> Result<FederatedResult> {
    let decision = RoutingDecision::all(query_id, indexes.iter().map(ShardIndex::shard_id).collect());
    federated_search(&decision, indexes, query, k)
}

/// One labeled `(query, shard)` example per pair: a shard is relevant iff it
/// contributes to the query's global top-k.
pub fn generate_labels(indexes: &[ShardIndex], queries: &VectorFile, k: usize) -> Result<Vec<LabeledExample>> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no training queries".into()));
    }
    let per_query: Vec<Vec<LabeledExample>> = queries
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(query_id, query)| {
            let truth = naive_search(query_id, indexes, query, k)?;
            let relevant = truth.contributing_shards();
            indexes
                .iter()
                .map(|shard| {
                    Ok(LabeledExample {
                        features: assemble_features(query, shard.stats())?,
                        label: relevant.contains(&shard.shard_id()),
                        query_id,
                        shard_id: shard.shard_id(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().flatten().collect())
}
