use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.3,
            val_frac: 0.1,
            test_frac: 0.6,
            seed: 0,
        }
    }
}

/// Disjoint query-id sets; every example of a query lands in one of them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuerySplit {
    pub train: BTreeSet<u64>,
    pub val: BTreeSet<u64>,
    pub test: BTreeSet<u64>,
}

pub fn split_by_query(query_ids: &[u64], spec: &SplitSpec) -> Result<QuerySplit> {
    let fracs = [spec.train_frac, spec.val_frac, spec.test_frac];
    if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fracs:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut ids: Vec<u64> = query_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 distinct queries to split, got {}",
            ids.len()
        )));
    }
    ids.shuffle(&mut stream_rng(spec.seed, Stream::Split));
    let n = ids.len() as f64;
    let n_train = (n * spec.train_frac).round() as usize;
    let n_val = ((n * spec.val_frac).round() as usize).min(ids.len() - n_train);
    Ok(QuerySplit {
        train: ids[..n_train].iter().copied().collect(),
        val: ids[n_train..n_train + n_val].iter().copied().collect(),
        test: ids[n_train + n_val..].iter().copied().collect(),
    })
}
