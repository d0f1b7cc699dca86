//! Retrieval recall, classifier quality and communication-cost accounting,
//! folded from per-query traces.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::FederatedResult;
use crate::fsutil::write_atomic;
use crate::store::ShardId;

/// Fraction of ground-truth hits recovered by the routed result.
pub fn retrieval_recall(routed: &FederatedResult, truth: &FederatedResult) -> Result<f64> {
    if routed.query_id != truth.query_id {
        return Err(Error::QueryMismatch(routed.query_id, truth.query_id));
    }
    if truth.hits.is_empty() {
        return Err(Error::InvalidArgument("ground truth has no hits".into()));
    }
    let truth_ids: HashSet<_> = truth.hits.iter().map(|h| h.key()).collect();
    let found = routed.hits.iter().filter(|h| truth_ids.contains(&h.key())).count();
    Ok(found as f64 / truth_ids.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the labels contain a single class.
    pub auc: Option<f64>,
    /// False when nothing was predicted positive; precision and F1 are then
    /// reported as 0.
    pub precision_defined: bool,
}

/// Area under the ROC curve from the Mann-Whitney rank statistic; tied
/// scores receive average ranks (half credit per tied pair).
pub fn auc(predictions: &[(f64, bool)]) -> Option<f64> {
    let n_pos = predictions.iter().filter(|p| p.1).count();
    let n_neg = predictions.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, bool)> = predictions.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = sorted[i..=j].iter().filter(|p| p.1).count();
        rank_sum_pos += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn classifier_metrics(predictions: &[(f64, bool)], threshold: f64) -> Result<ClassifierMetrics> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for &(p, y) in predictions {
        match (p >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassifierMetrics {
        accuracy: ratio(tp + tn, predictions.len()),
        precision,
        recall,
        f1,
        auc: auc(predictions),
        precision_defined: tp + fp > 0,
    })
}

/// Everything recorded about one evaluated query. Shard-indexed vectors
/// follow `shard_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub query_id: u64,
    pub shard_ids: Vec<ShardId>,
    pub probabilities: Vec<f64>,
    /// Ground-truth relevance (shard contributes to the global top-k).
    pub labels: Vec<bool>,
    pub selected: Vec<bool>,
    pub fallback_used: bool,
    pub m: usize,
    pub recall: f64,
    pub bytes_moved: u64,
    pub naive_m: usize,
    pub naive_bytes: u64,
    pub oracle_m: usize,
    pub oracle_bytes: u64,
    pub oracle_recall: f64,
    /// Number of ground-truth hits held by each shard.
    pub truth_per_shard: Vec<usize>,
    /// Router inference time (batch over all shards).
    pub latency_ns: u64,
}

pub fn write_traces(path: &Path, traces: &[QueryTrace]) -> Result<()> {
    write_atomic(path, |w| {
        for t in traces {
            serde_json::to_writer(&mut *w, t)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })
}

pub fn read_traces(path: &Path) -> Result<Vec<QueryTrace>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::malformed(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_queries: usize,
    pub n_shards: usize,
    pub mean_recall: f64,
    pub oracle_mean_recall: f64,
    pub fallback_queries: usize,
    pub total_queries_naive: u64,
    pub total_queries_oracle: u64,
    pub total_queries_routed: u64,
    pub query_reduction_pct: f64,
    pub oracle_query_reduction_pct: f64,
    pub bytes_naive: u64,
    pub bytes_oracle: u64,
    pub bytes_routed: u64,
    pub volume_reduction_pct: f64,
    pub oracle_volume_reduction_pct: f64,
}

impl Aggregate {
    /// Oracle cost <= routed cost <= naive cost, for queries and bytes.
    pub fn sandwich_holds(&self) -> bool {
        self.total_queries_oracle <= self.total_queries_routed
            && self.total_queries_routed <= self.total_queries_naive
            && self.bytes_oracle <= self.bytes_routed
            && self.bytes_routed <= self.bytes_naive
    }
}

fn reduction_pct(part: u64, whole: u64) -> f64 {
    100.0 * (1.0 - part as f64 / whole as f64)
}

pub fn efficiency_summary(traces: &[QueryTrace], n_shards: usize) -> Result<Aggregate> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no traces".into()));
    }
    if n_shards == 0 {
        return Err(Error::InvalidArgument("no shards".into()));
    }
    let q = traces.len();
    let sum = |f: fn(&QueryTrace) -> u64| traces.iter().map(f).sum::<u64>();
    let naive_queries = (q * n_shards) as u64;
    let routed_queries = sum(|t| t.m as u64);
    let oracle_queries = sum(|t| t.oracle_m as u64);
    let bytes_naive = sum(|t| t.naive_bytes);
    let bytes_routed = sum(|t| t.bytes_moved);
    let bytes_oracle = sum(|t| t.oracle_bytes);
    Ok(Aggregate {
        n_queries: q,
        n_shards,
        mean_recall: traces.iter().map(|t| t.recall).sum::<f64>() / q as f64,
        oracle_mean_recall: traces.iter().map(|t| t.oracle_recall).sum::<f64>() / q as f64,
        fallback_queries: traces.iter().filter(|t| t.fallback_used).count(),
        total_queries_naive: naive_queries,
        total_queries_oracle: oracle_queries,
        total_queries_routed: routed_queries,
        query_reduction_pct: reduction_pct(routed_queries, naive_queries),
        oracle_query_reduction_pct: reduction_pct(oracle_queries, naive_queries),
        bytes_naive,
        bytes_oracle,
        bytes_routed,
        volume_reduction_pct: reduction_pct(bytes_routed, bytes_naive),
        oracle_volume_reduction_pct: reduction_pct(bytes_oracle, bytes_naive),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQuery {
    pub query_id: u64,
    pub recall: f64,
    pub m: usize,
    pub bytes_moved: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardClassifier {
    pub shard_id: ShardId,
    pub positives: usize,
    pub metrics: ClassifierMetrics,
}

/// Means and population standard deviations of per-shard metrics. AUC
/// statistics skip shards where it is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub accuracy: [f64; 2],
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    pub auc: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    /// Over all `(query, shard)` pairs.
    pub pooled: ClassifierMetrics,
    pub per_shard: Vec<ShardClassifier>,
    /// `[mean, std]` across shards.
    pub across_shards: MetricSpread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecall {
    pub source: String,
    pub mean_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub threshold: f64,
    pub per_query: Vec<PerQuery>,
    pub aggregate: Aggregate,
    pub classifier: ClassifierSummary,
    /// Recall when querying a single shard alone, plus the routed recall.
    pub recall_by_shard: Vec<SourceRecall>,
}

/// Wall-clock figures; kept apart from [`EvalReport`] so reports stay
/// reproducible byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50_ns: u64,
    pub p95_ns: u64,
    pub batch32_inference_ns: u64,
}

/// Nearest-rank percentile.
pub fn percentile(values: &[u64], pct: f64) -> u64 {
    if values.is_empty() {
        return 0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

fn mean_std(values: &[f64]) -> [f64; 2] {
    if values.is_empty() {
        return [0.0, 0.0];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    [mean, var.sqrt()]
}

/// Fold traces into a report. Pure: same traces, same report.
pub fn build_report(traces: &[QueryTrace], k: usize, threshold: f64) -> Result<EvalReport> {
    let first = traces.first().ok_or_else(|| Error::InvalidArgument("no traces".into()))?;
    let shard_ids = first.shard_ids.clone();
    let n = shard_ids.len();
    for t in traces {
        if t.shard_ids != shard_ids || t.probabilities.len() != n || t.labels.len() != n || t.truth_per_shard.len() != n {
            return Err(Error::InvalidArgument(format!(
                "trace for query {} has an inconsistent shard layout",
                t.query_id
            )));
        }
    }
    let aggregate = efficiency_summary(traces, n)?;

    let pooled: Vec<(f64, bool)> = traces
        .iter()
        .flat_map(|t| t.probabilities.iter().copied().zip(t.labels.iter().copied()))
        .collect();
    let per_shard: Vec<ShardClassifier> = shard_ids
        .iter()
        .enumerate()
        .map(|(i, &shard_id)| {
            let preds: Vec<(f64, bool)> = traces.iter().map(|t| (t.probabilities[i], t.labels[i])).collect();
            Ok(ShardClassifier {
                shard_id,
                positives: preds.iter().filter(|p| p.1).count(),
                metrics: classifier_metrics(&preds, threshold)?,
            })
        })
        .collect::<Result<_>>()?;
    let column = |f: fn(&ClassifierMetrics) -> f64| -> Vec<f64> { per_shard.iter().map(|s| f(&s.metrics)).collect() };
    let aucs: Vec<f64> = per_shard.iter().filter_map(|s| s.metrics.auc).collect();
    let across_shards = MetricSpread {
        accuracy: mean_std(&column(|m| m.accuracy)),
        precision: mean_std(&column(|m| m.precision)),
        recall: mean_std(&column(|m| m.recall)),
        f1: mean_std(&column(|m| m.f1)),
        auc: (!aucs.is_empty()).then(|| mean_std(&aucs)),
    };

    let mut recall_by_shard: Vec<SourceRecall> = shard_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| SourceRecall {
            source: format!("shard_{id}"),
            mean_recall: traces
                .iter()
                .map(|t| t.truth_per_shard[i] as f64 / t.truth_per_shard.iter().sum::<usize>().max(1) as f64)
                .sum::<f64>()
                / traces.len() as f64,
        })
        .collect();
    recall_by_shard.push(SourceRecall {
        source: "routed".into(),
        mean_recall: aggregate.mean_recall,
    });

    Ok(EvalReport {
        k,
        threshold,
        per_query: traces
            .iter()
            .map(|t| PerQuery {
                query_id: t.query_id,
                recall: t.recall,
                m: t.m,
                bytes_moved: t.bytes_moved,
            })
            .collect(),
        aggregate,
        classifier: ClassifierSummary {
            pooled: classifier_metrics(&pooled, threshold)?,
            per_shard,
            across_shards,
        },
        recall_by_shard,
    })
}

pub const SUMMARY_COLUMNS: [&str; 19] = [
    "k",
    "threshold",
    "n_queries",
    "n_shards",
    "mean_recall",
    "queries_naive",
    "queries_oracle",
    "queries_routed",
    "query_reduction_pct",
    "bytes_naive",
    "bytes_oracle",
    "bytes_routed",
    "volume_reduction_pct",
    "auc",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "fallback_queries",
];
pub const RECALL_BY_SHARD_COLUMNS: [&str; 2] = ["source", "mean_recall"];
pub const QUERIES_BY_STRATEGY_COLUMNS: [&str; 4] = ["strategy", "total_queries", "total_bytes", "mean_recall"];

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(header)?;
        for row in rows {
            csv.write_record(&row)?;
        }
        csv.flush().map_err(|e| Error::io(path, e))
    })
}

/// Write `report.json`, `summary.csv`, `recall_by_shard.csv` and
/// `queries_by_strategy.csv` into `out_dir`.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let json = out_dir.join("report.json");
    write_atomic(&json, |w| {
        serde_json::to_writer_pretty(&mut *w, report)?;
        w.write_all(b"\n").map_err(|e| Error::io(&json, e))
    })?;

    let a = &report.aggregate;
    let c = &report.classifier.pooled;
    let summary = out_dir.join("summary.csv");
    write_csv(
        &summary,
        &SUMMARY_COLUMNS,
        vec![vec![
            report.k.to_string(),
            report.threshold.to_string(),
            a.n_queries.to_string(),
            a.n_shards.to_string(),
            a.mean_recall.to_string(),
            a.total_queries_naive.to_string(),
            a.total_queries_oracle.to_string(),
            a.total_queries_routed.to_string(),
            a.query_reduction_pct.to_string(),
            a.bytes_naive.to_string(),
            a.bytes_oracle.to_string(),
            a.bytes_routed.to_string(),
            a.volume_reduction_pct.to_string(),
            c.auc.map_or_else(|| "NA".to_string(), |v| v.to_string()),
            c.accuracy.to_string(),
            c.precision.to_string(),
            c.recall.to_string(),
            c.f1.to_string(),
            a.fallback_queries.to_string(),
        ]],
    )?;

    let by_shard = out_dir.join("recall_by_shard.csv");
    write_csv(
        &by_shard,
        &RECALL_BY_SHARD_COLUMNS,
        report
            .recall_by_shard
            .iter()
            .map(|r| vec![r.source.clone(), r.mean_recall.to_string()])
            .collect(),
    )?;

    let by_strategy = out_dir.join("queries_by_strategy.csv");
    write_csv(
        &by_strategy,
        &QUERIES_BY_STRATEGY_COLUMNS,
        vec![
            vec!["naive".into(), a.total_queries_naive.to_string(), a.bytes_naive.to_string(), "1".into()],
            vec![
                "oracle".into(),
                a.total_queries_oracle.to_string(),
                a.bytes_oracle.to_string(),
                a.oracle_mean_recall.to_string(),
            ],
            vec![
                "predicted".into(),
                a.total_queries_routed.to_string(),
                a.bytes_routed.to_string(),
                a.mean_recall.to_string(),
            ],
        ],
    )?;
    Ok(vec![json, summary, by_shard, by_strategy])
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ScoredHit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn result(query_id: u64, keys: &[(u32, u64)]) -> FederatedResult {
        FederatedResult {
            query_id,
            hits: keys
                .iter()
                .map(|&(shard_id, vector_id)| ScoredHit { shard_id, vector_id, distance: 0.0 })
                .collect(),
            shards_queried: 1,
            embeddings_returned: keys.len(),
            bytes_moved: 0,
        }
    }

    fn pairwise_auc(preds: &[(f64, bool)]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for &(p, yp) in preds {
            if !yp {
                continue;
            }
            for &(n, yn) in preds {
                if yn {
                    continue;
                }
                den += 1.0;
                num += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        num / den
    }

    #[test]
    fn recall_examples() {
        let truth = result(1, &(0..10).map(|i| (0, i)).collect::<Vec<_>>());
        assert_eq!(retrieval_recall(&truth, &truth).unwrap(), 1.0);
        let half: Vec<_> = (0..5).map(|i| (0, i)).chain((0..5).map(|i| (1, i))).collect();
        assert_eq!(retrieval_recall(&result(1, &half), &truth).unwrap(), 0.5);
        assert!(matches!(
            retrieval_recall(&result(2, &half), &truth),
            Err(Error::QueryMismatch(2, 1))
        ));
    }

    #[test]
    fn perfect_and_tied_classifiers() {
        let perfect = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        let m = classifier_metrics(&perfect, 0.5).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1, m.auc), (1.0, 1.0, 1.0, 1.0, Some(1.0)));

        let tied = [(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(classifier_metrics(&tied, 0.5).unwrap().auc, Some(0.5));

        let none_positive = [(0.1, true), (0.2, false)];
        let m = classifier_metrics(&none_positive, 0.5).unwrap();
        assert!(!m.precision_defined);
        assert_eq!((m.precision, m.f1), (0.0, 0.0));

        assert_eq!(classifier_metrics(&[(0.3, true)], 0.5).unwrap().auc, None);
        assert!(classifier_metrics(&[], 0.5).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let preds: Vec<(f64, bool)> = (0..1000)
            .map(|_| {
                // Coarse scores so ties are common.
                let y = rng.random_bool(0.3);
                let s = (rng.random_range(0..20) as f64 + if y { 4.0 } else { 0.0 }) / 24.0;
                (s, y)
            })
            .collect();
        assert!((auc(&preds).unwrap() - pairwise_auc(&preds)).abs() < 1e-9);
    }

    fn trace(m: usize, oracle_m: usize, n: usize) -> QueryTrace {
        QueryTrace {
            query_id: 0,
            shard_ids: (0..n as u32).collect(),
            probabilities: vec![0.5; n],
            labels: (0..n).map(|i| i < oracle_m).collect(),
            selected: (0..n).map(|i| i < m).collect(),
            fallback_used: false,
            m,
            recall: 1.0,
            bytes_moved: 100 * m as u64,
            naive_m: n,
            naive_bytes: 100 * n as u64,
            oracle_m,
            oracle_bytes: 100 * oracle_m as u64,
            oracle_recall: 1.0,
            truth_per_shard: (0..n).map(|i| usize::from(i < oracle_m)).collect(),
            latency_ns: 0,
        }
    }

    #[test]
    fn efficiency_arithmetic() {
        let all: Vec<QueryTrace> = (0..4).map(|_| trace(5, 1, 5)).collect();
        let a = efficiency_summary(&all, 5).unwrap();
        assert_eq!(a.query_reduction_pct, 0.0);
        assert_eq!(a.volume_reduction_pct, 0.0);

        let mut ts: Vec<QueryTrace> = (0..10).map(|_| trace(2, 1, 10)).collect();
        ts[0] = trace(7, 1, 10);
        let a = efficiency_summary(&ts, 10).unwrap();
        assert_eq!(a.total_queries_routed, 25);
        assert_eq!(a.query_reduction_pct, 75.0);
        assert_eq!(a.oracle_query_reduction_pct, 90.0);
        assert!(a.sandwich_holds());
        assert!(efficiency_summary(&[], 10).is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 95.0), 95);
        assert_eq!(percentile(&[7], 95.0), 7);
    }

    #[test]
    fn report_files_round_trip() {
        let ts: Vec<QueryTrace> = (0..6u64)
            .map(|i| {
                let mut t = trace(2 + (i as usize % 2), 1, 4);
                t.query_id = i;
                t.probabilities = vec![0.9, 0.2 + 0.1 * i as f64, 0.1, 0.05];
                t
            })
            .collect();
        let report = build_report(&ts, 10, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&report, dir.path()).unwrap();
        assert_eq!(read_report(&files[0]).unwrap(), report);

        let summary = std::fs::read_to_string(&files[1]).unwrap();
        for line in summary.lines() {
            assert_eq!(line.split(',').count(), SUMMARY_COLUMNS.len());
        }
        let by_shard = std::fs::read_to_string(&files[2]).unwrap();
        assert_eq!(by_shard.lines().count(), 1 + 4 + 1);
        let by_strategy = std::fs::read_to_string(&files[3]).unwrap();
        assert!(by_strategy.contains("naive,24,2400,1"));

        let path = dir.path().join("traces.jsonl");
        write_traces(&path, &ts).unwrap();
        assert_eq!(read_traces(&path).unwrap(), ts);
        let again = build_report(&read_traces(&path).unwrap(), 10, 0.5).unwrap();
        assert_eq!(again, report);
    }
}
