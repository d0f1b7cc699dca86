//! End-to-end commands: synthesize or import a corpus, label training
//! queries, train the router, evaluate routed retrieval, re-fold reports.
//!
//! Everything lives under one output directory:
//!
//! ```text
//! <out>/corpus/manifest.json, shard_XX.fvr   synth | import
//! <out>/queries.fvr                          synth | import
//! <out>/generator_clusters.json              synth
//! <out>/labels.csv                           label
//! <out>/model.rrm, train_log.csv, split.json train
//! <out>/eval/traces.jsonl, report files      eval | report
//! <out>/eval/latency.json                    eval
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    export_shards, generate_synthetic, import_shards, kmeans_shard, QuerySplit, Sharding, SplitSpec,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::features::RoutingFeatures;
use crate::federation::{federated_search, naive_search, route, routing_rows, summaries, RoutingDecision};
use crate::fsutil::write_atomic;
use crate::metrics::{
    build_report, percentile, read_traces, retrieval_recall, write_report, write_traces, EvalReport,
    LatencySummary, QueryTrace,
};
use crate::rng::{derive_seed, Stream};
use crate::router::{self, LabeledExample, TrainConfig};
use crate::store::{read_vectors, write_vectors, ShardIndex, VectorFile};

/// Full run configuration. Loaded from one JSON document; CLI flags
/// override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out: PathBuf,
    /// External corpus manifest for `import`.
    pub manifest: Option<PathBuf>,
    /// External query file for `import`.
    pub queries: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub k: usize,
    pub threshold: f64,
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// Top-level seed; component seeds are derived from it.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("run"),
            manifest: None,
            queries: None,
            synthetic: SyntheticSpec::default(),
            k: 10,
            threshold: router::DEFAULT_THRESHOLD,
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument("threshold must be in (0, 1)".into()));
        }
        for p in [&self.manifest, &self.queries].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::InvalidArgument(format!("{} does not exist", p.display())));
            }
        }
        self.synthetic.validate()?;
        self.train.validate()
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: derive_seed(self.seed, Stream::Data),
            ..self.synthetic.clone()
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: derive_seed(self.seed, Stream::Split),
            ..self.split.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, Stream::Init),
            ..self.train.clone()
        }
    }

    pub fn corpus_manifest(&self) -> PathBuf {
        self.out.join("corpus").join("manifest.json")
    }

    pub fn queries_path(&self) -> PathBuf {
        self.out.join("queries.fvr")
    }

    pub fn labels_path(&self) -> PathBuf {
        self.out.join("labels.csv")
    }

    pub fn model_path(&self) -> PathBuf {
        self.out.join("model.rrm")
    }

    pub fn split_path(&self) -> PathBuf {
        self.out.join("split.json")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }
}

/// Files written by a command; removed again unless the command commits.
struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self {
            paths: Vec::new(),
            committed: false,
        }
    }

    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.paths.push(path.clone());
        path
    }

    fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.paths)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        std::io::Write::write_all(w, b"\n").map_err(|e| Error::io(path, e))
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
}

fn export_tracked(out: &mut Outputs, dir: &Path, shards: &[ShardIndex]) -> Result<()> {
    for s in shards {
        out.track(dir.join(format!("shard_{:02}.fvr", s.shard_id())));
    }
    out.track(dir.join("manifest.json"));
    export_shards(dir, shards)?;
    Ok(())
}

#[derive(Serialize)]
struct GeneratorClusters<'a> {
    corpus: &'a [usize],
    queries: &'a [usize],
}

/// Generate a synthetic corpus, shard it, and write shards, manifest and
/// queries.
pub fn cmd_synth(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let spec = config.synthetic_spec();
    let data = generate_synthetic(&spec)?;
    let shards = match spec.sharding {
        Sharding::Kmeans => kmeans_shard(&data.corpus, spec.n_clusters, derive_seed(config.seed, Stream::Clustering))?,
        Sharding::Generator => {
            let mut ids = vec![Vec::new(); spec.n_clusters];
            let mut rows = vec![Vec::new(); spec.n_clusters];
            for ((id, row), &c) in data.corpus.rows().zip(&data.corpus_clusters) {
                ids[c].push(id);
                rows[c].extend_from_slice(row);
            }
            ids.into_iter()
                .zip(rows)
                .enumerate()
                .filter(|(_, (ids, _))| !ids.is_empty())
                .map(|(c, (ids, rows))| ShardIndex::from_flat(c as u32, spec.dim, ids, rows))
                .collect::<Result<_>>()?
        }
    };
    let mut out = Outputs::new();
    export_tracked(&mut out, &config.out.join("corpus"), &shards)?;
    write_vectors(&out.track(config.queries_path()), &data.queries)?;
    write_json(
        &out.track(config.out.join("generator_clusters.json")),
        &GeneratorClusters {
            corpus: &data.corpus_clusters,
            queries: &data.query_clusters,
        },
    )?;
    Ok(out.commit())
}

/// Validate an external manifest and query file and copy them into the run
/// directory in canonical form.
pub fn cmd_import(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let manifest = config
        .manifest
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("import needs a manifest path".into()))?;
    let queries_src = config
        .queries
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("import needs a query file".into()))?;
    let shards = import_shards(manifest)?;
    let queries = read_vectors(queries_src)?;
    if queries.dim != shards[0].dim() {
        return Err(Error::malformed(
            queries_src,
            format!("query dimension {} but corpus has {}", queries.dim, shards[0].dim()),
        ));
    }
    let mut out = Outputs::new();
    export_tracked(&mut out, &config.out.join("corpus"), &shards)?;
    write_vectors(&out.track(config.queries_path()), &queries)?;
    Ok(out.commit())
}

pub fn load_corpus(config: &RunConfig) -> Result<(Vec<ShardIndex>, VectorFile)> {
    let shards = import_shards(&config.corpus_manifest())?;
    let queries = read_vectors(&config.queries_path())?;
    if queries.dim != shards[0].dim() {
        return Err(Error::DimensionMismatch {
            expected: shards[0].dim(),
            actual: queries.dim,
        });
    }
    Ok((shards, queries))
}

pub fn write_labels(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let width = examples.first().map_or(0, |e| e.features.len());
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["query_id".to_string(), "shard_id".into(), "label".into()];
        header.extend((0..width).map(|i| format!("f{i}")));
        csv.write_record(&header)?;
        for e in examples {
            let mut rec = vec![e.query_id.to_string(), e.shard_id.to_string(), u8::from(e.label).to_string()];
            rec.extend(e.features.as_slice().iter().map(f64::to_string));
            csv.write_record(&rec)?;
        }
        csv.flush().map_err(|e| Error::io(path, e))
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledExample>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::malformed(path, e.to_string()))?;
    let bad = |what: &str| Error::malformed(path, format!("bad {what}"));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(bad("row width"));
        }
        let features = rec
            .iter()
            .skip(3)
            .map(|f| f.parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>>>()?;
        out.push(LabeledExample {
            query_id: rec[0].parse().map_err(|_| bad("query_id"))?,
            shard_id: rec[1].parse().map_err(|_| bad("shard_id"))?,
            label: match &rec[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("label")),
            },
            features: RoutingFeatures::new(features)?,
        });
    }
    Ok(out)
}

/// Replay every query against all shards and write one labeled row per
/// `(query, shard)` pair.
pub fn cmd_label(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let (shards, queries) = load_corpus(config)?;
    let examples = crate::federation::generate_labels(&shards, &queries, config.k)?;
    let mut out = Outputs::new();
    write_labels(&out.track(config.labels_path()), &examples)?;
    Ok(out.commit())
}

pub const TRAIN_LOG_COLUMNS: [&str; 5] = ["epoch", "train_loss", "val_accuracy", "lr_min", "lr_max"];

pub fn cmd_train(config: &RunConfig) -> Result<(router::TrainOutcome, Vec<PathBuf>)> {
    config.validate()?;
    let examples = read_labels(&config.labels_path())?;
    let mut outcome = router::train(&examples, &config.split_spec(), &config.train_config())?;
    outcome.model.threshold = config.threshold;

    let mut out = Outputs::new();
    router::save(&outcome.model, &out.track(config.model_path()))?;
    let log_path = out.track(config.out.join("train_log.csv"));
    write_atomic(&log_path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(TRAIN_LOG_COLUMNS)?;
        for e in &outcome.log {
            csv.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_accuracy.to_string(),
                e.lr_min.to_string(),
                e.lr_max.to_string(),
            ])?;
        }
        csv.flush().map_err(|e| Error::io(&log_path, e))
    })?;
    write_json(&out.track(config.split_path()), &outcome.split)?;
    Ok((outcome, out.commit()))
}

/// One acceptance-style threshold check printed by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub traces: Vec<QueryTrace>,
    pub report: EvalReport,
    pub latency: LatencySummary,
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
}

pub fn quality_checks(report: &EvalReport) -> Vec<Check> {
    let a = &report.aggregate;
    let routed_share = a.total_queries_routed as f64 / a.total_queries_naive as f64;
    let auc = report.classifier.pooled.auc.unwrap_or(f64::NAN);
    vec![
        Check { name: "routed mean recall >= 0.90", value: a.mean_recall, bound: 0.90, passed: a.mean_recall >= 0.90 },
        Check { name: "pooled AUC >= 0.90", value: auc, bound: 0.90, passed: auc >= 0.90 },
        Check { name: "routed queries <= 50% of naive", value: routed_share, bound: 0.5, passed: routed_share <= 0.5 },
        Check {
            name: "oracle <= routed <= naive (queries and bytes)",
            value: f64::from(u8::from(a.sandwich_holds())),
            bound: 1.0,
            passed: a.sandwich_holds(),
        },
    ]
}

fn median_batch_latency(model: &router::RouterModel, rows: &[RoutingFeatures], runs: usize) -> Result<u64> {
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        std::hint::black_box(model.predict_batch(std::hint::black_box(rows))?);
        times.push(start.elapsed().as_nanos() as u64);
    }
    Ok(percentile(&times, 50.0))
}

/// Evaluate naive, oracle and learned routing on the test split.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalOutcome> {
    config.validate()?;
    let (shards, queries) = load_corpus(config)?;
    let mut model = router::load(&config.model_path())?;
    model.threshold = config.threshold;
    let split: QuerySplit = read_json(&config.split_path())?;
    let shard_summaries = summaries(&shards);
    let shard_ids: Vec<u32> = shards.iter().map(ShardIndex::shard_id).collect();

    let mut traces = Vec::with_capacity(split.test.len());
    let mut batch_rows: Vec<RoutingFeatures> = Vec::with_capacity(32);
    for (query_id, query) in queries.rows().filter(|(id, _)| split.test.contains(id)) {
        let truth = naive_search(query_id, &shards, query, config.k)?;
        let relevant = truth.contributing_shards();

        let rows = routing_rows(query, &shard_summaries)?;
        let start = Instant::now();
        let probabilities = model.predict_batch(&rows)?;
        let latency_ns = start.elapsed().as_nanos() as u64;
        let decision = RoutingDecision::from_probabilities(query_id, shard_ids.clone(), probabilities, model.threshold);
        debug_assert_eq!(decision, route(&model, query_id, query, &shard_summaries)?);
        if batch_rows.len() < 32 {
            batch_rows.extend(rows.into_iter().take(32 - batch_rows.len()));
        }

        let routed = federated_search(&decision, &shards, query, config.k)?;
        let oracle = federated_search(
            &RoutingDecision::only(query_id, shard_ids.clone(), &relevant),
            &shards,
            query,
            config.k,
        )?;
        traces.push(QueryTrace {
            query_id,
            shard_ids: shard_ids.clone(),
            labels: shard_ids.iter().map(|s| relevant.contains(s)).collect(),
            truth_per_shard: shard_ids
                .iter()
                .map(|&s| truth.hits.iter().filter(|h| h.shard_id == s).count())
                .collect(),
            m: decision.m(),
            selected: decision.selected,
            fallback_used: decision.fallback_used,
            probabilities: decision.probabilities,
            recall: retrieval_recall(&routed, &truth)?,
            bytes_moved: routed.bytes_moved,
            naive_m: truth.shards_queried,
            naive_bytes: truth.bytes_moved,
            oracle_m: oracle.shards_queried,
            oracle_bytes: oracle.bytes_moved,
            oracle_recall: retrieval_recall(&oracle, &truth)?,
            latency_ns,
        });
    }
    if traces.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    while batch_rows.len() < 32 {
        let i = batch_rows.len() % shard_summaries.len();
        batch_rows.push(batch_rows[i].clone());
    }

    let report = build_report(&traces, config.k, model.threshold)?;
    let per_query_ns: Vec<u64> = traces.iter().map(|t| t.latency_ns).collect();
    let latency = LatencySummary {
        p50_ns: percentile(&per_query_ns, 50.0),
        p95_ns: percentile(&per_query_ns, 95.0),
        batch32_inference_ns: median_batch_latency(&model, &batch_rows, 100)?,
    };

    let dir = config.eval_dir();
    let mut out = Outputs::new();
    write_traces(&out.track(dir.join("traces.jsonl")), &traces)?;
    for p in ["report.json", "summary.csv", "recall_by_shard.csv", "queries_by_strategy.csv"] {
        out.track(dir.join(p));
    }
    write_report(&report, &dir)?;
    write_json(&out.track(dir.join("latency.json")), &latency)?;
    Ok(EvalOutcome {
        checks: quality_checks(&report),
        traces,
        report,
        latency,
        files: out.commit(),
    })
}

/// Re-fold an existing trace file into report files.
pub fn cmd_report(config: &RunConfig, traces_path: &Path, out_dir: &Path) -> Result<(EvalReport, Vec<PathBuf>)> {
    let traces = read_traces(traces_path)?;
    let report = build_report(&traces, config.k, config.threshold)?;
    let files = write_report(&report, out_dir)?;
    Ok((report, files))
}
