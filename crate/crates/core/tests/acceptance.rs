//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p fedvec-core --test acceptance`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedvec_core::dataset::{generate_synthetic, kmeans_shard, QuerySplit, SyntheticSpec};
use fedvec_core::federation::{bytes_moved, summaries};
use fedvec_core::metrics::{auc, read_report, read_traces, QueryTrace};
use fedvec_core::pipeline::{cmd_eval, cmd_label, cmd_synth, cmd_train, load_corpus, read_labels, RunConfig};
use fedvec_core::router::network::{backward, forward_batch, Params, TENSOR_NAMES};
use fedvec_core::router::{self, HIDDEN1, HIDDEN2};
use fedvec_core::store::{squared_distance, VectorFile};
use fedvec_core::{federated_search, RoutingDecision, RoutingFeatures, ScoredHit, ShardIndex};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and budgets.
const MERGE_BUDGET: Duration = Duration::from_secs(60);
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-3;
/// Denominator floor for the relative error when both gradients vanish.
const FD_FLOOR: f64 = 1e-6;
const GRAD_BATCHES: usize = 20;
const GRAD_PARAMS_PER_TENSOR: usize = 6;
const GRAD_BATCH_ROWS: usize = 16;
const MIN_AUC: f64 = 0.90;
const MIN_RECALL: f64 = 0.90;
const MAX_ROUTED_SHARE: f64 = 0.50;
const PCT_TOL: f64 = 1e-9;
const LATENCY_BUDGET: Duration = Duration::from_millis(5);
const LATENCY_RUNS: usize = 100;
const SCALER_TOL: f64 = 1e-6;
const LAYER_NORM_TOL: f64 = 1e-6;
const AUC_TOL: f64 = 1e-9;
const AUC_DATASETS: usize = 20;
const AUC_MAX_POINTS: usize = 2000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

type Checked = Result<Outcome, Box<dyn std::error::Error>>;

fn merge_fixture() -> Result<(Vec<ShardIndex>, VectorFile), Box<dyn std::error::Error>> {
    let spec = SyntheticSpec {
        points_per_cluster: [900, 1100],
        size_skew: 0.0,
        n_queries: 1000,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    let shards = kmeans_shard(&data.corpus, 10, 12)?;
    Ok((shards, data.queries))
}

/// Brute force over the concatenation of every shard.
fn centralized_top_k(shards: &[ShardIndex], query: &[f32], k: usize) -> Vec<ScoredHit> {
    let mut all: Vec<(f64, u32, u64)> = shards
        .iter()
        .flat_map(|s| s.iter().map(move |(id, row)| (squared_distance(query, row), s.shard_id(), id)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter()
        .take(k)
        .map(|(distance, shard_id, vector_id)| ScoredHit { shard_id, vector_id, distance })
        .collect()
}

fn merge_equivalence(shards: &[ShardIndex], queries: &VectorFile) -> Checked {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let ids: Vec<u32> = shards.iter().map(ShardIndex::shard_id).collect();
    let start = Instant::now();
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    pool.install(|| -> Result<(), fedvec_core::Error> {
        for k in [10, 32] {
            for (qid, q) in queries.rows() {
                let got = federated_search(&RoutingDecision::all(qid, ids.clone()), shards, q, k)?;
                compared += 1;
                if got.hits != centralized_top_k(shards, q, k) {
                    mismatches += 1;
                }
            }
        }
        Ok(())
    })?;
    let elapsed = start.elapsed();
    Ok(outcome(
        mismatches == 0 && elapsed < MERGE_BUDGET,
        format!(
            "{compared} searches over {} shards / {} vectors, {mismatches} mismatches, {:.1} s (budget {} s)",
            shards.len(),
            shards.iter().map(ShardIndex::len).sum::<usize>(),
            elapsed.as_secs_f64(),
            MERGE_BUDGET.as_secs()
        ),
    ))
}

fn oracle_routing_recall(shards: &[ShardIndex], queries: &VectorFile) -> Checked {
    let ids: Vec<u32> = shards.iter().map(ShardIndex::shard_id).collect();
    let k = 10;
    let mut recall_sum = 0.0;
    let mut n = 0usize;
    for (qid, q) in queries.rows() {
        let truth = centralized_top_k(shards, q, k);
        let relevant: BTreeSet<u32> = truth.iter().map(|h| h.shard_id).collect();
        let got = federated_search(&RoutingDecision::only(qid, ids.clone(), &relevant), shards, q, k)?;
        let truth_keys: BTreeSet<(u32, u64)> = truth.iter().map(ScoredHit::key).collect();
        let hit = got.hits.iter().filter(|h| truth_keys.contains(&h.key())).count();
        recall_sum += hit as f64 / truth.len() as f64;
        n += 1;
    }
    let mean = recall_sum / n as f64;
    Ok(outcome(mean == 1.0, format!("mean recall {mean} over {n} queries (k = {k}, exact)")))
}

/// ReLU gate pattern of both hidden layers. Gains and biases are applied to
/// the normalized values to recover the pre-activations.
fn relu_gates(p: &Params, x: &Array2<f64>, dropout_seed: u64) -> Vec<bool> {
    let mut d = ChaCha8Rng::seed_from_u64(dropout_seed);
    let acts = forward_batch(p, x.view(), Some((&mut d, 0.2)));
    let (xhat1, xhat2) = acts.normalized();
    let pre1 = xhat1 * &p.g1 + &p.beta1;
    let pre2 = xhat2 * &p.g2 + &p.beta2;
    pre1.iter().chain(pre2.iter()).map(|&v| v > 0.0).collect()
}

fn gradient_check() -> Checked {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let input = 2 * 32 + 3;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut failures = 0usize;
    let mut kinks = 0usize;
    for batch in 0..GRAD_BATCHES {
        let mut p = Params::init(input, HIDDEN1, HIDDEN2, &mut rng);
        // Move gains and biases off their initial values so every tensor
        // carries a non-trivial gradient.
        for t in [1, 2, 3, 5, 6, 7, 9] {
            for v in p.tensors_mut()[t].iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let x = Array2::from_shape_fn((GRAD_BATCH_ROWS, input), |_| rng.random_range(-2.0..2.0));
        let y: Array1<f64> = (0..GRAD_BATCH_ROWS).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let pos_weight = 2.0;
        let dropout_seed = 1000 + batch as u64;
        let loss = |q: &Params| {
            let mut d = ChaCha8Rng::seed_from_u64(dropout_seed);
            let acts = forward_batch(q, x.view(), Some((&mut d, 0.2)));
            backward(q, &acts, y.view(), pos_weight).0
        };
        let mut d = ChaCha8Rng::seed_from_u64(dropout_seed);
        let acts = forward_batch(&p, x.view(), Some((&mut d, 0.2)));
        let (_, grads) = backward(&p, &acts, y.view(), pos_weight);
        let base_gates = relu_gates(&p, &x, dropout_seed);
        for t in 0..TENSOR_NAMES.len() {
            let len = p.tensors()[t].len();
            let mut done = 0;
            while done < GRAD_PARAMS_PER_TENSOR {
                let i = rng.random_range(0..len);
                let mut plus = p.clone();
                plus.tensors_mut()[t][i] += FD_STEP;
                let mut minus = p.clone();
                minus.tensors_mut()[t][i] -= FD_STEP;
                // The loss is not differentiable across a gate flip; such a
                // stencil does not measure the derivative. Draw another.
                if relu_gates(&plus, &x, dropout_seed) != base_gates || relu_gates(&minus, &x, dropout_seed) != base_gates
                {
                    kinks += 1;
                    continue;
                }
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
                let an = grads.tensors()[t][i];
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(FD_FLOOR);
                worst = worst.max(err);
                checked += 1;
                done += 1;
                if err >= FD_REL_TOL {
                    failures += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    Ok(outcome(
        failures == 0 && elapsed < GRAD_BUDGET,
        format!(
            "{checked} parameters ({} per tensor x {} tensors x {GRAD_BATCHES} batches), worst rel err {worst:.2e}, \
             {failures} failures, {kinks} stencils crossing a ReLU kink redrawn, {:.1} s",
            GRAD_PARAMS_PER_TENSOR,
            TENSOR_NAMES.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

struct PipelineRun {
    config: RunConfig,
    traces: Vec<QueryTrace>,
    split: QuerySplit,
    _dir: tempfile::TempDir,
}

fn run_pipeline() -> Result<PipelineRun, Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let config = RunConfig {
        out: dir.path().join("run"),
        ..RunConfig::default()
    };
    cmd_synth(&config)?;
    cmd_label(&config)?;
    let (trained, _) = cmd_train(&config)?;
    let eval = cmd_eval(&config)?;
    Ok(PipelineRun {
        config,
        traces: eval.traces,
        split: trained.split,
        _dir: dir,
    })
}

fn routing_quality(run: &PipelineRun) -> Checked {
    let report = read_report(&run.config.eval_dir().join("report.json"))?;
    let a = &report.aggregate;
    let auc = report.classifier.pooled.auc.unwrap_or(f64::NAN);
    let share = a.total_queries_routed as f64 / a.total_queries_naive as f64;
    Ok(outcome(
        auc >= MIN_AUC && a.mean_recall >= MIN_RECALL && share <= MAX_ROUTED_SHARE,
        format!(
            "AUC {auc:.4} (>= {MIN_AUC}), recall {:.4} (>= {MIN_RECALL}), routed/naive {share:.4} (<= {MAX_ROUTED_SHARE}) over {} test queries",
            a.mean_recall, a.n_queries
        ),
    ))
}

fn sandwich(run: &PipelineRun) -> Checked {
    let traces = read_traces(&run.config.eval_dir().join("traces.jsonl"))?;
    let report = read_report(&run.config.eval_dir().join("report.json"))?;
    let dim = run.config.synthetic.dim;
    let n = traces[0].shard_ids.len() as u64;
    let q = traces.len() as u64;
    let sum = |f: &dyn Fn(&QueryTrace) -> u64| traces.iter().map(f).sum::<u64>();
    let (oracle_q, routed_q, naive_q) = (sum(&|t| t.oracle_m as u64), sum(&|t| t.m as u64), q * n);
    let (oracle_b, routed_b, naive_b) = (sum(&|t| t.oracle_bytes), sum(&|t| t.bytes_moved), sum(&|t| t.naive_bytes));
    let ordered = oracle_q <= routed_q && routed_q <= naive_q && oracle_b <= routed_b && routed_b <= naive_b;
    // Each contacted shard returns at least one embedding, so bytes are
    // bounded below by the request-plus-one-row cost.
    let accounted = traces.iter().all(|t| t.bytes_moved >= bytes_moved(dim, t.m, t.m));
    let query_pct = 100.0 * (1.0 - routed_q as f64 / naive_q as f64);
    let volume_pct = 100.0 * (1.0 - routed_b as f64 / naive_b as f64);
    let a = &report.aggregate;
    let dq = (a.query_reduction_pct - query_pct).abs();
    let dv = (a.volume_reduction_pct - volume_pct).abs();
    Ok(outcome(
        ordered && accounted && dq <= PCT_TOL && dv <= PCT_TOL,
        format!(
            "queries {oracle_q} <= {routed_q} <= {naive_q}, bytes {oracle_b} <= {routed_b} <= {naive_b}; \
             query_reduction {query_pct:.4}% (|diff| {dq:.1e}), volume_reduction {volume_pct:.4}% (|diff| {dv:.1e})"
        ),
    ))
}

fn inference_latency(run: &PipelineRun) -> Checked {
    let model = router::load(&run.config.model_path())?;
    let (shards, queries) = load_corpus(&run.config)?;
    let shard_summaries = summaries(&shards);
    let mut rows: Vec<RoutingFeatures> = Vec::with_capacity(32);
    for (_, q) in queries.rows().filter(|(id, _)| run.split.test.contains(id)) {
        rows.extend(fedvec_core::federation::routing_rows(q, &shard_summaries)?);
        if rows.len() >= 32 {
            break;
        }
    }
    rows.truncate(32);
    let mut times = Vec::with_capacity(LATENCY_RUNS);
    for _ in 0..LATENCY_RUNS {
        let start = Instant::now();
        std::hint::black_box(model.predict_batch(std::hint::black_box(&rows))?);
        times.push(start.elapsed());
    }
    times.sort();
    let median = times[LATENCY_RUNS / 2];
    Ok(outcome(
        median <= LATENCY_BUDGET,
        format!(
            "batch {} on {} shards (dim {}): median {:.3} ms over {LATENCY_RUNS} runs (budget {} ms)",
            rows.len(),
            shards.len(),
            model.dim,
            median.as_secs_f64() * 1e3,
            LATENCY_BUDGET.as_millis()
        ),
    ))
}

const COMPARED_FILES: [&str; 9] = [
    "model.rrm",
    "labels.csv",
    "split.json",
    "train_log.csv",
    "queries.fvr",
    "eval/report.json",
    "eval/summary.csv",
    "eval/recall_by_shard.csv",
    "eval/queries_by_strategy.csv",
];

fn determinism(a: &PipelineRun, b: &PipelineRun) -> Checked {
    let mut differing = Vec::new();
    for f in COMPARED_FILES {
        if std::fs::read(a.config.out.join(f))? != std::fs::read(b.config.out.join(f))? {
            differing.push(f);
        }
    }
    // Traces carry wall-clock latency; everything else must agree.
    let strip = |ts: &[QueryTrace]| -> Vec<QueryTrace> {
        ts.iter().cloned().map(|t| QueryTrace { latency_ns: 0, ..t }).collect()
    };
    let traces_equal = strip(&a.traces) == strip(&b.traces);
    if !traces_equal {
        differing.push("eval/traces.jsonl (latency excluded)");
    }
    Ok(outcome(
        differing.is_empty(),
        format!(
            "{} files byte-compared plus traces; differing: {}",
            COMPARED_FILES.len(),
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    ))
}

fn column_moments(m: &Array2<f64>) -> (f64, f64) {
    let n = m.nrows() as f64;
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    for col in m.columns() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((var.sqrt() - 1.0).abs());
    }
    (worst_mean, worst_std)
}

fn row_moments(m: &Array2<f64>) -> (f64, f64) {
    let w = m.ncols() as f64;
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for row in m.axis_iter(Axis(0)) {
        let mean = row.sum() / w;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    (worst_mean, worst_var)
}

fn normalization_invariants(run: &PipelineRun) -> Checked {
    let model = router::load(&run.config.model_path())?;
    let examples = read_labels(&run.config.labels_path())?;
    let train_rows: Vec<&RoutingFeatures> = examples
        .iter()
        .filter(|e| run.split.train.contains(&e.query_id))
        .map(|e| &e.features)
        .collect();
    let x = model.standardize(&train_rows)?;
    let (scaler_mean, scaler_std) = column_moments(&x);
    let acts = forward_batch::<ChaCha8Rng>(&model.params, x.view(), None);
    let (xhat1, xhat2) = acts.normalized();
    let (m1, v1) = row_moments(xhat1);
    let (m2, v2) = row_moments(xhat2);
    let ln_mean = m1.max(m2);
    let ln_var = v1.max(v2);
    Ok(outcome(
        scaler_mean < SCALER_TOL && scaler_std < SCALER_TOL && ln_mean < LAYER_NORM_TOL && ln_var < LAYER_NORM_TOL,
        format!(
            "{} train rows: scaler max|mean| {scaler_mean:.1e}, max|std-1| {scaler_std:.1e}; \
             layer norm max|mean| {ln_mean:.1e}, max|var-1| {ln_var:.1e} (layer 1 {v1:.1e}, layer 2 {v2:.1e}); tol {SCALER_TOL:.0e}",
            x.nrows()
        ),
    ))
}

fn pairwise_auc(preds: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = preds.iter().filter(|p| p.1).map(|p| p.0).collect();
    let neg: Vec<f64> = preds.iter().filter(|p| !p.1).map(|p| p.0).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn auc_equivalence() -> Checked {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for i in 0..AUC_DATASETS {
        let n = rng.random_range(2..=AUC_MAX_POINTS);
        let rate = rng.random_range(0.05..0.95);
        // Alternate between heavily tied and continuous scores.
        let levels = if i % 2 == 0 { rng.random_range(2..50) } else { 0 };
        let mut preds: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let y = rng.random_bool(rate);
                let raw: f64 = rng.random::<f64>() + if y { 0.3 } else { 0.0 };
                let s = if levels > 0 { (raw * levels as f64).floor() / levels as f64 } else { raw };
                (s, y)
            })
            .collect();
        preds[0].1 = true;
        preds[1].1 = false;
        let fast = auc(&preds).ok_or("single-class dataset")?;
        worst = worst.max((fast - pairwise_auc(&preds)).abs());
    }
    Ok(outcome(
        worst <= AUC_TOL,
        format!("{AUC_DATASETS} datasets of <= {AUC_MAX_POINTS} points, max |rank - pairwise| {worst:.1e} (tol {AUC_TOL:.0e})"),
    ))
}

fn report_line(id: usize, name: &str, result: Checked) -> bool {
    match result {
        Ok(o) => {
            println!("[{}] {id}. {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
            o.passed
        }
        Err(e) => {
            println!("[FAIL] {id}. {name}: error: {e}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut all = true;
    let fixture = merge_fixture();
    match &fixture {
        Ok((shards, queries)) => {
            all &= report_line(1, "merge equals centralized top-k", merge_equivalence(shards, queries));
            all &= report_line(2, "oracle routing recall", oracle_routing_recall(shards, queries));
        }
        Err(e) => {
            println!("[FAIL] 1-2. fixture: {e}");
            all = false;
        }
    }
    all &= report_line(3, "gradients match finite differences", gradient_check());

    let runs = (run_pipeline(), run_pipeline());
    match &runs {
        (Ok(a), Ok(b)) => {
            all &= report_line(4, "learned routing quality", routing_quality(a));
            all &= report_line(5, "efficiency sandwich and recomputation", sandwich(a));
            all &= report_line(6, "batch-32 inference latency", inference_latency(a));
            all &= report_line(7, "pipeline determinism", determinism(a, b));
            all &= report_line(8, "scaler and layer-norm invariants", normalization_invariants(a));
        }
        (a, b) => {
            for e in [a.as_ref().err(), b.as_ref().err()].into_iter().flatten() {
                println!("[FAIL] 4-8. pipeline run: {e}");
            }
            all = false;
        }
    }
    all &= report_line(9, "rank AUC equals pairwise oracle", auc_equivalence());

    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
