//! `fedvec`: run the federated-routing pipeline from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedvec_core::pipeline::{self, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "fedvec", version, about = "Federated vector search with a learned shard router")]
struct Cli {
    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Results per query (top-k).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Router decision threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Top-level seed for every random substream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic sharded corpus and query set.
    Synth,
    /// Import precomputed shard embeddings and queries.
    Import {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Label every (query, shard) pair by replaying queries against all shards.
    Label,
    /// Train the router on the labeled pairs.
    Train,
    /// Compare naive, oracle and learned routing on the test split.
    Eval,
    /// Rebuild report files from a trace file.
    Report {
        /// Defaults to `<out>/eval/traces.jsonl`.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Defaults to `<out>/eval`.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(k) = cli.k {
        config.k = k;
    }
    if let Some(t) = cli.threshold {
        config.threshold = t;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Command::Import { manifest, queries } = &cli.command {
        if manifest.is_some() {
            config.manifest = manifest.clone();
        }
        if queries.is_some() {
            config.queries = queries.clone();
        }
    }
    Ok(config)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FEDVEC_THREADS") {
        let n: usize = v.parse().with_context(|| format!("FEDVEC_THREADS={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let config = resolve_config(&cli)?;
    match &cli.command {
        Command::Synth => print_files(&pipeline::cmd_synth(&config)?),
        Command::Import { .. } => print_files(&pipeline::cmd_import(&config)?),
        Command::Label => print_files(&pipeline::cmd_label(&config)?),
        Command::Train => {
            let (outcome, files) = pipeline::cmd_train(&config)?;
            print_files(&files);
            println!(
                "best epoch {} val accuracy {:.4} (pos_weight {:.3})",
                outcome.best_epoch, outcome.best_val_accuracy, outcome.pos_weight
            );
        }
        Command::Eval => {
            let outcome = pipeline::cmd_eval(&config)?;
            print_files(&outcome.files);
            let a = &outcome.report.aggregate;
            println!(
                "queries {} | recall {:.4} | shards/query {:.2} of {} | query reduction {:.1}% | volume reduction {:.1}%",
                a.n_queries,
                a.mean_recall,
                a.total_queries_routed as f64 / a.n_queries as f64,
                a.n_shards,
                a.query_reduction_pct,
                a.volume_reduction_pct,
            );
            println!(
                "router latency p50 {} ns, p95 {} ns, batch-32 {} ns",
                outcome.latency.p50_ns, outcome.latency.p95_ns, outcome.latency.batch32_inference_ns
            );
            for c in &outcome.checks {
                println!("[{}] {} (value {:.4})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value);
            }
        }
        Command::Report { traces, report_dir } => {
            let traces = traces.clone().unwrap_or_else(|| config.eval_dir().join("traces.jsonl"));
            let dir = report_dir.clone().unwrap_or_else(|| config.eval_dir());
            let (_, files) = pipeline::cmd_report(&config, &traces, &dir)?;
            print_files(&files);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
