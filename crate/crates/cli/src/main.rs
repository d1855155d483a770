//! `relabel`: evaluate retrieval-augmented intent classification with
//! optional label refinement, from the command line.
//!
//! Configuration precedence: CLI flags > config file (`--config`) >
//! environment (`RELABEL_ENDPOINT`, `RELABEL_EMBED_ENDPOINT`,
//! `RELABEL_CACHE_DIR`, `RELABEL_TIMESTAMP`) > built-in defaults. API keys
//! are read only from `RELABEL_API_KEY` / `RELABEL_EMBED_API_KEY` and never
//! appear in configs or reports.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use relabel_core::config::{RunConfig, RunMode};
use relabel_core::corpus::DataFormat;
use relabel_core::eval::{centi_pct_from_counts, format_centi_pct};
use relabel_core::gateway::ResponseCache;
use relabel_core::pipeline::{Pipeline, RunArtifacts};
use relabel_core::refine::LabelMapping;

#[derive(Parser, Debug)]
#[command(
    name = "relabel",
    version,
    about = "Retrieval-augmented intent classification with dynamic label refinement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a full evaluation and write the report and audit trail
    Evaluate(ConfigArgs),
    /// Produce a static label mapping for reuse across evaluate runs
    Refine(ConfigArgs),
    /// Report label-space similarity and lint a mapping's refined names
    Analyze(ConfigArgs),
    /// Evaluate across several k values and write one CSV row per k
    Sweep(SweepArgs),
    /// Inspect or clear the response cache
    Cache(CacheArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON config file mirroring the run configuration fields
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory holding train.<ext> and test.<ext>
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset file format
    #[arg(long, value_parser = parse_format)]
    format: Option<DataFormat>,
    /// raw | cot | refined-dynamic | refined-static | refined-generic
    #[arg(long, value_parser = parse_mode)]
    mode: Option<RunMode>,
    /// Retrieved examples per query
    #[arg(long)]
    k: Option<usize>,
    /// Training examples kept per intent
    #[arg(long)]
    shots: Option<usize>,
    /// Sampling seed
    #[arg(long)]
    seed: Option<u64>,
    /// Model used for label refinement
    #[arg(long)]
    refiner_model: Option<String>,
    /// Model used for classification
    #[arg(long)]
    classifier_model: Option<String>,
    /// Chat backend: mock | mock:echo | mock:script=FILE | URL
    #[arg(long)]
    endpoint: Option<String>,
    /// Embeddings: hash | hash:dim=..,seed=.. | store:FILE | URL[#model]
    #[arg(long)]
    embed_endpoint: Option<String>,
    /// Directory for the response cache (persists across runs)
    #[arg(long)]
    cache_dir: Option<String>,
    /// Directory for report/audit/mapping artifacts
    #[arg(long)]
    out: Option<String>,
    /// Maximum in-flight backend calls
    #[arg(long)]
    concurrency: Option<usize>,
    /// Static label mapping JSON to reuse (refined-static) or lint (analyze)
    #[arg(long, value_name = "FILE")]
    mapping: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated k values
    #[arg(long, default_value = "10,20,30,40", value_name = "K,K,...")]
    ks: String,
}

#[derive(Args, Debug)]
struct CacheArgs {
    #[command(subcommand)]
    command: CacheCommand,
    /// Cache directory (defaults to RELABEL_CACHE_DIR)
    #[arg(long, global = true)]
    cache_dir: Option<String>,
}

#[derive(Subcommand, Debug)]
enum CacheCommand {
    /// Print entry count, file size, and location
    Stats,
    /// Remove all cached responses
    Clear,
}

fn parse_mode(s: &str) -> Result<RunMode, String> {
    RunMode::from_str(s).map_err(|e| e.to_string())
}

fn parse_format(s: &str) -> Result<DataFormat, String> {
    match s {
        "csv" => Ok(DataFormat::Csv),
        "jsonl" => Ok(DataFormat::Jsonl),
        other => Err(format!("unknown format {other:?}; expected csv or jsonl")),
    }
}

/// Layer the configuration sources: defaults, then environment, then the
/// config file (only the keys it actually sets), then CLI flags.
fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut config = RunConfig::default();

    if let Ok(v) = std::env::var("RELABEL_ENDPOINT") {
        config.endpoint_spec = v;
    }
    if let Ok(v) = std::env::var("RELABEL_EMBED_ENDPOINT") {
        config.embed_spec = v;
    }
    if let Ok(v) = std::env::var("RELABEL_CACHE_DIR") {
        config.cache_dir = Some(v);
    }
    if let Ok(v) = std::env::var("RELABEL_TIMESTAMP") {
        config.timestamp = Some(v);
    }

    if let Some(path) = &args.config {
        config = apply_config_file(config, path)
            .with_context(|| format!("config file {}", path.display()))?;
    }

    macro_rules! override_from {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = &args.$flag {
                config.$field = v.clone();
            })*
        };
    }
    override_from! {
        dataset => dataset,
        refiner_model => refiner_model,
        classifier_model => classifier_model,
        endpoint => endpoint_spec,
        embed_endpoint => embed_spec,
    }
    if let Some(v) = args.format {
        config.format = v;
    }
    if let Some(v) = args.mode {
        config.mode = v;
    }
    if let Some(v) = args.k {
        config.k = v;
    }
    if let Some(v) = args.shots {
        config.shots = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = &args.cache_dir {
        config.cache_dir = Some(v.clone());
    }
    if let Some(v) = &args.out {
        config.out = Some(v.clone());
    }
    if let Some(v) = args.concurrency {
        config.concurrency = v;
    }
    if let Some(v) = &args.mapping {
        config.mapping_file = Some(v.clone());
    }
    Ok(config)
}

/// Overlay only the keys present in the file, so a partial config file does
/// not silently reset everything else to defaults.
fn apply_config_file(base: RunConfig, path: &Path) -> Result<RunConfig> {
    let raw = std::fs::read_to_string(path)?;
    let overlay: serde_json::Value = serde_json::from_str(&raw)?;
    let serde_json::Value::Object(overlay) = overlay else {
        bail!("expected a JSON object of run configuration fields");
    };
    let mut merged = serde_json::to_value(&base)?;
    let serde_json::Value::Object(ref mut target) = merged else {
        unreachable!("RunConfig serializes to an object");
    };
    for (key, value) in overlay {
        if !target.contains_key(&key) {
            bail!("unknown configuration key {key:?}");
        }
        target.insert(key, value);
    }
    Ok(serde_json::from_value(merged)?)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Refine(args) => cmd_refine(&args),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Cache(args) => cmd_cache(&args),
    };
    match outcome {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

fn out_dir(config: &RunConfig) -> Option<PathBuf> {
    config.out.as_ref().map(PathBuf::from)
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_text(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// One comparison-ready line: dataset, mode, k, accuracy, retrieval quality,
/// and failure counts.
fn summary_row(artifacts: &RunArtifacts) -> String {
    let r = &artifacts.report;
    format!(
        "{dataset}  {mode}  k={k}  accuracy {acc} ({correct}/{n})  recall@{k} {recall}  \
         avg_intents {avg:.2}  failed_parse {fp}  refinement_failed {rf}",
        dataset = r.dataset,
        mode = r.mode,
        k = r.k,
        acc = format_centi_pct(centi_pct_from_counts(r.n_correct, r.n_queries)),
        correct = r.n_correct,
        n = r.n_queries,
        recall = format_centi_pct((r.recall_at_k * 10_000.0).round() as i64),
        avg = r.avg_intents_per_retrieval,
        fp = r.n_failed_parse,
        rf = r.n_refinement_failed,
    )
}

fn cmd_evaluate(args: &ConfigArgs) -> Result<()> {
    let config = resolve_config(args)?;
    let pipeline = Pipeline::build(config)?;
    let artifacts = pipeline.run()?;

    println!("{}", summary_row(&artifacts));
    if artifacts.report.n_failed_parse > 0 {
        eprintln!(
            "note: {} of {} queries failed to produce a usable prediction (scored incorrect)",
            artifacts.report.n_failed_parse, artifacts.report.n_queries
        );
    }

    if let Some(dir) = out_dir(pipeline.config()) {
        let report_path = write_json(&dir, "report.json", &artifacts.report)?;
        write_text(&dir, "audit.jsonl", &artifacts.audit_jsonl)?;
        if let Some(mapping) = &artifacts.static_mapping {
            write_json(&dir, "mapping.json", mapping)?;
        }
        println!("wrote {}", report_path.display());
    }
    log_gateway_stats(&pipeline);
    Ok(())
}

fn cmd_refine(args: &ConfigArgs) -> Result<()> {
    let mut config = resolve_config(args)?;
    match config.mode {
        RunMode::RefinedStatic => {}
        _ if args.mode.is_some() => {
            bail!("refine produces a static mapping; --mode must be refined-static")
        }
        _ => config.mode = RunMode::RefinedStatic,
    }
    let pipeline = Pipeline::build(config)?;
    let mapping = pipeline
        .static_mapping()
        .expect("static mode always prepares a mapping");

    let renamed = mapping
        .entries
        .iter()
        .filter(|(old, new)| old != new)
        .count();
    println!(
        "static mapping over {} intents ({} renamed, {} kept)",
        mapping.entries.len(),
        renamed,
        mapping.entries.len() - renamed
    );
    match out_dir(pipeline.config()) {
        Some(dir) => {
            let path = write_json(&dir, "mapping.json", mapping)?;
            println!("wrote {}", path.display());
        }
        None => println!("{}", serde_json::to_string_pretty(mapping)?),
    }
    log_gateway_stats(&pipeline);
    Ok(())
}

fn cmd_analyze(args: &ConfigArgs) -> Result<()> {
    let config = resolve_config(args)?;
    let mapping = match &config.mapping_file {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .with_context(|| format!("mapping file {path}"))?;
            Some(serde_json::from_str::<LabelMapping>(&raw)?)
        }
        None => None,
    };
    let pipeline = Pipeline::build(config)?;
    let artifacts = pipeline.analyze(mapping.as_ref())?;

    println!(
        "original labels: {} intents, avg pairwise similarity {:.4}",
        artifacts.original.labels.len(),
        artifacts.original.avg_pairwise
    );
    if let Some(refined) = &artifacts.refined {
        println!(
            "refined labels:  {} intents, avg pairwise similarity {:.4} ({:+.4} vs original)",
            refined.labels.len(),
            refined.avg_pairwise,
            refined.avg_pairwise - artifacts.original.avg_pairwise
        );
    }
    if artifacts.lint.is_empty() {
        if mapping.is_some() {
            println!("lint: no findings");
        }
    } else {
        println!("lint: {} finding(s)", artifacts.lint.len());
        for finding in &artifacts.lint {
            println!(
                "  {:?}: {} -> {} ({})",
                finding.kind, finding.original, finding.refined, finding.detail
            );
        }
    }

    if let Some(dir) = out_dir(pipeline.config()) {
        write_json(&dir, "similarity_original.json", &artifacts.original)?;
        if let Some(refined) = &artifacts.refined {
            write_json(&dir, "similarity_refined.json", refined)?;
        }
        if mapping.is_some() {
            write_json(&dir, "lint.json", &artifacts.lint)?;
        }
        println!("wrote similarity report(s) to {}", dir.display());
    }
    Ok(())
}

fn sweep_csv(runs: &[RunArtifacts]) -> String {
    let mut csv = String::from(
        "dataset,mode,k,n_queries,n_correct,accuracy,recall_at_k,avg_intents_per_retrieval,\
         n_failed_parse,n_refinement_failed\n",
    );
    for run in runs {
        let r = &run.report;
        csv.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{},{}\n",
            r.dataset,
            r.mode,
            r.k,
            r.n_queries,
            r.n_correct,
            r.accuracy,
            r.recall_at_k,
            r.avg_intents_per_retrieval,
            r.n_failed_parse,
            r.n_refinement_failed,
        ));
    }
    csv
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let ks: Vec<usize> = args
        .ks
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| anyhow::anyhow!("bad k value {s:?} in --ks"))
        })
        .collect::<Result<_>>()?;
    if ks.is_empty() || ks.iter().any(|&k| k < 1) {
        bail!("--ks needs at least one k >= 1");
    }

    let config = resolve_config(&args.config)?;
    let pipeline = Pipeline::build(config)?;
    let runs = pipeline.sweep_k(&ks)?;
    for run in &runs {
        println!("{}", summary_row(run));
    }
    if let Some(dir) = out_dir(pipeline.config()) {
        let path = write_text(&dir, "sweep.csv", &sweep_csv(&runs))?;
        println!("wrote {}", path.display());
    }
    log_gateway_stats(&pipeline);
    Ok(())
}

fn cmd_cache(args: &CacheArgs) -> Result<()> {
    let dir = args
        .cache_dir
        .clone()
        .or_else(|| std::env::var("RELABEL_CACHE_DIR").ok())
        .context("--cache-dir (or RELABEL_CACHE_DIR) is required")?;
    let cache = ResponseCache::open(Path::new(&dir))?;
    match args.command {
        CacheCommand::Stats => {
            let stats = cache.stats();
            println!(
                "cache at {}: {} entries, {} bytes",
                dir, stats.entries, stats.file_bytes
            );
        }
        CacheCommand::Clear => {
            let before = cache.len();
            cache.clear()?;
            println!("cleared {before} cached responses from {dir}");
        }
    }
    Ok(())
}

fn log_gateway_stats(pipeline: &Pipeline) {
    let stats = pipeline.gateway_stats();
    log::info!(
        "gateway: {} backend calls, {} retries, {} cache hits, {} misses",
        stats.backend_calls,
        stats.retries,
        stats.cache_hits,
        stats.cache_misses
    );
}
