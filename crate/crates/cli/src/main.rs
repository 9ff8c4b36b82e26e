use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use prunekit::clustering::{
    centroid_similarity_matrix, distance_length_profile, near_duplicate_centroid_groups, write_similarity_csv,
};
use prunekit::corpus::{make_validation_split, TokenizerSpec};
use prunekit::embeddings::{load_embeddings, normalize, synthetic_embed};
use prunekit::harness::{
    bin_losses, generate_synthetic_corpus, make_bootstrap_subsets, pack, packing_order, read_layout,
    write_layout, PackOrder, SyntheticCorpusSpec,
};
use prunekit::io::{open, read_f32_le, write_atomic};
use prunekit::pruning::accounting_table;
use prunekit::stats::bin_histogram;
use prunekit::{
    apply, build_cdf, ingest, kmeans, BootstrapPlan, Clustering, ClusteringConfig, CorpusManifest,
    EmbeddingMatrix, LengthBinning, PackingConfig, PipelineConfig, PruneReport, PruneSpec, Split, Strategy,
};

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nformats: manifest v1, embd v1, assignments v1, prune-report v1, packing v1"
);

#[derive(Parser)]
#[command(name = "prunekit", version, long_version = LONG_VERSION)]
#[command(about = "Length-aware pruning toolkit for code corpora")]
struct Cli {
    /// Worker threads (default: all cores). Results never depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print stdout as line-delimited JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a line-delimited JSON corpus into a manifest.
    Ingest(IngestArgs),
    /// Length CDF and bin histogram of a manifest.
    Stats(StatsArgs),
    /// Spherical k-means over document embeddings.
    Cluster(ClusterArgs),
    /// Centroid similarity and distance-vs-length diagnostics.
    Audit(AuditArgs),
    /// Apply one pruning strategy.
    Prune(PruneArgs),
    /// Draw bootstrap subsets of the train split.
    Bootstrap(BootstrapArgs),
    /// Pack documents into fixed-length context windows.
    Pack(PackArgs),
    /// Per-length-bin perplexity from per-token losses.
    BinLosses(BinLossesArgs),
    /// Accounting table over prune reports.
    Report(ReportArgs),
    /// Run a full experiment from a JSON config.
    Run(RunArgs),
    /// Generate a heavy-tailed synthetic corpus (and optional embeddings).
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerArg {
    Precomputed,
    Builtin,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "precomputed")]
    tokenizer: TokenizerArg,
    /// Tokenizer description recorded in the manifest (precomputed mode).
    #[arg(long, default_value = "precomputed")]
    tokenizer_id: String,
    /// Documents per length bin to hold out for validation.
    #[arg(long)]
    validation_quota: Option<usize>,
    #[arg(long)]
    bins: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for cdf.csv and histogram.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    bins: Option<String>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 25)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    clustering: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    strategy: Strategy,
    #[arg(long, conflicts_with = "docs_frac")]
    tokens_frac: Option<f64>,
    #[arg(long)]
    docs_frac: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    small_frac: Option<f64>,
    #[arg(long)]
    far_frac: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    clustering: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Report path; the pruned ids go next to it as `<stem>.pruned_ids.txt`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    emit_kept_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 3)]
    subsets: usize,
    #[arg(long, default_value_t = 0.5)]
    frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Id,
    Shuffle,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
        }
    }
}

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 4096)]
    context_len: usize,
    #[arg(long, value_enum, default_value = "id")]
    order: OrderArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BinLossesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    layout: PathBuf,
    /// Raw little-endian f32 values, one per packed token.
    #[arg(long)]
    losses: PathBuf,
    #[arg(long)]
    bins: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// Directory for accounting.csv and accounting.md.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50_000)]
    n_docs: usize,
    #[arg(long, default_value_t = 1.7)]
    tail_exponent: f64,
    #[arg(long, default_value_t = 32)]
    min_tokens: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Calibrate so the longest DOC_FRAC of documents hold SHARE of tokens,
    /// given as `DOC_FRAC:SHARE`.
    #[arg(long, value_parser = parse_target)]
    calibrate: Option<(f64, f64)>,
    /// Corpus records, ready for `ingest`.
    #[arg(long)]
    out: PathBuf,
    /// Also write length-coupled synthetic embeddings here.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.9)]
    coupling: f64,
    #[arg(long)]
    bins: Option<String>,
}

fn parse_target(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("expected DOC_FRAC:SHARE")?;
    let parse = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

enum Failure {
    Usage(String),
    Data(prunekit::Error),
}

impl From<prunekit::Error> for Failure {
    fn from(e: prunekit::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CmdResult = Result<Value, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn bins_arg(s: &Option<String>) -> Result<LengthBinning, Failure> {
    match s {
        Some(s) => LengthBinning::parse(s).map_err(|e| usage(format!("--bins: {e}"))),
        None => Ok(LengthBinning::default()),
    }
}

fn read_manifest(path: &Path) -> Result<CorpusManifest, Failure> {
    Ok(CorpusManifest::read_jsonl(open(path)?)?)
}

fn read_embeddings(path: &Path, manifest: &CorpusManifest) -> Result<EmbeddingMatrix, Failure> {
    let m = load_embeddings(open(path)?, manifest)?;
    Ok(if m.is_normalized() { m } else { normalize(&m)? })
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> prunekit::Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn cmd_ingest(a: &IngestArgs) -> CmdResult {
    let tokenizer = match a.tokenizer {
        TokenizerArg::Precomputed => TokenizerSpec::precomputed(a.tokenizer_id.clone()),
        TokenizerArg::Builtin => TokenizerSpec::builtin(),
    };
    if a.validation_quota.is_none() && a.bins.is_some() {
        return Err(usage("--bins only applies together with --validation-quota"));
    }
    let report = ingest(open(&a.input)?, &tokenizer)?;
    let mut manifest = report.manifest;
    if let Some(q) = a.validation_quota {
        manifest = make_validation_split(&manifest, q, &bins_arg(&a.bins)?, a.seed)?;
    }
    write_atomic(&a.out, |w| manifest.write_jsonl(w))?;
    let (val_docs, val_tokens) = manifest.split_totals(Split::Validation);
    Ok(json!({
        "docs": manifest.len(),
        "tokens": manifest.total_tokens(),
        "validation_docs": val_docs,
        "validation_tokens": val_tokens,
        "skipped_zero_tokens": report.skipped_zero_tokens,
        "duplicate_paths": report.duplicate_paths,
        "warnings": report.warnings,
    }))
}

fn cmd_stats(a: &StatsArgs) -> CmdResult {
    let bins = bins_arg(&a.bins)?;
    let manifest = read_manifest(&a.manifest)?;
    let cdf = build_cdf(&manifest)?;
    let hist = bin_histogram(&manifest, &bins);
    if let Some(dir) = &a.out_dir {
        write_atomic(&dir.join("cdf.csv"), |w| cdf.write_csv(w))?;
        write_json_file(&dir.join("histogram.json"), &hist)?;
    }
    Ok(json!({
        "docs": cdf.total_docs(),
        "tokens": cdf.total_tokens(),
        "token_share_longest_2pct_docs": cdf.token_share_of_longest_docs(0.02)?,
        "doc_share_top_20pct_tokens": cdf.doc_share_covering_top_tokens(0.20)?,
        "histogram": hist,
    }))
}

fn cmd_cluster(a: &ClusterArgs) -> CmdResult {
    let manifest = read_manifest(&a.manifest)?;
    let matrix = read_embeddings(&a.embeddings, &manifest)?;
    let config = ClusteringConfig {
        k: a.k,
        max_iters: a.max_iters,
        tol: a.tol,
        seed: a.seed,
    };
    let c = kmeans(&matrix, &config)?;
    c.save(&a.out)?;
    Ok(json!({
        "k": c.k(),
        "docs": c.len(),
        "iterations": c.objective_history().len(),
        "objective": c.objective(),
        "cluster_sizes": c.cluster_sizes(),
    }))
}

fn cmd_audit(a: &AuditArgs) -> CmdResult {
    let manifest = read_manifest(&a.manifest)?;
    let c = Clustering::load(&a.clustering)?;
    let sim = centroid_similarity_matrix(&c);
    let groups = near_duplicate_centroid_groups(&sim, a.threshold);
    let profile = distance_length_profile(&c, &manifest)?;
    write_atomic(&a.out_dir.join("centroid_similarity.csv"), |w| {
        write_similarity_csv(&sim, w)
    })?;
    write_atomic(&a.out_dir.join("distance_length.csv"), |w| profile.write_csv(w))?;
    write_json_file(&a.out_dir.join("centroid_groups.json"), &groups)?;
    Ok(json!({
        "k": c.k(),
        "spearman_distance_length": profile.spearman,
        "degenerate": profile.degenerate,
        "threshold": a.threshold,
        "groups": groups,
    }))
}

fn prune_spec(a: &PruneArgs) -> Result<PruneSpec, Failure> {
    let s = a.strategy;
    let fraction = match (s, a.tokens_frac, a.docs_frac) {
        (Strategy::None, None, None) => 0.0,
        (Strategy::ScipCombined | Strategy::Semdedup, None, None) => 0.0,
        (Strategy::ScipCombined | Strategy::Semdedup | Strategy::None, _, _) => {
            return Err(usage(format!("{s} takes no --tokens-frac/--docs-frac")))
        }
        (_, Some(p), None) if s.budget_in_tokens() => p,
        (_, None, Some(p)) if !s.budget_in_tokens() => p,
        (_, None, None) => {
            let flag = if s.budget_in_tokens() {
                "--tokens-frac"
            } else {
                "--docs-frac"
            };
            return Err(usage(format!("{s} requires {flag}")));
        }
        _ => {
            let flag = if s.budget_in_tokens() {
                "--tokens-frac"
            } else {
                "--docs-frac"
            };
            return Err(usage(format!("{s} budgets with {flag}")));
        }
    };
    if (a.small_frac.is_some() || a.far_frac.is_some()) && s != Strategy::ScipCombined {
        return Err(usage("--small-frac/--far-frac apply only to scip_combined"));
    }
    if a.epsilon.is_some() && !matches!(s, Strategy::Semdedup | Strategy::D4) {
        return Err(usage("--epsilon applies only to semdedup and d4"));
    }
    if s.needs_clustering() && a.clustering.is_none() {
        return Err(usage(format!("{s} requires --clustering")));
    }
    if s.needs_embeddings() && a.embeddings.is_none() {
        return Err(usage(format!("{s} requires --embeddings")));
    }
    let mut spec = PruneSpec::new(s, fraction).with_seed(a.seed);
    spec.epsilon = a.epsilon;
    if let Some(v) = a.small_frac {
        spec.small_frac = v;
    }
    if let Some(v) = a.far_frac {
        spec.far_frac = v;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_prune(a: &PruneArgs) -> CmdResult {
    let spec = prune_spec(a)?;
    let manifest = read_manifest(&a.manifest)?;
    let clustering = a.clustering.as_deref().map(Clustering::load).transpose()?;
    let matrix = match &a.embeddings {
        Some(p) if spec.strategy.needs_embeddings() => Some(read_embeddings(p, &manifest)?),
        _ => None,
    };
    let report = apply(&spec, &manifest, matrix.as_ref(), clustering.as_ref())?;
    write_json_file(&a.out, &report)?;
    let ids_path = sibling(&a.out, ".pruned_ids.txt");
    write_atomic(&ids_path, |w| report.write_pruned_ids(w))?;
    if let Some(kept) = &a.emit_kept_manifest {
        let survivors = manifest.without(&report.pruned_ids)?;
        write_atomic(kept, |w| survivors.write_jsonl(w))?;
    }
    Ok(json!({
        "strategy": report.strategy,
        "label": spec.label(),
        "docs_total": report.docs_total,
        "docs_pruned": report.docs_pruned,
        "tokens_total": report.tokens_total,
        "tokens_pruned": report.tokens_pruned,
        "fraction_docs": report.fraction_docs,
        "fraction_tokens": report.fraction_tokens,
        "report": a.out,
        "pruned_ids": ids_path,
    }))
}

fn cmd_bootstrap(a: &BootstrapArgs) -> CmdResult {
    let manifest = read_manifest(&a.manifest)?;
    let plan = BootstrapPlan::from_base_seed(a.subsets, a.frac, a.seed);
    plan.validate().map_err(|e| usage(e.to_string()))?;
    let subsets = make_bootstrap_subsets(&manifest, &plan)?;
    let mut files = Vec::new();
    for (i, s) in subsets.iter().enumerate() {
        let path = a.out_dir.join(format!("subset_{i}.jsonl"));
        write_atomic(&path, |w| s.write_jsonl(w))?;
        files.push(json!({
            "path": path,
            "seed": plan.seeds[i],
            "train_docs": s.train_ids().len(),
            "docs": s.len(),
            "tokens": s.total_tokens(),
        }));
    }
    Ok(json!({ "subsets": files }))
}

fn cmd_pack(a: &PackArgs) -> CmdResult {
    let manifest = read_manifest(&a.manifest)?;
    let config = PackingConfig {
        context_len: a.context_len,
        split: a.split.into(),
        ..Default::default()
    };
    let order = match a.order {
        OrderArg::Id => PackOrder::ById,
        OrderArg::Shuffle => PackOrder::Shuffle { seed: a.seed },
    };
    let ids = packing_order(&manifest, config.split, order);
    let chunks = pack(&manifest, &ids, &config)?;
    write_atomic(&a.out, |w| write_layout(&chunks, config.context_len, w))?;
    Ok(json!({
        "chunks": chunks.len(),
        "tokens": chunks.iter().map(|c| c.len()).sum::<u64>(),
        "context_len": config.context_len,
    }))
}

fn cmd_bin_losses(a: &BinLossesArgs) -> CmdResult {
    let bins = bins_arg(&a.bins)?;
    let manifest = read_manifest(&a.manifest)?;
    let chunks = read_layout(open(&a.layout)?)?;
    let losses = read_f32_le(&std::fs::read(&a.losses)?)?;
    let per_bin = bin_losses(&chunks, &losses, &bins, &manifest)?;
    if let Some(out) = &a.out {
        write_json_file(out, &per_bin)?;
    }
    Ok(json!({ "bins": per_bin }))
}

fn cmd_report(a: &ReportArgs) -> CmdResult {
    let reports = a
        .reports
        .iter()
        .map(|p| Ok(serde_json::from_reader(open(p)?).map_err(prunekit::Error::from)?))
        .collect::<Result<Vec<PruneReport>, Failure>>()?;
    let table = accounting_table(&reports)?;
    write_atomic(&a.out_dir.join("accounting.csv"), |w| table.write_csv(w))?;
    let md = table.to_markdown();
    write_atomic(&a.out_dir.join("accounting.md"), |w| {
        Ok(w.write_all(md.as_bytes())?)
    })?;
    Ok(json!({ "rows": table.rows }))
}

fn cmd_run(a: &RunArgs) -> CmdResult {
    let config = PipelineConfig::load(&a.config)?;
    let summary = prunekit::run_pipeline(&config)?;
    let value = serde_json::to_value(&summary).map_err(prunekit::Error::from)?;
    if let Some(f) = summary.failures.first() {
        return Err(Failure::Data(prunekit::Error::InvalidParameter(format!(
            "{} stage failure(s); first: subset {} {}: {}",
            summary.failures.len(),
            f.subset,
            f.stage,
            f.message
        ))));
    }
    Ok(value)
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let bins = bins_arg(&a.bins)?;
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
        n_docs: a.n_docs,
        tail_exponent: a.tail_exponent,
        min_tokens: a.min_tokens,
        seed: a.seed,
        calibration_target: a.calibrate,
    })?;
    let m = &corpus.manifest;
    write_atomic(&a.out, |w| {
        for d in m.documents() {
            serde_json::to_writer(
                &mut *w,
                &json!({"path": d.source_path, "token_count": d.token_count}),
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    if let Some(path) = &a.embeddings {
        let e = synthetic_embed(m, a.dim, a.seed, a.coupling, &bins)?;
        write_atomic(path, |w| e.write_to(w))?;
    }
    Ok(json!({
        "docs": m.len(),
        "tokens": m.total_tokens(),
        "tail_exponent": corpus.tail_exponent,
        "achieved_share": corpus.achieved_share,
    }))
}

fn dispatch(cmd: &Command) -> CmdResult {
    match cmd {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Pack(a) => cmd_pack(a),
        Command::BinLosses(a) => cmd_bin_losses(a),
        Command::Report(a) => cmd_report(a),
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn print_value(json_mode: bool, value: &Value) {
    if json_mode {
        println!("{value}");
        return;
    }
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                match v {
                    Value::String(s) => println!("{k}: {s}"),
                    other => println!("{k}: {other}"),
                }
            }
        }
        other => println!("{other}"),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn print_error(json_mode: bool, kind: &str, message: &str) {
    let message = one_line(message);
    if json_mode {
        eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
    } else {
        eprintln!("error[{kind}]: {message}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let json_mode = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion)
                || e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                    ExitCode::from(2)
                } else {
                    ExitCode::SUCCESS
                };
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            print_error(json_mode, "usage", first);
            return ExitCode::from(2);
        }
    };
    match prunekit::par::with_threads(cli.threads, || dispatch(&cli.command)) {
        Ok(v) => {
            print_value(cli.json, &v);
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            print_error(cli.json, "usage", &msg);
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            print_error(cli.json, e.kind(), &e.to_string());
            ExitCode::from(1)
        }
    }
}
