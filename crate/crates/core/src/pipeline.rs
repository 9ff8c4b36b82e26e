//! End-to-end experiment runner driven by a single JSON config.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! manifest.jsonl                      ingested corpus (with validation split)
//! stats/cdf.csv, stats/histogram.json length statistics of the full corpus
//! subsets/subset_<i>/manifest.jsonl   bootstrap subset
//! subsets/subset_<i>/clustering/      assignments + centroids (if needed)
//! reports/subset_<i>/<jj>_<strategy>.json and .pruned_ids.txt
//! accounting.csv                      one row per (subset, spec)
//! accounting.md                       mean +- stderr per prune spec
//! aggregate.json                      same, machine readable
//! packing/layout.jsonl                validation packing (if a split exists)
//! summary.json                        counts and failures
//! ```
//!
//! Nothing written depends on wall-clock time or on the thread count.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, ClusteringConfig};
use crate::corpus::{ingest, make_validation_split, CorpusManifest, Split, TokenizerMode, TokenizerSpec};
use crate::embeddings::{load_embeddings, normalize, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::harness::{
    aggregate, make_bootstrap_subsets, pack, packing_order, run_matrix, write_layout, AggregateStat,
    BootstrapPlan, PackOrder, PackingConfig, SubsetInputs,
};
use crate::io::{open, write_atomic};
use crate::pruning::PruneSpec;
use crate::stats::{bin_histogram, build_cdf, LengthBinning};

fn default_tokenizer() -> TokenizerMode {
    TokenizerMode::Precomputed
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub per_bin_quota: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_subsets")]
    pub n_subsets: usize,
    #[serde(default = "default_subset_frac")]
    pub subset_frac: f64,
    /// Base seed; subset `i` uses `seed + i` unless `seeds` is given.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

fn default_subsets() -> usize {
    3
}

fn default_subset_frac() -> f64 {
    0.5
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_subsets: default_subsets(),
            subset_frac: default_subset_frac(),
            seed: 0,
            seeds: None,
        }
    }
}

impl BootstrapConfig {
    pub fn plan(&self) -> BootstrapPlan {
        match &self.seeds {
            Some(seeds) => BootstrapPlan {
                n_subsets: self.n_subsets,
                subset_frac: self.subset_frac,
                seeds: seeds.clone(),
            },
            None => BootstrapPlan::from_base_seed(self.n_subsets, self.subset_frac, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Line-delimited JSON corpus records.
    pub corpus: PathBuf,
    #[serde(default = "default_tokenizer")]
    pub tokenizer: TokenizerMode,
    /// EMBD file row-aligned with the ingested corpus.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    pub prune_specs: Vec<PruneSpec>,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub packing: PackingConfig,
    #[serde(default)]
    pub bin_edges: LengthBinning,
    #[serde(default)]
    pub validation: Option<ValidationConfig>,
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    /// Parses a config file. Relative paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.corpus);
        rebase(&mut cfg.output_dir);
        if let Some(e) = cfg.embeddings.as_mut() {
            rebase(e);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prune_specs.is_empty() {
            return Err(Error::Config("prune_specs is empty".into()));
        }
        for (i, spec) in self.prune_specs.iter().enumerate() {
            spec.validate()
                .map_err(|e| Error::Config(format!("prune_specs[{i}]: {e}")))?;
            if spec.strategy.needs_clustering() && self.embeddings.is_none() {
                return Err(Error::Config(format!(
                    "prune_specs[{i}]: {} requires embeddings but no embeddings path is configured",
                    spec.strategy
                )));
            }
        }
        self.bootstrap
            .plan()
            .validate()
            .map_err(|e| Error::Config(format!("bootstrap: {e}")))?;
        if self.clustering.k == 0 || self.clustering.max_iters == 0 {
            return Err(Error::Config(
                "clustering: k and max_iters must be at least 1".into(),
            ));
        }
        if self.packing.context_len == 0 {
            return Err(Error::Config("packing: context_len must be at least 1".into()));
        }
        if let Some(v) = &self.validation {
            if v.per_bin_quota == 0 {
                return Err(Error::Config(
                    "validation: per_bin_quota must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }

    fn needs_clustering(&self) -> bool {
        self.prune_specs.iter().any(|s| s.strategy.needs_clustering())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub subset: usize,
    /// `None` when a whole subset stage failed.
    pub spec: Option<usize>,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub spec: usize,
    pub label: String,
    pub fraction_docs: AggregateStat,
    pub fraction_tokens: AggregateStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub toolkit_version: String,
    pub n_docs: usize,
    pub n_tokens: u64,
    pub n_subsets: usize,
    pub n_specs: usize,
    pub reports_written: usize,
    pub failures: Vec<Failure>,
}

fn subset_dir(out: &Path, i: usize) -> PathBuf {
    out.join("subsets").join(format!("subset_{i}"))
}

fn pct_cell(s: &AggregateStat) -> String {
    match s.stderr {
        Some(e) => format!("{:.1}% ± {:.1}%", s.mean * 100.0, e * 100.0),
        None => format!("{:.1}%", s.mean * 100.0),
    }
}

fn aggregate_markdown(rows: &[AggregateRow]) -> String {
    let mut s = String::new();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    s.push_str(&format!("| | {} |\n", labels.join(" | ")));
    s.push_str(&format!("|---|{}\n", "---|".repeat(rows.len())));
    let docs: Vec<String> = rows.iter().map(|r| pct_cell(&r.fraction_docs)).collect();
    s.push_str(&format!("| Documents pruned | {} |\n", docs.join(" | ")));
    let toks: Vec<String> = rows.iter().map(|r| pct_cell(&r.fraction_tokens)).collect();
    s.push_str(&format!("| Tokens pruned | {} |\n", toks.join(" | ")));
    s
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn load_inputs(config: &PipelineConfig, manifest: &CorpusManifest) -> Result<Option<EmbeddingMatrix>> {
    match &config.embeddings {
        Some(path) if config.needs_clustering() => {
            let raw = load_embeddings(open(path)?, manifest)?;
            Ok(Some(if raw.is_normalized() {
                raw
            } else {
                normalize(&raw)?
            }))
        }
        _ => Ok(None),
    }
}

/// Runs the whole experiment. Errors before any subset work (bad config,
/// unreadable corpus or embeddings) are returned; later failures are
/// recorded per subset in the summary and the remaining cells still run.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineSummary> {
    config.validate()?;
    let out = &config.output_dir;

    let tokenizer = match config.tokenizer {
        TokenizerMode::Precomputed => TokenizerSpec::precomputed("precomputed"),
        TokenizerMode::BuiltinSplitter => TokenizerSpec::builtin(),
    };
    let mut manifest = ingest(open(&config.corpus)?, &tokenizer)?.manifest;
    let embeddings = load_inputs(config, &manifest)?;
    if let Some(v) = &config.validation {
        manifest = make_validation_split(&manifest, v.per_bin_quota, &config.bin_edges, v.seed)?;
    }
    write_atomic(&out.join("manifest.jsonl"), |w| manifest.write_jsonl(w))?;

    let cdf = build_cdf(&manifest)?;
    write_atomic(&out.join("stats/cdf.csv"), |w| cdf.write_csv(w))?;
    write_json(
        &out.join("stats/histogram.json"),
        &bin_histogram(&manifest, &config.bin_edges),
    )?;

    let subsets = make_bootstrap_subsets(&manifest, &config.bootstrap.plan())?;
    let mut failures = Vec::new();
    let mut inputs = Vec::with_capacity(subsets.len());
    for (i, subset) in subsets.iter().enumerate() {
        let dir = subset_dir(out, i);
        write_atomic(&dir.join("manifest.jsonl"), |w| subset.write_jsonl(w))?;
        let mut input = SubsetInputs::default();
        if let Some(full) = &embeddings {
            let origin: Vec<u64> = (0..subset.len() as u64).map(|d| subset.origin_id(d)).collect();
            let clustered = full.select_rows(&origin).and_then(|m| {
                let c = kmeans(&m, &config.clustering)?;
                c.save(&dir.join("clustering"))?;
                Ok((m, c))
            });
            match clustered {
                Ok((m, c)) => {
                    input.matrix = Some(m);
                    input.clustering = Some(c);
                }
                Err(e) => {
                    log::error!("subset {i}: clustering failed: {e}");
                    failures.push(Failure {
                        subset: i,
                        spec: None,
                        stage: "clustering".into(),
                        message: e.to_string(),
                    });
                    input.failure = Some(e.to_string());
                }
            }
        }
        inputs.push(input);
    }

    let grid = run_matrix(&subsets, &config.prune_specs, &inputs)?;
    let mut reports_written = 0;
    let mut rows_csv = Vec::new();
    for (i, row) in grid.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let spec = &config.prune_specs[j];
            match cell {
                Ok(report) => {
                    let stem = format!("{j:02}_{}", spec.strategy);
                    let dir = out.join("reports").join(format!("subset_{i}"));
                    write_json(&dir.join(format!("{stem}.json")), report)?;
                    write_atomic(&dir.join(format!("{stem}.pruned_ids.txt")), |w| {
                        report.write_pruned_ids(w)
                    })?;
                    reports_written += 1;
                    rows_csv.push((i, j, report.fraction_docs, report.fraction_tokens));
                }
                Err(message) => {
                    // cells blocked by a failed clustering are already covered
                    if inputs[i].failure.is_none() || !spec.strategy.needs_clustering() {
                        failures.push(Failure {
                            subset: i,
                            spec: Some(j),
                            stage: "prune".into(),
                            message: message.clone(),
                        });
                    }
                }
            }
        }
    }

    write_atomic(&out.join("accounting.csv"), |w| {
        writeln!(w, "subset,spec,strategy,label,fraction_docs,fraction_tokens")?;
        for &(i, j, d, t) in &rows_csv {
            let spec = &config.prune_specs[j];
            writeln!(w, "{i},{j},{},\"{}\",{d},{t}", spec.strategy, spec.label())?;
        }
        Ok(())
    })?;

    let mut aggregates = Vec::new();
    for (j, spec) in config.prune_specs.iter().enumerate() {
        let mine: Vec<_> = rows_csv.iter().filter(|r| r.1 == j).collect();
        if mine.is_empty() {
            continue;
        }
        let docs: Vec<f64> = mine.iter().map(|r| r.2).collect();
        let toks: Vec<f64> = mine.iter().map(|r| r.3).collect();
        aggregates.push(AggregateRow {
            spec: j,
            label: spec.label(),
            fraction_docs: aggregate(&docs)?,
            fraction_tokens: aggregate(&toks)?,
        });
    }
    write_json(&out.join("aggregate.json"), &aggregates)?;
    write_atomic(&out.join("accounting.md"), |w| {
        Ok(w.write_all(aggregate_markdown(&aggregates).as_bytes())?)
    })?;

    let pack_split = config.packing.split;
    if !manifest.ids_in(pack_split).is_empty() && (pack_split == Split::Train || config.validation.is_some())
    {
        let order = packing_order(&manifest, pack_split, PackOrder::ById);
        let chunks = pack(&manifest, &order, &config.packing)?;
        write_atomic(&out.join("packing/layout.jsonl"), |w| {
            write_layout(&chunks, config.packing.context_len, w)
        })?;
    }

    let summary = PipelineSummary {
        toolkit_version: crate::VERSION.into(),
        n_docs: manifest.len(),
        n_tokens: manifest.total_tokens(),
        n_subsets: subsets.len(),
        n_specs: config.prune_specs.len(),
        reports_written,
        failures,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
