//! Experimental scaffolding: bootstrap subsets, the subset x strategy grid,
//! standard-error aggregation, context-window packing, length-binned
//! perplexity, and calibrated heavy-tailed synthetic corpora.

use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::Clustering;
use crate::corpus::{CorpusManifest, Split};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::par;
use crate::pruning::{apply, PruneReport, PruneSpec};
use crate::stats::LengthBinning;
use crate::util::{ceil_count, floor_count, seeded_rng};

pub const LAYOUT_FORMAT: &str = "prunekit-packing";
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub n_subsets: usize,
    pub subset_frac: f64,
    pub seeds: Vec<u64>,
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        Self::from_base_seed(3, 0.5, 0)
    }
}

impl BootstrapPlan {
    /// `n_subsets` subsets seeded `base_seed, base_seed + 1, ...`.
    pub fn from_base_seed(n_subsets: usize, subset_frac: f64, base_seed: u64) -> Self {
        Self {
            n_subsets,
            subset_frac,
            seeds: (0..n_subsets as u64).map(|i| base_seed.wrapping_add(i)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() != self.n_subsets {
            return Err(Error::param(format!(
                "bootstrap plan has {} seeds for {} subsets",
                self.seeds.len(),
                self.n_subsets
            )));
        }
        if !(self.subset_frac > 0.0 && self.subset_frac <= 1.0) {
            return Err(Error::param(format!(
                "subset_frac must lie in (0, 1], got {}",
                self.subset_frac
            )));
        }
        Ok(())
    }
}

/// Independent uniform draws (without replacement inside a subset) of
/// `floor(subset_frac * train)` train documents. Validation documents are
/// carried into every subset.
pub fn make_bootstrap_subsets(
    manifest: &CorpusManifest,
    plan: &BootstrapPlan,
) -> Result<Vec<CorpusManifest>> {
    plan.validate()?;
    let train = manifest.train_ids();
    let validation = manifest.ids_in(Split::Validation);
    let count = floor_count(plan.subset_frac, train.len() as u64) as usize;
    plan.seeds
        .iter()
        .map(|&seed| {
            let mut rng = seeded_rng(seed);
            let mut ids: Vec<u64> = index::sample(&mut rng, train.len(), count)
                .into_iter()
                .map(|i| train[i])
                .collect();
            ids.extend_from_slice(&validation);
            manifest.select(&ids)
        })
        .collect()
}

/// Embedding-side inputs for one subset, row-aligned to that subset.
#[derive(Debug, Clone, Default)]
pub struct SubsetInputs {
    pub matrix: Option<EmbeddingMatrix>,
    pub clustering: Option<Clustering>,
    /// Set when the inputs could not be produced; every cell that needs them
    /// fails with this message.
    pub failure: Option<String>,
}

pub type CellResult = std::result::Result<PruneReport, String>;

/// `cells[subset][spec]`.
#[derive(Debug, Clone)]
pub struct PruneGrid {
    pub cells: Vec<Vec<CellResult>>,
}

impl PruneGrid {
    pub fn len(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn failures(&self) -> Vec<(usize, usize, &str)> {
        self.cells
            .iter()
            .enumerate()
            .flat_map(|(s, row)| {
                row.iter()
                    .enumerate()
                    .filter_map(move |(j, c)| c.as_ref().err().map(|e| (s, j, e.as_str())))
            })
            .collect()
    }
}

/// Applies every spec to every subset. Cells are independent: a failing cell
/// is recorded and the rest still run.
pub fn run_matrix(
    subsets: &[CorpusManifest],
    specs: &[PruneSpec],
    inputs: &[SubsetInputs],
) -> Result<PruneGrid> {
    if !inputs.is_empty() && inputs.len() != subsets.len() {
        return Err(Error::Alignment(format!(
            "{} subset inputs for {} subsets",
            inputs.len(),
            subsets.len()
        )));
    }
    let n_specs = specs.len();
    let flat = par::map_range(subsets.len() * n_specs, |cell| {
        let (s, j) = (cell / n_specs, cell % n_specs);
        let spec = &specs[j];
        let input = inputs.get(s);
        if spec.strategy.needs_clustering() {
            if let Some(msg) = input.and_then(|i| i.failure.as_ref()) {
                return Err(format!("subset inputs unavailable: {msg}"));
            }
        }
        apply(
            spec,
            &subsets[s],
            input.and_then(|i| i.matrix.as_ref()),
            input.and_then(|i| i.clustering.as_ref()),
        )
        .map_err(|e| e.to_string())
    });
    let mut cells: Vec<Vec<CellResult>> = Vec::with_capacity(subsets.len());
    let mut it = flat.into_iter();
    for _ in 0..subsets.len() {
        cells.push(it.by_ref().take(n_specs).collect());
    }
    Ok(PruneGrid { cells })
}

/// Mean with sample standard deviation and standard error. `std` and
/// `stderr` are `None` for a single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    pub std: Option<f64>,
    pub stderr: Option<f64>,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<AggregateStat> {
    let n = values.len();
    if n == 0 {
        return Err(Error::param("cannot aggregate an empty list"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let (std, stderr) = if n >= 2 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        (Some(std), Some(std / (n as f64).sqrt()))
    } else {
        (None, None)
    };
    Ok(AggregateStat { mean, std, stderr, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Cut the stream every `context_len` tokens regardless of documents.
    #[default]
    SplitAnywhere,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PackingConfig {
    pub context_len: usize,
    pub boundary_policy: BoundaryPolicy,
    /// Which split is packed.
    pub split: Split,
}

impl Default for PackingConfig {
    fn default() -> Self {
        Self {
            context_len: 4096,
            boundary_policy: BoundaryPolicy::SplitAnywhere,
            split: Split::Train,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PackOrder {
    ById,
    Shuffle { seed: u64 },
}

/// Document order for packing `split`.
pub fn packing_order(manifest: &CorpusManifest, split: Split, order: PackOrder) -> Vec<u64> {
    let mut ids = manifest.ids_in(split);
    if let PackOrder::Shuffle { seed } = order {
        ids.shuffle(&mut seeded_rng(seed));
    }
    ids
}

/// Token range `[start_tok, end_tok)` of one document inside a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub doc_id: u64,
    pub start_tok: u64,
    pub end_tok: u64,
}

impl Span {
    pub fn len(&self) -> u64 {
        self.end_tok - self.start_tok
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_idx: u64,
    pub spans: Vec<Span>,
}

impl Chunk {
    pub fn len(&self) -> u64 {
        self.spans.iter().map(Span::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Concatenates documents in `order` and cuts the stream every
/// `context_len` tokens.
pub fn pack(manifest: &CorpusManifest, order: &[u64], config: &PackingConfig) -> Result<Vec<Chunk>> {
    if config.context_len == 0 {
        return Err(Error::param("context_len must be at least 1"));
    }
    let mut expected = manifest.ids_in(config.split);
    let mut given = order.to_vec();
    given.sort_unstable();
    expected.sort_unstable();
    if given != expected {
        return Err(Error::param(format!(
            "packing order is not a permutation of the {:?} document ids",
            config.split
        )));
    }
    let ctx = config.context_len as u64;
    let mut chunks = Vec::new();
    let mut current = Chunk {
        chunk_idx: 0,
        spans: Vec::new(),
    };
    let mut room = ctx;
    for &doc_id in order {
        let len = manifest.document(doc_id).token_count;
        let mut start = 0;
        while start < len {
            let take = room.min(len - start);
            current.spans.push(Span {
                doc_id,
                start_tok: start,
                end_tok: start + take,
            });
            start += take;
            room -= take;
            if room == 0 {
                let idx = current.chunk_idx + 1;
                chunks.push(std::mem::replace(
                    &mut current,
                    Chunk {
                        chunk_idx: idx,
                        spans: Vec::new(),
                    },
                ));
                room = ctx;
            }
        }
    }
    if !current.spans.is_empty() {
        chunks.push(current);
    }
    Ok(chunks)
}

#[derive(Serialize, Deserialize)]
struct LayoutHeader {
    format: String,
    version: u32,
    context_len: usize,
    n_chunks: usize,
    total_tokens: u64,
}

pub fn write_layout(chunks: &[Chunk], context_len: usize, w: &mut dyn Write) -> Result<()> {
    let header = LayoutHeader {
        format: LAYOUT_FORMAT.into(),
        version: LAYOUT_VERSION,
        context_len,
        n_chunks: chunks.len(),
        total_tokens: chunks.iter().map(Chunk::len).sum(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for c in chunks {
        serde_json::to_writer(&mut *w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_layout<R: BufRead>(reader: R) -> Result<Vec<Chunk>> {
    let mut lines = reader.lines();
    let header: LayoutHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(Error::Format("packing layout is empty".into())),
    };
    if header.format != LAYOUT_FORMAT || header.version != LAYOUT_VERSION {
        return Err(Error::Format(format!(
            "unsupported layout {} v{}",
            header.format, header.version
        )));
    }
    let mut chunks = Vec::with_capacity(header.n_chunks);
    for l in lines {
        let l = l?;
        if !l.trim().is_empty() {
            chunks.push(serde_json::from_str(&l)?);
        }
    }
    if chunks.len() != header.n_chunks {
        return Err(Error::Format(format!(
            "layout header declares {} chunks, found {}",
            header.n_chunks,
            chunks.len()
        )));
    }
    Ok(chunks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPerplexity {
    pub lower: u64,
    pub upper: Option<u64>,
    pub tokens: u64,
    pub mean_loss: f64,
    pub perplexity: f64,
}

/// Per-bin perplexity `exp(mean loss)`. Each token is attributed to the bin
/// of its source document's full length, wherever the chunk boundary fell.
/// Bins without tokens are omitted.
pub fn bin_losses(
    chunks: &[Chunk],
    per_token_losses: &[f64],
    bins: &LengthBinning,
    manifest: &CorpusManifest,
) -> Result<Vec<BinPerplexity>> {
    let total: u64 = chunks.iter().map(Chunk::len).sum();
    if total != per_token_losses.len() as u64 {
        return Err(Error::Alignment(format!(
            "{} losses for {total} packed tokens",
            per_token_losses.len()
        )));
    }
    let mut sums = vec![0.0f64; bins.len()];
    let mut counts = vec![0u64; bins.len()];
    let mut pos = 0usize;
    for span in chunks.iter().flat_map(|c| &c.spans) {
        if span.doc_id as usize >= manifest.len() {
            return Err(Error::Alignment(format!(
                "layout references unknown doc {}",
                span.doc_id
            )));
        }
        let b = bins.bin_of(manifest.document(span.doc_id).token_count);
        let n = span.len() as usize;
        sums[b] += per_token_losses[pos..pos + n].iter().sum::<f64>();
        counts[b] += n as u64;
        pos += n;
    }
    Ok((0..bins.len())
        .filter(|&b| counts[b] > 0)
        .map(|b| {
            let (lower, upper) = bins.bounds(b);
            let mean_loss = sums[b] / counts[b] as f64;
            BinPerplexity {
                lower,
                upper,
                tokens: counts[b],
                mean_loss,
                perplexity: mean_loss.exp(),
            }
        })
        .collect())
}

/// Heavy-tailed corpus description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n_docs: usize,
    /// Pareto shape; must exceed 1 so the mean is finite.
    pub tail_exponent: f64,
    pub min_tokens: u64,
    pub seed: u64,
    /// `(doc_fraction, token_share)`: tune the tail until the longest
    /// `doc_fraction` of documents hold `token_share` of the tokens.
    pub calibration_target: Option<(f64, f64)>,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_docs: 50_000,
            tail_exponent: 1.7,
            min_tokens: 32,
            seed: 0,
            calibration_target: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub manifest: CorpusManifest,
    pub tail_exponent: f64,
    /// Token share of the longest `doc_fraction` documents, when calibrated.
    pub achieved_share: Option<f64>,
}

/// Maximum distance from the calibration target that still counts as a hit.
pub const CALIBRATION_TOLERANCE: f64 = 0.02;
const CALIBRATION_STEPS: usize = 100;

fn pareto_count(min_tokens: u64, u: f64, alpha: f64) -> u64 {
    // saturating float-to-int cast caps the extreme tail
    (min_tokens as f64 * u.powf(-1.0 / alpha)).floor() as u64
}

/// Token share of the `top` smallest uniforms (the longest documents).
fn tail_share(sorted_u: &[f64], top: usize, min_tokens: u64, alpha: f64) -> f64 {
    let counts = sorted_u
        .iter()
        .map(|&u| pareto_count(min_tokens, u, alpha) as f64);
    let mut head = 0.0;
    let mut total = 0.0;
    for (i, c) in counts.enumerate() {
        if i < top {
            head += c;
        }
        total += c;
    }
    head / total
}

/// Discretized Pareto token counts `floor(min_tokens * U^(-1/alpha))`.
///
/// With a calibration target, the shape is found by bisection on a fixed set
/// of uniforms (so the share moves monotonically with the shape).
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    if spec.n_docs == 0 {
        return Err(Error::param("n_docs must be at least 1"));
    }
    if !(spec.tail_exponent > 1.0) {
        return Err(Error::param("tail_exponent must exceed 1"));
    }
    if spec.min_tokens == 0 {
        return Err(Error::param("min_tokens must be at least 1"));
    }
    let mut rng = seeded_rng(spec.seed);
    // (0, 1], so the power never divides by zero
    let uniforms: Vec<f64> = (0..spec.n_docs).map(|_| 1.0 - rng.random::<f64>()).collect();

    let (alpha, achieved) = match spec.calibration_target {
        None => (spec.tail_exponent, None),
        Some((doc_fraction, share)) => {
            crate::util::check_fraction("calibration doc_fraction", doc_fraction)?;
            crate::util::check_fraction("calibration token_share", share)?;
            let mut sorted = uniforms.clone();
            sorted.sort_by(f64::total_cmp);
            let top = ceil_count(doc_fraction, spec.n_docs as u64) as usize;
            let share_at = |a: f64| tail_share(&sorted, top, spec.min_tokens, a);
            let (mut lo, mut hi) = (1.0 + 1e-6, 64.0);
            let mut best = (spec.tail_exponent, share_at(spec.tail_exponent));
            for _ in 0..CALIBRATION_STEPS {
                let mid = 0.5 * (lo + hi);
                let s = share_at(mid);
                if (s - share).abs() < (best.1 - share).abs() {
                    best = (mid, s);
                }
                if (s - share).abs() <= CALIBRATION_TOLERANCE / 20.0 || hi - lo < 1e-12 {
                    break;
                }
                // heavier tails (smaller shape) concentrate more tokens at the top
                if s > share {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if (best.1 - share).abs() > CALIBRATION_TOLERANCE {
                return Err(Error::Calibration {
                    closest_share: best.1,
                    tail_exponent: best.0,
                });
            }
            (best.0, Some(best.1))
        }
    };

    let manifest = CorpusManifest::from_counts(
        "synthetic-pareto",
        uniforms.iter().enumerate().map(|(i, &u)| {
            let tokens = pareto_count(spec.min_tokens, u, alpha);
            (format!("synthetic/{i:06}.py"), tokens.saturating_mul(4), tokens)
        }),
    )?;
    Ok(SyntheticCorpus {
        manifest,
        tail_exponent: alpha,
        achieved_share: achieved,
    })
}
