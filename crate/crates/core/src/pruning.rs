//! Pruning strategies and the documents-vs-tokens accounting.
//!
//! Every strategy acts on the train split only and returns a [`PruneReport`].
//! Ties are always broken by ascending doc id, so reports are reproducible
//! byte for byte.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::clustering::Clustering;
use crate::corpus::{CorpusManifest, Split};
use crate::embeddings::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::par;
use crate::util::{ceil_count, check_fraction, floor_count, ratio, seeded_rng, UnionFind};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Keep everything; the unpruned baseline.
    None,
    LengthTopTokens,
    LengthShortestTokens,
    RandomDocs,
    SmallClusters,
    FarFromCentroids,
    ScipCombined,
    Semdedup,
    SslPrototypes,
    D4,
}

impl Strategy {
    pub const ALL: [Strategy; 10] = [
        Strategy::None,
        Strategy::LengthTopTokens,
        Strategy::LengthShortestTokens,
        Strategy::RandomDocs,
        Strategy::SmallClusters,
        Strategy::FarFromCentroids,
        Strategy::ScipCombined,
        Strategy::Semdedup,
        Strategy::SslPrototypes,
        Strategy::D4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::LengthTopTokens => "length_top_tokens",
            Strategy::LengthShortestTokens => "length_shortest_tokens",
            Strategy::RandomDocs => "random_docs",
            Strategy::SmallClusters => "small_clusters",
            Strategy::FarFromCentroids => "far_from_centroids",
            Strategy::ScipCombined => "scip_combined",
            Strategy::Semdedup => "semdedup",
            Strategy::SslPrototypes => "ssl_prototypes",
            Strategy::D4 => "d4",
        }
    }

    /// Whether the budget `P` is measured in tokens rather than documents.
    pub fn budget_in_tokens(self) -> bool {
        matches!(self, Strategy::LengthTopTokens | Strategy::LengthShortestTokens)
    }

    pub fn needs_clustering(self) -> bool {
        matches!(
            self,
            Strategy::SmallClusters
                | Strategy::FarFromCentroids
                | Strategy::ScipCombined
                | Strategy::Semdedup
                | Strategy::SslPrototypes
                | Strategy::D4
        )
    }

    pub fn needs_embeddings(self) -> bool {
        self.needs_clustering()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::param(format!("unknown strategy {s:?}")))
    }
}

fn default_small_frac() -> f64 {
    0.16
}

fn default_far_frac() -> f64 {
    0.04
}

/// One pruning request. `fraction` is the budget `P`: a token fraction for
/// the length strategies, a document fraction for the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub strategy: Strategy,
    #[serde(default, alias = "P", alias = "p")]
    pub fraction: f64,
    /// Semdedup radius in `1 - cosine` units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_small_frac")]
    pub small_frac: f64,
    #[serde(default = "default_far_frac")]
    pub far_frac: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PruneSpec {
    pub fn new(strategy: Strategy, fraction: f64) -> Self {
        Self {
            strategy,
            fraction,
            epsilon: None,
            small_frac: default_small_frac(),
            far_frac: default_far_frac(),
            seed: 0,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = Some(epsilon);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_stages(mut self, small_frac: f64, far_frac: f64) -> Self {
        self.small_frac = small_frac;
        self.far_frac = far_frac;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction("P", self.fraction)?;
        check_fraction("small_frac", self.small_frac)?;
        check_fraction("far_frac", self.far_frac)?;
        if self.small_frac + self.far_frac > 1.0 + 1e-12 {
            return Err(Error::param("small_frac + far_frac must not exceed 1"));
        }
        match (self.strategy, self.epsilon) {
            (Strategy::Semdedup | Strategy::D4, None) => {
                Err(Error::param(format!("{} requires epsilon", self.strategy)))
            }
            (_, Some(e)) if !(e >= 0.0) => Err(Error::param(format!("epsilon must be >= 0, got {e}"))),
            _ => Ok(()),
        }
    }

    /// Short human label, e.g. `length_top_tokens(P=0.2)`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::None => "none".into(),
            Strategy::ScipCombined => {
                format!("scip_combined(small={},far={})", self.small_frac, self.far_frac)
            }
            Strategy::Semdedup => format!("semdedup(eps={})", self.epsilon.unwrap_or(0.0)),
            Strategy::D4 => format!("d4(eps={},P={})", self.epsilon.unwrap_or(0.0), self.fraction),
            s => format!("{s}(P={})", self.fraction),
        }
    }
}

/// Which documents a strategy removed and what that cost in documents and
/// tokens. Totals refer to the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub report_version: u32,
    pub strategy: Strategy,
    pub params: PruneSpec,
    pub docs_total: u64,
    pub docs_pruned: u64,
    pub tokens_total: u64,
    pub tokens_pruned: u64,
    pub fraction_docs: f64,
    pub fraction_tokens: f64,
    /// Set for embedding-based strategies: cosine geometry was computed on
    /// L2-normalized rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings_l2_normalized: Option<bool>,
    pub manifest_fingerprint: String,
    pub pruned_ids: Vec<u64>,
}

impl PruneReport {
    pub fn write_pruned_ids(&self, w: &mut dyn Write) -> Result<()> {
        for id in &self.pruned_ids {
            writeln!(w, "{id}")?;
        }
        Ok(())
    }
}

struct TrainPool {
    ids: Vec<u64>,
    tokens: u64,
}

fn train_pool(manifest: &CorpusManifest) -> Result<TrainPool> {
    let ids = manifest.train_ids();
    if ids.is_empty() {
        return Err(Error::param("train split is empty"));
    }
    let tokens = ids.iter().map(|&i| manifest.document(i).token_count).sum();
    Ok(TrainPool { ids, tokens })
}

fn finish(
    manifest: &CorpusManifest,
    pool: &TrainPool,
    params: PruneSpec,
    mut ids: Vec<u64>,
    embedding_based: bool,
) -> PruneReport {
    ids.sort_unstable();
    debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(ids.iter().all(|&i| manifest.split(i) == Split::Train));
    let tokens_pruned = ids.iter().map(|&i| manifest.document(i).token_count).sum();
    let docs_total = pool.ids.len() as u64;
    PruneReport {
        report_version: REPORT_VERSION,
        strategy: params.strategy,
        docs_total,
        docs_pruned: ids.len() as u64,
        tokens_total: pool.tokens,
        tokens_pruned,
        fraction_docs: ratio(ids.len() as u64, docs_total),
        fraction_tokens: ratio(tokens_pruned, pool.tokens),
        embeddings_l2_normalized: embedding_based.then_some(true),
        manifest_fingerprint: manifest.fingerprint(),
        pruned_ids: ids,
        params,
    }
}

fn check_clustering(manifest: &CorpusManifest, clustering: &Clustering) -> Result<()> {
    if clustering.len() != manifest.len() {
        return Err(Error::Alignment(format!(
            "clustering covers {} documents, manifest has {}",
            clustering.len(),
            manifest.len()
        )));
    }
    Ok(())
}

fn check_matrix(manifest: &CorpusManifest, matrix: &EmbeddingMatrix) -> Result<()> {
    if matrix.n_rows() != manifest.len() {
        return Err(Error::Alignment(format!(
            "embedding matrix has {} rows, manifest has {} documents",
            matrix.n_rows(),
            manifest.len()
        )));
    }
    if !matrix.is_normalized() {
        return Err(Error::param("embedding matrix must be normalized"));
    }
    Ok(())
}

/// Walks `order` and stops at the first prefix whose tokens reach
/// `ceil(p * tokens_total)`.
fn first_crossing(manifest: &CorpusManifest, order: &[u64], target: u64) -> Vec<u64> {
    let mut acc = 0;
    let mut out = Vec::new();
    for &id in order {
        if acc >= target {
            break;
        }
        acc += manifest.document(id).token_count;
        out.push(id);
    }
    out
}

fn length_prune(manifest: &CorpusManifest, p: f64, longest_first: bool) -> Result<PruneReport> {
    check_fraction("P", p)?;
    let pool = train_pool(manifest)?;
    let mut order = pool.ids.clone();
    order.sort_by_key(|&id| {
        let c = manifest.document(id).token_count;
        (if longest_first { u64::MAX - c } else { c }, id)
    });
    let ids = first_crossing(manifest, &order, ceil_count(p, pool.tokens));
    let strategy = if longest_first {
        Strategy::LengthTopTokens
    } else {
        Strategy::LengthShortestTokens
    };
    Ok(finish(manifest, &pool, PruneSpec::new(strategy, p), ids, false))
}

/// Removes the longest documents until at least `p` of the train tokens are
/// gone.
pub fn prune_length_top_tokens(manifest: &CorpusManifest, p: f64) -> Result<PruneReport> {
    length_prune(manifest, p, true)
}

/// Mirror image of [`prune_length_top_tokens`], shortest documents first.
pub fn prune_length_shortest_tokens(manifest: &CorpusManifest, p: f64) -> Result<PruneReport> {
    length_prune(manifest, p, false)
}

pub fn prune_random_docs(manifest: &CorpusManifest, p: f64, seed: u64) -> Result<PruneReport> {
    check_fraction("P", p)?;
    let pool = train_pool(manifest)?;
    let count = floor_count(p, pool.ids.len() as u64) as usize;
    let mut rng = seeded_rng(seed);
    let ids = index::sample(&mut rng, pool.ids.len(), count)
        .into_iter()
        .map(|i| pool.ids[i])
        .collect();
    let spec = PruneSpec::new(Strategy::RandomDocs, p).with_seed(seed);
    Ok(finish(manifest, &pool, spec, ids, false))
}

/// Train members of each cluster, ascending doc id.
fn cluster_members(pool: &TrainPool, clustering: &Clustering) -> Vec<Vec<u64>> {
    let mut members = vec![Vec::new(); clustering.k()];
    for &id in &pool.ids {
        members[clustering.assignment()[id as usize]].push(id);
    }
    members
}

/// Sorts by distance to centroid (descending when `farthest`), ties by id.
fn by_distance(ids: &mut [u64], clustering: &Clustering, farthest: bool) {
    let d = clustering.distance();
    ids.sort_by(|&a, &b| {
        let (da, db) = (d[a as usize], d[b as usize]);
        let ord = if farthest {
            db.total_cmp(&da)
        } else {
            da.total_cmp(&db)
        };
        ord.then(a.cmp(&b))
    });
}

fn small_cluster_ids(pool: &TrainPool, clustering: &Clustering, frac: f64) -> Vec<u64> {
    let target = floor_count(frac, pool.ids.len() as u64) as usize;
    let members = cluster_members(pool, clustering);
    let mut clusters: Vec<usize> = (0..members.len()).filter(|&c| !members[c].is_empty()).collect();
    clusters.sort_by_key(|&c| (members[c].len(), c));
    let mut out = Vec::with_capacity(target);
    for c in clusters {
        let remaining = target - out.len();
        if remaining == 0 {
            break;
        }
        if members[c].len() <= remaining {
            out.extend_from_slice(&members[c]);
        } else {
            let mut boundary = members[c].clone();
            by_distance(&mut boundary, clustering, true);
            out.extend_from_slice(&boundary[..remaining]);
            break;
        }
    }
    out
}

/// Prunes whole clusters, smallest first, up to `floor(frac * docs)`
/// documents; the boundary cluster loses its farthest members first.
pub fn prune_small_clusters(
    manifest: &CorpusManifest,
    clustering: &Clustering,
    frac: f64,
) -> Result<PruneReport> {
    check_fraction("frac", frac)?;
    check_clustering(manifest, clustering)?;
    let pool = train_pool(manifest)?;
    let ids = small_cluster_ids(&pool, clustering, frac);
    Ok(finish(
        manifest,
        &pool,
        PruneSpec::new(Strategy::SmallClusters, frac),
        ids,
        true,
    ))
}

/// Picks `floor(frac * docs_total)` train documents outside `exclude`, by
/// distance to centroid.
fn select_by_distance(
    pool: &TrainPool,
    clustering: &Clustering,
    frac: f64,
    exclude: &HashSet<u64>,
    farthest: bool,
) -> Result<Vec<u64>> {
    let count = floor_count(frac, pool.ids.len() as u64) as usize;
    let mut candidates: Vec<u64> = pool
        .ids
        .iter()
        .copied()
        .filter(|i| !exclude.contains(i))
        .collect();
    if count > candidates.len() {
        return Err(Error::param(format!(
            "asked to prune {count} documents but only {} remain",
            candidates.len()
        )));
    }
    by_distance(&mut candidates, clustering, farthest);
    candidates.truncate(count);
    Ok(candidates)
}

fn exclusion_set(manifest: &CorpusManifest, exclude: &[u64]) -> Result<HashSet<u64>> {
    if let Some(&bad) = exclude.iter().find(|&&i| i as usize >= manifest.len()) {
        return Err(Error::param(format!("excluded id {bad} is not in the manifest")));
    }
    Ok(exclude.iter().copied().collect())
}

/// Prunes the `floor(frac * docs_total)` documents farthest from their
/// centroid, skipping `exclude`. The count is relative to the full train
/// split even when `exclude` is non-empty.
pub fn prune_far_from_centroids(
    manifest: &CorpusManifest,
    clustering: &Clustering,
    frac: f64,
    exclude: &[u64],
) -> Result<PruneReport> {
    check_fraction("frac", frac)?;
    check_clustering(manifest, clustering)?;
    let pool = train_pool(manifest)?;
    let exclude = exclusion_set(manifest, exclude)?;
    let ids = select_by_distance(&pool, clustering, frac, &exclude, true)?;
    Ok(finish(
        manifest,
        &pool,
        PruneSpec::new(Strategy::FarFromCentroids, frac),
        ids,
        true,
    ))
}

/// Small-cluster stage followed by far-from-centroid stage on the rest.
pub fn prune_scip_combined(
    manifest: &CorpusManifest,
    clustering: &Clustering,
    small_frac: f64,
    far_frac: f64,
) -> Result<PruneReport> {
    let spec =
        PruneSpec::new(Strategy::ScipCombined, small_frac + far_frac).with_stages(small_frac, far_frac);
    spec.validate()?;
    check_clustering(manifest, clustering)?;
    let pool = train_pool(manifest)?;
    let mut ids = small_cluster_ids(&pool, clustering, small_frac);
    let stage_one: HashSet<u64> = ids.iter().copied().collect();
    ids.extend(select_by_distance(&pool, clustering, far_frac, &stage_one, true)?);
    Ok(finish(manifest, &pool, spec, ids, true))
}

fn semdedup_ids(
    pool: &TrainPool,
    matrix: &EmbeddingMatrix,
    clustering: &Clustering,
    epsilon: f64,
) -> Vec<u64> {
    let members = cluster_members(pool, clustering);
    let distance = clustering.distance();
    let pruned = par::map_slice(&members, |docs| {
        let mut uf = UnionFind::new(docs.len());
        for a in 0..docs.len() {
            let ra = matrix.row(docs[a] as usize);
            for b in a + 1..docs.len() {
                let rb = matrix.row(docs[b] as usize);
                if ra == rb || 1.0 - dot(ra, rb) <= epsilon {
                    uf.union(a, b);
                }
            }
        }
        let mut out = Vec::new();
        for comp in uf.components() {
            // members are in ascending id order, so min_by keeps the lowest id on ties
            let keep = comp
                .iter()
                .copied()
                .min_by(|&x, &y| distance[docs[x] as usize].total_cmp(&distance[docs[y] as usize]))
                .expect("components are non-empty");
            out.extend(comp.into_iter().filter(|&m| m != keep).map(|m| docs[m]));
        }
        out
    });
    pruned.into_iter().flatten().collect()
}

/// Within each cluster, collapses every connected component of the
/// `1 - cos <= epsilon` graph to its member closest to the centroid.
pub fn prune_semdedup(
    manifest: &CorpusManifest,
    matrix: &EmbeddingMatrix,
    clustering: &Clustering,
    epsilon: f64,
) -> Result<PruneReport> {
    let spec = PruneSpec::new(Strategy::Semdedup, 0.0).with_epsilon(epsilon);
    spec.validate()?;
    check_matrix(manifest, matrix)?;
    check_clustering(manifest, clustering)?;
    let pool = train_pool(manifest)?;
    let ids = semdedup_ids(&pool, matrix, clustering, epsilon);
    Ok(finish(manifest, &pool, spec, ids, true))
}

/// Prunes the `floor(frac * docs_total)` most prototypical documents, i.e.
/// those closest to their centroid.
pub fn prune_ssl_prototypes(
    manifest: &CorpusManifest,
    clustering: &Clustering,
    frac: f64,
) -> Result<PruneReport> {
    check_fraction("frac", frac)?;
    check_clustering(manifest, clustering)?;
    let pool = train_pool(manifest)?;
    let ids = select_by_distance(&pool, clustering, frac, &HashSet::new(), false)?;
    Ok(finish(
        manifest,
        &pool,
        PruneSpec::new(Strategy::SslPrototypes, frac),
        ids,
        true,
    ))
}

/// Semdedup, then prototype pruning over the survivors with `frac` relative
/// to the original train count.
pub fn prune_d4(
    manifest: &CorpusManifest,
    matrix: &EmbeddingMatrix,
    clustering: &Clustering,
    epsilon: f64,
    frac: f64,
) -> Result<PruneReport> {
    let spec = PruneSpec::new(Strategy::D4, frac).with_epsilon(epsilon);
    spec.validate()?;
    check_matrix(manifest, matrix)?;
    check_clustering(manifest, clustering)?;
    let pool = train_pool(manifest)?;
    let mut ids = semdedup_ids(&pool, matrix, clustering, epsilon);
    let deduped: HashSet<u64> = ids.iter().copied().collect();
    ids.extend(select_by_distance(&pool, clustering, frac, &deduped, false)?);
    Ok(finish(manifest, &pool, spec, ids, true))
}

/// Runs `spec` against `manifest`. Embedding-based strategies need the
/// matrix and/or clustering aligned to the same manifest.
pub fn apply(
    spec: &PruneSpec,
    manifest: &CorpusManifest,
    matrix: Option<&EmbeddingMatrix>,
    clustering: Option<&Clustering>,
) -> Result<PruneReport> {
    spec.validate()?;
    let need_clustering =
        || clustering.ok_or_else(|| Error::param(format!("{} requires a clustering", spec.strategy)));
    let need_matrix = || matrix.ok_or_else(|| Error::param(format!("{} requires embeddings", spec.strategy)));
    let p = spec.fraction;
    let mut report = match spec.strategy {
        Strategy::None => {
            let pool = train_pool(manifest)?;
            finish(
                manifest,
                &pool,
                PruneSpec::new(Strategy::None, 0.0),
                Vec::new(),
                false,
            )
        }
        Strategy::LengthTopTokens => prune_length_top_tokens(manifest, p)?,
        Strategy::LengthShortestTokens => prune_length_shortest_tokens(manifest, p)?,
        Strategy::RandomDocs => prune_random_docs(manifest, p, spec.seed)?,
        Strategy::SmallClusters => prune_small_clusters(manifest, need_clustering()?, p)?,
        Strategy::FarFromCentroids => prune_far_from_centroids(manifest, need_clustering()?, p, &[])?,
        Strategy::ScipCombined => {
            prune_scip_combined(manifest, need_clustering()?, spec.small_frac, spec.far_frac)?
        }
        Strategy::Semdedup => prune_semdedup(
            manifest,
            need_matrix()?,
            need_clustering()?,
            spec.epsilon.unwrap_or_default(),
        )?,
        Strategy::SslPrototypes => prune_ssl_prototypes(manifest, need_clustering()?, p)?,
        Strategy::D4 => prune_d4(
            manifest,
            need_matrix()?,
            need_clustering()?,
            spec.epsilon.unwrap_or_default(),
            p,
        )?,
    };
    report.params = spec.clone();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountingRow {
    pub strategy: Strategy,
    pub label: String,
    pub fraction_docs: f64,
    pub fraction_tokens: f64,
}

/// One row per report: how many documents and how many tokens each strategy
/// removed.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct AccountingTable {
    pub rows: Vec<AccountingRow>,
}

pub fn accounting_table(reports: &[PruneReport]) -> Result<AccountingTable> {
    if let Some(first) = reports.first() {
        if reports
            .iter()
            .any(|r| r.manifest_fingerprint != first.manifest_fingerprint)
        {
            return Err(Error::MixedManifests);
        }
    }
    Ok(AccountingTable {
        rows: reports
            .iter()
            .map(|r| AccountingRow {
                strategy: r.strategy,
                label: r.params.label(),
                fraction_docs: r.fraction_docs,
                fraction_tokens: r.fraction_tokens,
            })
            .collect(),
    })
}

fn pct(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

impl AccountingTable {
    /// Strategies as columns, documents and tokens pruned as rows.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let labels: Vec<&str> = self.rows.iter().map(|r| r.label.as_str()).collect();
        s.push_str(&format!("| | {} |\n", labels.join(" | ")));
        s.push_str(&format!("|---|{}\n", "---|".repeat(self.rows.len())));
        let docs: Vec<String> = self.rows.iter().map(|r| pct(r.fraction_docs)).collect();
        s.push_str(&format!("| Documents pruned | {} |\n", docs.join(" | ")));
        let toks: Vec<String> = self.rows.iter().map(|r| pct(r.fraction_tokens)).collect();
        s.push_str(&format!("| Tokens pruned | {} |\n", toks.join(" | ")));
        s
    }

    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "strategy,label,fraction_docs,fraction_tokens")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},\"{}\",{},{}",
                r.strategy, r.label, r.fraction_docs, r.fraction_tokens
            )?;
        }
        Ok(())
    }
}
