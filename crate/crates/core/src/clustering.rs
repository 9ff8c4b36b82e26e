//! Seeded spherical k-means and embedding-space diagnostics.
//!
//! Distances throughout are `1 - cos(doc, centroid)` on unit vectors.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::embeddings::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::io::{open, write_atomic};
use crate::par::{self, REDUCTION_CHUNK};
use crate::util::{seeded_rng, UnionFind};

pub const ASSIGNMENTS_FORMAT: &str = "prunekit-assignments";
pub const ASSIGNMENTS_VERSION: u32 = 1;
pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";
pub const CENTROIDS_FILE: &str = "centroids.embd";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative objective improvement falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: 100,
            max_iters: 25,
            tol: 1e-4,
            seed: 0,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        if self.k > n_rows {
            return Err(Error::param(format!(
                "k = {} exceeds the {n_rows} rows to cluster",
                self.k
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::param("tol must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    centroids: EmbeddingMatrix,
    assignment: Vec<usize>,
    distance: Vec<f64>,
    cluster_sizes: Vec<usize>,
    objective: f64,
    objective_history: Vec<f64>,
}

impl Clustering {
    /// Assembles a clustering from explicit parts. Sizes and objective are
    /// derived from `assignment` and `distance`.
    pub fn from_parts(
        centroids: EmbeddingMatrix,
        assignment: Vec<usize>,
        distance: Vec<f64>,
    ) -> Result<Self> {
        if assignment.len() != distance.len() {
            return Err(Error::Alignment("assignment and distance lengths differ".into()));
        }
        let k = centroids.n_rows();
        let mut cluster_sizes = vec![0; k];
        for (i, &c) in assignment.iter().enumerate() {
            if c >= k {
                return Err(Error::Data {
                    row: i,
                    message: format!("cluster {c} out of range for k = {k}"),
                });
            }
            cluster_sizes[c] += 1;
        }
        if let Some(i) = distance.iter().position(|d| !(0.0..=2.0).contains(d)) {
            return Err(Error::Data {
                row: i,
                message: format!("distance {} outside [0, 2]", distance[i]),
            });
        }
        let objective = mean_ordered(&distance);
        Ok(Self {
            centroids,
            assignment,
            distance,
            cluster_sizes,
            objective,
            objective_history: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.n_rows()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn centroids(&self) -> &EmbeddingMatrix {
        &self.centroids
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn distance(&self) -> &[f64] {
        &self.distance
    }

    pub fn cluster_sizes(&self) -> &[usize] {
        &self.cluster_sizes
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    /// Objective after initialization and after every update step. Empty for
    /// clusterings loaded from disk.
    pub fn objective_history(&self) -> &[f64] {
        &self.objective_history
    }

    /// Same clustering restricted to `ids` (row order follows `ids`).
    pub fn select_rows(&self, ids: &[u64]) -> Result<Self> {
        let mut assignment = Vec::with_capacity(ids.len());
        let mut distance = Vec::with_capacity(ids.len());
        for &id in ids {
            let i = id as usize;
            if i >= self.len() {
                return Err(Error::Alignment(format!("row {id} not in clustering")));
            }
            assignment.push(self.assignment[i]);
            distance.push(self.distance[i]);
        }
        Self::from_parts(self.centroids.clone(), assignment, distance)
    }

    pub fn write_assignments(&self, w: &mut dyn Write) -> Result<()> {
        let header = AssignmentsHeader {
            format: ASSIGNMENTS_FORMAT.into(),
            version: ASSIGNMENTS_VERSION,
            k: self.k(),
            n: self.len(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for (i, (&cluster, &distance)) in self.assignment.iter().zip(&self.distance).enumerate() {
            serde_json::to_writer(
                &mut *w,
                &AssignmentLine {
                    doc_id: i as u64,
                    cluster,
                    distance,
                },
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes `assignments.jsonl` and `centroids.embd` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(ASSIGNMENTS_FILE), |w| self.write_assignments(w))?;
        write_atomic(&dir.join(CENTROIDS_FILE), |w| self.centroids.write_to(w))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let centroids = EmbeddingMatrix::read_from(open(&dir.join(CENTROIDS_FILE))?, None)?;
        let mut lines = open(&dir.join(ASSIGNMENTS_FILE))?.lines();
        let header: AssignmentsHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::Format("assignments file is empty".into())),
        };
        if header.format != ASSIGNMENTS_FORMAT || header.version != ASSIGNMENTS_VERSION {
            return Err(Error::Format(format!(
                "unsupported assignments {} v{}",
                header.format, header.version
            )));
        }
        if header.k != centroids.n_rows() {
            return Err(Error::Alignment(format!(
                "assignments declare k = {} but centroid file has {} rows",
                header.k,
                centroids.n_rows()
            )));
        }
        let mut assignment = Vec::with_capacity(header.n);
        let mut distance = Vec::with_capacity(header.n);
        for l in lines {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let a: AssignmentLine = serde_json::from_str(&l)?;
            if a.doc_id != assignment.len() as u64 {
                return Err(Error::Format(format!(
                    "assignment for doc {} out of order",
                    a.doc_id
                )));
            }
            assignment.push(a.cluster);
            distance.push(a.distance);
        }
        if assignment.len() != header.n {
            return Err(Error::Format(format!(
                "assignments header says {} rows, found {}",
                header.n,
                assignment.len()
            )));
        }
        Self::from_parts(centroids, assignment, distance)
    }
}

#[derive(Serialize, Deserialize)]
struct AssignmentsHeader {
    format: String,
    version: u32,
    k: usize,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct AssignmentLine {
    doc_id: u64,
    cluster: usize,
    distance: f64,
}

/// Mean with a fixed, thread-independent summation order.
fn mean_ordered(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let partials = par::map_chunks(values.len(), REDUCTION_CHUNK, |r| values[r].iter().sum::<f64>());
    partials.iter().sum::<f64>() / values.len() as f64
}

fn to_distance(cos: f64) -> f64 {
    (1.0 - cos).clamp(0.0, 2.0)
}

/// Nearest centroid for every row, ties to the lowest index.
fn assign(matrix: &EmbeddingMatrix, centroids: &[Vec<f32>]) -> (Vec<usize>, Vec<f64>) {
    let best = par::map_range(matrix.n_rows(), |i| {
        let row = matrix.row(i);
        let mut best = (0usize, f64::NEG_INFINITY);
        for (c, centroid) in centroids.iter().enumerate() {
            let s = dot(row, centroid);
            if s > best.1 {
                best = (c, s);
            }
        }
        (best.0, to_distance(best.1))
    });
    best.into_iter().unzip()
}

fn kmeans_pp_init(matrix: &EmbeddingMatrix, k: usize, seed: u64) -> Vec<Vec<f32>> {
    let n = matrix.n_rows();
    let mut rng = seeded_rng(seed);
    let first = rng.random_range(0..n);
    let mut centroids = vec![matrix.row(first).to_vec()];
    let mut min_d = par::map_range(n, |i| to_distance(dot(matrix.row(i), &centroids[0])));
    while centroids.len() < k {
        let total: f64 = min_d.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `acc` a hair below `target`
            pick.unwrap_or_else(|| min_d.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1))
        };
        let c = matrix.row(pick).to_vec();
        let fresh = par::map_range(n, |i| to_distance(dot(matrix.row(i), &c)));
        for (m, f) in min_d.iter_mut().zip(fresh) {
            if f < *m {
                *m = f;
            }
        }
        centroids.push(c);
    }
    centroids
}

/// Normalized cluster means, accumulated in fixed-size chunks reduced in
/// chunk order. Clusters left empty (or with a vanishing mean) are reseeded
/// onto the documents farthest from their current centroids.
fn update(matrix: &EmbeddingMatrix, assignment: &[usize], distance: &[f64], k: usize) -> Vec<Vec<f32>> {
    let dim = matrix.dim();
    let partials = par::map_chunks(matrix.n_rows(), REDUCTION_CHUNK, |range| {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in range {
            let c = assignment[i];
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(matrix.row(i)) {
                *s += v as f64;
            }
        }
        (sums, counts)
    });
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (s, c) in partials {
        for (a, b) in sums.iter_mut().zip(&s) {
            *a += b;
        }
        for (a, b) in counts.iter_mut().zip(&c) {
            *a += b;
        }
    }

    let mut centroids = Vec::with_capacity(k);
    let mut needs_repair = Vec::new();
    for c in 0..k {
        let s = &sums[c * dim..(c + 1) * dim];
        let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        if counts[c] == 0 || n < 1e-12 {
            needs_repair.push(c);
            centroids.push(Vec::new());
        } else {
            centroids.push(s.iter().map(|x| (x / n) as f32).collect());
        }
    }
    if !needs_repair.is_empty() {
        let mut far: Vec<usize> = (0..matrix.n_rows()).collect();
        far.sort_by(|&a, &b| distance[b].total_cmp(&distance[a]).then(a.cmp(&b)));
        for (c, &doc) in needs_repair.iter().zip(&far) {
            centroids[*c] = matrix.row(doc).to_vec();
        }
    }
    centroids
}

/// Spherical k-means with k-means++ seeding.
///
/// Results depend only on the inputs and the seed, never on the thread count.
pub fn kmeans(matrix: &EmbeddingMatrix, config: &ClusteringConfig) -> Result<Clustering> {
    config.validate(matrix.n_rows())?;
    if !matrix.is_normalized() {
        return Err(Error::param("k-means requires a normalized embedding matrix"));
    }
    let k = config.k;
    let mut centroids = kmeans_pp_init(matrix, k, config.seed);
    let (mut assignment, mut distance) = assign(matrix, &centroids);
    let mut objective = mean_ordered(&distance);
    let mut history = vec![objective];

    for _ in 0..config.max_iters {
        centroids = update(matrix, &assignment, &distance, k);
        (assignment, distance) = assign(matrix, &centroids);
        let next = mean_ordered(&distance);
        history.push(next);
        let improvement = if objective > 0.0 {
            (objective - next) / objective
        } else {
            0.0
        };
        objective = next;
        let mut sizes = vec![0usize; k];
        for &c in &assignment {
            sizes[c] += 1;
        }
        if improvement < config.tol && sizes.iter().all(|&s| s > 0) {
            break;
        }
    }

    let data = centroids.into_iter().flatten().collect();
    let centroids = EmbeddingMatrix::new(k, matrix.dim(), data, true)?;
    let mut out = Clustering::from_parts(centroids, assignment, distance)?;
    out.objective_history = history;
    Ok(out)
}

/// Pairwise cosine similarity of centroids: symmetric with a unit diagonal.
pub fn centroid_similarity_matrix(clustering: &Clustering) -> Vec<Vec<f64>> {
    let k = clustering.k();
    let c = clustering.centroids();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        m[i][i] = 1.0;
        for j in i + 1..k {
            let s = c.cosine(i, j);
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    m
}

pub fn write_similarity_csv(matrix: &[Vec<f64>], w: &mut dyn Write) -> Result<()> {
    let k = matrix.len();
    let header: Vec<String> = (0..k).map(|j| format!("c{j}")).collect();
    writeln!(w, "cluster,{}", header.join(","))?;
    for (i, row) in matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "c{i},{}", cells.join(","))?;
    }
    Ok(())
}

/// Connected components of the graph joining centroids with similarity at or
/// above `threshold`. Singletons are dropped.
pub fn near_duplicate_centroid_groups(matrix: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let k = matrix.len();
    let mut uf = UnionFind::new(k);
    for (i, row) in matrix.iter().enumerate() {
        for j in i + 1..k {
            if row[j] >= threshold {
                uf.union(i, j);
            }
        }
    }
    uf.components().into_iter().filter(|g| g.len() > 1).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfilePoint {
    pub doc_id: u64,
    pub distance: f64,
    pub token_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceLengthProfile {
    pub points: Vec<ProfilePoint>,
    pub spearman: f64,
    /// Set when either series is constant; `spearman` is then 0.
    pub degenerate: bool,
}

impl DistanceLengthProfile {
    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "doc_id,distance,token_count")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.doc_id, p.distance, p.token_count)?;
        }
        Ok(())
    }
}

/// Scatter of (distance to centroid, length) per document with the Spearman
/// rank correlation between them.
pub fn distance_length_profile(
    clustering: &Clustering,
    manifest: &CorpusManifest,
) -> Result<DistanceLengthProfile> {
    if clustering.len() != manifest.len() {
        return Err(Error::Alignment(format!(
            "clustering covers {} documents, manifest has {}",
            clustering.len(),
            manifest.len()
        )));
    }
    let points: Vec<ProfilePoint> = manifest
        .documents()
        .iter()
        .zip(clustering.distance())
        .map(|(d, &distance)| ProfilePoint {
            doc_id: d.doc_id,
            distance,
            token_count: d.token_count,
        })
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.distance).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.token_count as f64).collect();
    let (spearman, degenerate) = match spearman(&xs, &ys) {
        Some(r) => (r, false),
        None => (0.0, true),
    };
    Ok(DistanceLengthProfile {
        points,
        spearman,
        degenerate,
    })
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation, or `None` when either input is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let mean = (n + 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mean, b - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let rows: f64 = (0..ka)
        .map(|i| pairs(table[i * kb..(i + 1) * kb].iter().sum()))
        .sum();
    let cols: f64 = (0..kb)
        .map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum()))
        .sum();
    let total = pairs(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
