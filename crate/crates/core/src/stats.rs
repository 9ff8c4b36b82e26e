//! Length-distribution analytics: cumulative token-share curves, percentile
//! queries in both directions, and length-bin histograms.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::util::{ceil_count, check_fraction, ratio};

/// Half-open token-count bins `[e_i, e_{i+1})`; the last bin is open-ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct LengthBinning {
    edges: Vec<u64>,
}

/// Power-of-four edges with the 4096-token context length as an edge.
pub const DEFAULT_BIN_EDGES: [u64; 7] = [0, 64, 256, 1024, 4096, 16384, 65536];

impl Default for LengthBinning {
    fn default() -> Self {
        Self {
            edges: DEFAULT_BIN_EDGES.to_vec(),
        }
    }
}

impl TryFrom<Vec<u64>> for LengthBinning {
    type Error = Error;

    fn try_from(edges: Vec<u64>) -> Result<Self> {
        Self::new(edges)
    }
}

impl From<LengthBinning> for Vec<u64> {
    fn from(b: LengthBinning) -> Self {
        b.edges
    }
}

impl LengthBinning {
    pub fn new(edges: Vec<u64>) -> Result<Self> {
        if edges.first() != Some(&0) {
            return Err(Error::param("bin edges must start at 0"));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("bin edges must be strictly ascending"));
        }
        Ok(Self { edges })
    }

    /// Parses a comma-separated edge list such as `0,64,256`.
    pub fn parse(s: &str) -> Result<Self> {
        let edges = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::param(format!("bad bin edge {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(edges)
    }

    pub fn edges(&self) -> &[u64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn bin_of(&self, token_count: u64) -> usize {
        self.edges.partition_point(|&e| e <= token_count) - 1
    }

    /// `(lower, upper)` bounds of bin `b`; `upper` is `None` for the last bin.
    pub fn bounds(&self, b: usize) -> (u64, Option<u64>) {
        (self.edges[b], self.edges.get(b + 1).copied())
    }
}

/// Token counts sorted ascending (ties by ascending doc id) with prefix sums.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthCdf {
    sorted_counts: Vec<u64>,
    cumulative_tokens: Vec<u64>,
    order: Vec<u64>,
    total_tokens: u64,
}

impl LengthCdf {
    pub fn sorted_counts(&self) -> &[u64] {
        &self.sorted_counts
    }

    pub fn cumulative_tokens(&self) -> &[u64] {
        &self.cumulative_tokens
    }

    /// Doc ids in ascending-length order.
    pub fn order(&self) -> &[u64] {
        &self.order
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn total_docs(&self) -> usize {
        self.sorted_counts.len()
    }

    /// Tokens held by the `k` longest documents.
    fn top_tokens(&self, k: usize) -> u64 {
        let n = self.total_docs();
        if k >= n {
            self.total_tokens
        } else {
            self.total_tokens - self.cumulative_tokens[n - k - 1]
        }
    }

    /// Share of all tokens held by the longest `ceil(doc_fraction * n)` documents.
    pub fn token_share_of_longest_docs(&self, doc_fraction: f64) -> Result<f64> {
        check_fraction("doc_fraction", doc_fraction)?;
        let k = ceil_count(doc_fraction, self.total_docs() as u64) as usize;
        Ok(ratio(self.top_tokens(k), self.total_tokens))
    }

    /// Smallest share of documents, taken longest first, whose tokens reach
    /// `token_fraction` of the total.
    pub fn doc_share_covering_top_tokens(&self, token_fraction: f64) -> Result<f64> {
        check_fraction("token_fraction", token_fraction)?;
        let target = ceil_count(token_fraction, self.total_tokens);
        let n = self.total_docs();
        let mut acc = 0;
        let mut k = 0;
        while acc < target && k < n {
            acc += self.sorted_counts[n - 1 - k];
            k += 1;
        }
        Ok(ratio(k as u64, n as u64))
    }

    /// Two-column CSV `(doc_rank_fraction, cumulative_token_fraction)`.
    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "doc_rank_fraction,cumulative_token_fraction")?;
        let n = self.total_docs() as f64;
        let total = self.total_tokens as f64;
        for (i, &c) in self.cumulative_tokens.iter().enumerate() {
            writeln!(w, "{},{}", (i + 1) as f64 / n, c as f64 / total)?;
        }
        Ok(())
    }
}

pub fn build_cdf(manifest: &CorpusManifest) -> Result<LengthCdf> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut pairs: Vec<(u64, u64)> = manifest
        .documents()
        .iter()
        .map(|d| (d.token_count, d.doc_id))
        .collect();
    // keys are unique, so an unstable sort is still deterministic
    #[cfg(feature = "parallel")]
    {
        use rayon::slice::ParallelSliceMut;
        if crate::par::current_threads() > 1 {
            pairs.par_sort_unstable();
        } else {
            pairs.sort_unstable();
        }
    }
    #[cfg(not(feature = "parallel"))]
    pairs.sort_unstable();

    let sorted_counts: Vec<u64> = pairs.iter().map(|p| p.0).collect();
    let order = pairs.iter().map(|p| p.1).collect();
    let cumulative_tokens: Vec<u64> = sorted_counts
        .iter()
        .scan(0u64, |acc, &c| {
            *acc += c;
            Some(*acc)
        })
        .collect();
    let total_tokens = *cumulative_tokens.last().unwrap_or(&0);
    Ok(LengthCdf {
        sorted_counts,
        cumulative_tokens,
        order,
        total_tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCount {
    pub lower: u64,
    pub upper: Option<u64>,
    pub docs: u64,
    pub tokens: u64,
}

pub fn bin_histogram(manifest: &CorpusManifest, bins: &LengthBinning) -> Vec<BinCount> {
    let mut out: Vec<BinCount> = (0..bins.len())
        .map(|b| {
            let (lower, upper) = bins.bounds(b);
            BinCount {
                lower,
                upper,
                docs: 0,
                tokens: 0,
            }
        })
        .collect();
    for c in manifest.token_counts() {
        let slot = &mut out[bins.bin_of(c)];
        slot.docs += 1;
        slot.tokens += c;
    }
    out
}
