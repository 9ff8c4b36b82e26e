//! Corpus ingest, token counting and the canonical manifest.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;
use crate::stats::LengthBinning;
use crate::util::seeded_rng;

pub const MANIFEST_FORMAT: &str = "prunekit-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// One source file: the unit every pruning decision acts on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: u64,
    pub source_path: String,
    pub byte_len: u64,
    pub token_count: u64,
}

/// Ordered documents plus their split labels.
///
/// Document ids are dense and equal to the position in `documents`. Manifests
/// derived from another one (bootstrap subsets, kept sets) are renumbered and
/// remember the id each document had in the root manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    documents: Vec<Document>,
    splits: Vec<Split>,
    tokenizer_id: String,
    total_tokens: u64,
    origin_ids: Option<Vec<u64>>,
}

impl CorpusManifest {
    /// Builds a train-only manifest from `(path, byte_len, token_count)`
    /// triples, assigning ids in order.
    pub fn from_counts<I>(tokenizer_id: impl Into<String>, docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, u64, u64)>,
    {
        let documents: Vec<Document> = docs
            .into_iter()
            .enumerate()
            .map(|(i, (source_path, byte_len, token_count))| Document {
                doc_id: i as u64,
                source_path,
                byte_len,
                token_count,
            })
            .collect();
        let splits = vec![Split::Train; documents.len()];
        Self::from_parts(tokenizer_id.into(), documents, splits, None)
    }

    /// Convenience constructor used heavily in tests: token counts only.
    pub fn from_token_counts(counts: &[u64]) -> Result<Self> {
        Self::from_counts(
            "precomputed",
            counts
                .iter()
                .enumerate()
                .map(|(i, &c)| (format!("doc_{i}"), c, c)),
        )
    }

    fn from_parts(
        tokenizer_id: String,
        documents: Vec<Document>,
        splits: Vec<Split>,
        origin_ids: Option<Vec<u64>>,
    ) -> Result<Self> {
        if splits.len() != documents.len() {
            return Err(Error::Format(
                "split label count differs from document count".into(),
            ));
        }
        if let Some(o) = &origin_ids {
            if o.len() != documents.len() {
                return Err(Error::Format(
                    "origin id count differs from document count".into(),
                ));
            }
        }
        for (i, d) in documents.iter().enumerate() {
            if d.doc_id != i as u64 {
                return Err(Error::Format(format!(
                    "doc_id {} at position {i}; ids must be dense from 0",
                    d.doc_id
                )));
            }
            if d.token_count == 0 {
                return Err(Error::Format(format!("doc_id {i} has zero tokens")));
            }
        }
        let total_tokens = documents.iter().map(|d| d.token_count).sum();
        Ok(Self {
            documents,
            splits,
            tokenizer_id,
            total_tokens,
            origin_ids,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn document(&self, doc_id: u64) -> &Document {
        &self.documents[doc_id as usize]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split(&self, doc_id: u64) -> Split {
        self.splits[doc_id as usize]
    }

    pub fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn token_counts(&self) -> impl Iterator<Item = u64> + '_ {
        self.documents.iter().map(|d| d.token_count)
    }

    /// Ids of documents carrying `split`, ascending.
    pub fn ids_in(&self, split: Split) -> Vec<u64> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i as u64)
            .collect()
    }

    pub fn train_ids(&self) -> Vec<u64> {
        self.ids_in(Split::Train)
    }

    /// `(documents, tokens)` carrying `split`.
    pub fn split_totals(&self, split: Split) -> (u64, u64) {
        self.documents
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .fold((0, 0), |(n, t), (d, _)| (n + 1, t + d.token_count))
    }

    /// Id of `doc_id` in the root manifest this one was derived from.
    pub fn origin_id(&self, doc_id: u64) -> u64 {
        match &self.origin_ids {
            Some(o) => o[doc_id as usize],
            None => doc_id,
        }
    }

    pub fn origin_ids(&self) -> Option<&[u64]> {
        self.origin_ids.as_deref()
    }

    /// Copy with the given split labels.
    pub fn with_splits(&self, splits: Vec<Split>) -> Result<Self> {
        Self::from_parts(
            self.tokenizer_id.clone(),
            self.documents.clone(),
            splits,
            self.origin_ids.clone(),
        )
    }

    /// Manifest restricted to `ids` (any order, no duplicates), renumbered in
    /// ascending original id order.
    pub fn select(&self, ids: &[u64]) -> Result<Self> {
        let mut keep = ids.to_vec();
        keep.sort_unstable();
        if keep.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::param("duplicate id in selection"));
        }
        if let Some(&bad) = keep.iter().find(|&&i| i as usize >= self.len()) {
            return Err(Error::param(format!("doc_id {bad} is not in the manifest")));
        }
        let documents = keep
            .iter()
            .enumerate()
            .map(|(new, &old)| Document {
                doc_id: new as u64,
                ..self.documents[old as usize].clone()
            })
            .collect();
        let splits = keep.iter().map(|&i| self.splits[i as usize]).collect();
        let origin = keep.iter().map(|&i| self.origin_id(i)).collect();
        Self::from_parts(self.tokenizer_id.clone(), documents, splits, Some(origin))
    }

    /// Manifest without the documents in `pruned`.
    pub fn without(&self, pruned: &[u64]) -> Result<Self> {
        let mut drop = vec![false; self.len()];
        for &id in pruned {
            *drop
                .get_mut(id as usize)
                .ok_or_else(|| Error::param(format!("doc_id {id} is not in the manifest")))? = true;
        }
        let keep: Vec<u64> = (0..self.len() as u64).filter(|&i| !drop[i as usize]).collect();
        self.select(&keep)
    }

    /// Stable content digest: two reports referring to manifests with the
    /// same fingerprint refer to the same documents.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.tokenizer_id.as_bytes());
        h.update([0]);
        for (i, d) in self.documents.iter().enumerate() {
            h.update(d.source_path.as_bytes());
            h.update([0]);
            h.update(d.byte_len.to_le_bytes());
            h.update(d.token_count.to_le_bytes());
            h.update([self.splits[i] as u8]);
            h.update(self.origin_id(i as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Line-delimited JSON: one header line, then one line per document.
    pub fn write_jsonl(&self, w: &mut dyn Write) -> Result<()> {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            tokenizer_id: self.tokenizer_id.clone(),
            total_docs: self.len() as u64,
            total_tokens: self.total_tokens,
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for (i, d) in self.documents.iter().enumerate() {
            let line = ManifestLine {
                doc_id: d.doc_id,
                path: d.source_path.clone(),
                token_count: d.token_count,
                byte_len: d.byte_len,
                split: self.splits[i],
                origin_id: self.origin_ids.as_ref().map(|o| o[i]),
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header: ManifestHeader = match lines.next() {
            Some(l) => {
                serde_json::from_str(&l?).map_err(|e| Error::Format(format!("manifest header: {e}")))?
            }
            None => return Err(Error::Format("manifest file is empty (no header line)".into())),
        };
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest {} v{}",
                header.format, header.version
            )));
        }
        let mut documents = Vec::new();
        let mut splits = Vec::new();
        let mut origin = Vec::new();
        for (n, l) in lines.enumerate() {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let line: ManifestLine = serde_json::from_str(&l).map_err(|e| Error::Ingest {
                line: n + 2,
                message: e.to_string(),
            })?;
            origin.push(line.origin_id);
            splits.push(line.split);
            documents.push(Document {
                doc_id: line.doc_id,
                source_path: line.path,
                byte_len: line.byte_len,
                token_count: line.token_count,
            });
        }
        let origin_ids = if origin.iter().all(Option::is_some) && !origin.is_empty() {
            Some(origin.into_iter().flatten().collect())
        } else {
            None
        };
        let m = Self::from_parts(header.tokenizer_id, documents, splits, origin_ids)?;
        if m.len() as u64 != header.total_docs || m.total_tokens != header.total_tokens {
            return Err(Error::Format(format!(
                "header totals ({} docs, {} tokens) disagree with body ({} docs, {} tokens)",
                header.total_docs,
                header.total_tokens,
                m.len(),
                m.total_tokens
            )));
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    tokenizer_id: String,
    total_docs: u64,
    total_tokens: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    doc_id: u64,
    path: String,
    token_count: u64,
    byte_len: u64,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin_id: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerMode {
    /// Every record carries `token_count`.
    Precomputed,
    /// Counts come from [`count_tokens`].
    BuiltinSplitter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerSpec {
    pub mode: TokenizerMode,
    pub description: String,
}

impl TokenizerSpec {
    pub fn precomputed(description: impl Into<String>) -> Self {
        Self {
            mode: TokenizerMode::Precomputed,
            description: description.into(),
        }
    }

    pub fn builtin() -> Self {
        Self {
            mode: TokenizerMode::BuiltinSplitter,
            description: "builtin-splitter-v1".into(),
        }
    }
}

/// One input line. Unknown fields are ignored.
#[derive(Debug, Default, Deserialize)]
struct Record {
    #[serde(default)]
    id: Option<serde_json::Value>,
    #[serde(default)]
    path: Option<String>,
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    token_count: Option<u64>,
}

#[derive(Debug)]
pub struct IngestReport {
    pub manifest: CorpusManifest,
    /// Records dropped because they had zero tokens.
    pub skipped_zero_tokens: usize,
    pub duplicate_paths: usize,
    pub warnings: Vec<String>,
}

/// Builtin splitter: one token per maximal run of alphanumeric or `_`
/// characters, one per other non-whitespace character. Invalid UTF-8 is
/// replaced with U+FFFD, which counts as a symbol.
pub fn count_tokens(content: &[u8]) -> u64 {
    count_tokens_str(&String::from_utf8_lossy(content))
}

fn count_tokens_str(s: &str) -> u64 {
    let mut count = 0;
    let mut in_word = false;
    for c in s.chars() {
        if c.is_alphanumeric() || c == '_' {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

struct Parsed {
    path: String,
    byte_len: u64,
    token_count: u64,
}

fn parse_record(line_no: usize, text: &str, tokenizer: &TokenizerSpec) -> Result<Parsed> {
    let rec: Record = serde_json::from_str(text).map_err(|e| Error::Ingest {
        line: line_no,
        message: format!("malformed record: {e}"),
    })?;
    let malformed = |message: &str| Error::Ingest {
        line: line_no,
        message: message.to_string(),
    };
    let path = match (rec.path, rec.id) {
        (Some(p), _) => p,
        (None, Some(serde_json::Value::String(s))) => s,
        (None, Some(v)) if !v.is_null() => v.to_string(),
        _ => return Err(malformed("record has neither path nor id")),
    };
    let byte_len = rec.content.as_ref().map_or(0, |c| c.len() as u64);
    let token_count = match tokenizer.mode {
        TokenizerMode::Precomputed => rec
            .token_count
            .ok_or_else(|| malformed("precomputed tokenizer mode requires token_count"))?,
        TokenizerMode::BuiltinSplitter => match (&rec.content, rec.token_count) {
            (Some(c), _) => count_tokens_str(c),
            (None, Some(t)) => t,
            (None, None) => return Err(malformed("record has neither content nor token_count")),
        },
    };
    Ok(Parsed {
        path,
        byte_len,
        token_count,
    })
}

/// Reads line-delimited JSON records into a train-only manifest.
///
/// Token counting runs in parallel; ids follow stream order regardless.
pub fn ingest<R: BufRead>(mut reader: R, tokenizer: &TokenizerSpec) -> Result<IngestReport> {
    let mut lines: Vec<(usize, String)> = Vec::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let text = String::from_utf8_lossy(&buf);
        if !text.trim().is_empty() {
            lines.push((line_no, text.into_owned()));
        }
    }

    let parsed = par::map_slice(&lines, |(n, text)| parse_record(*n, text, tokenizer));

    let mut docs = Vec::with_capacity(parsed.len());
    let mut skipped = 0;
    for p in parsed {
        let p = p?;
        if p.token_count == 0 {
            skipped += 1;
            continue;
        }
        docs.push((p.path, p.byte_len, p.token_count));
    }

    let mut warnings = Vec::new();
    if skipped > 0 {
        warnings.push(format!("skipped {skipped} zero-token record(s)"));
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (path, _, _) in &docs {
        *seen.entry(path.as_str()).or_default() += 1;
    }
    let mut dup_paths: Vec<(&str, usize)> = seen.into_iter().filter(|(_, n)| *n > 1).collect();
    dup_paths.sort_unstable();
    let duplicate_paths = dup_paths.len();
    for (path, n) in dup_paths {
        warnings.push(format!("path {path:?} appears {n} times; all copies kept"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let manifest = CorpusManifest::from_counts(tokenizer.description.clone(), docs)?;
    Ok(IngestReport {
        manifest,
        skipped_zero_tokens: skipped,
        duplicate_paths,
        warnings,
    })
}

/// Relabels up to `per_bin_quota` train documents per length bin as
/// validation, sampled uniformly with `seed`.
pub fn make_validation_split(
    manifest: &CorpusManifest,
    per_bin_quota: usize,
    bins: &LengthBinning,
    seed: u64,
) -> Result<CorpusManifest> {
    if per_bin_quota == 0 {
        return Err(Error::param("per_bin_quota must be at least 1"));
    }
    let mut members: Vec<Vec<u64>> = vec![Vec::new(); bins.len()];
    for id in manifest.train_ids() {
        members[bins.bin_of(manifest.document(id).token_count)].push(id);
    }

    let mut rng = seeded_rng(seed);
    let mut splits = manifest.splits().to_vec();
    let mut saturated = true;
    for pool in &members {
        if pool.len() > per_bin_quota {
            saturated = false;
        }
        let take = pool.len().min(per_bin_quota);
        for i in index::sample(&mut rng, pool.len(), take) {
            splits[pool[i] as usize] = Split::Validation;
        }
    }
    if saturated && !manifest.is_empty() {
        log::warn!(
            "validation quota {per_bin_quota} covers every length bin; all train documents became validation"
        );
    }
    manifest.with_splits(splits)
}
