//! Document embedding matrices aligned to a manifest.
//!
//! On disk a matrix is a 24-byte header followed by row-major little-endian
//! f32 values:
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `EMBD`                       |
//! | 4      | 4    | format version (u32)               |
//! | 8      | 8    | row count (u64)                    |
//! | 16     | 4    | dimensionality (u32)               |
//! | 20     | 4    | flags (u32), bit 0 = rows are unit |
//!
//! Row `i` belongs to document `i`.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::par;
use crate::stats::LengthBinning;
use crate::util::seeded_rng;

pub const EMBD_MAGIC: [u8; 4] = *b"EMBD";
pub const EMBD_VERSION: u32 = 1;
pub const EMBD_HEADER_LEN: usize = 24;
const FLAG_NORMALIZED: u32 = 1;

/// Tolerance on the L2 norm of rows flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n_rows: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn norm(row: &[f32]) -> f64 {
    dot(row, row).sqrt()
}

impl EmbeddingMatrix {
    /// Validates shape, rejects zero rows, and checks unit norms when
    /// `normalized` is set.
    pub fn new(n_rows: usize, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if data.len() != n_rows * dim {
            return Err(Error::Format(format!(
                "expected {} values for {n_rows}x{dim}, got {}",
                n_rows * dim,
                data.len()
            )));
        }
        if dim == 0 && n_rows > 0 {
            return Err(Error::Format("embedding dimensionality is zero".into()));
        }
        let m = Self {
            n_rows,
            dim,
            data,
            normalized,
        };
        for i in 0..n_rows {
            let n = norm(m.row(i));
            if !n.is_finite() {
                return Err(Error::Data {
                    row: i,
                    message: "non-finite value".into(),
                });
            }
            if n == 0.0 {
                return Err(Error::Data {
                    row: i,
                    message: "zero-norm row".into(),
                });
            }
            if normalized && (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Data {
                    row: i,
                    message: format!("row flagged normalized has norm {n}"),
                });
            }
        }
        Ok(m)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.row(i), self.row(j));
        if self.normalized {
            dot(a, b)
        } else {
            dot(a, b) / (norm(a) * norm(b))
        }
    }

    /// Rows `ids[0], ids[1], ...` as a new matrix.
    pub fn select_rows(&self, ids: &[u64]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            if id as usize >= self.n_rows {
                return Err(Error::Alignment(format!(
                    "row {id} requested from a matrix of {} rows",
                    self.n_rows
                )));
            }
            data.extend_from_slice(self.row(id as usize));
        }
        Ok(Self {
            n_rows: ids.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        })
    }

    /// Parses the binary layout. When `expected_rows` is given, a mismatching
    /// header fails before any row data is read.
    pub fn read_from<R: Read>(mut r: R, expected_rows: Option<usize>) -> Result<Self> {
        let mut header = [0u8; EMBD_HEADER_LEN];
        r.read_exact(&mut header).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated header".into()),
            _ => Error::Io(e),
        })?;
        if header[0..4] != EMBD_MAGIC {
            return Err(Error::Format("bad magic, not an EMBD file".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != EMBD_VERSION {
            return Err(Error::Format(format!("unsupported EMBD version {version}")));
        }
        let n_rows = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let flags = u32::from_le_bytes(header[20..24].try_into().unwrap());
        if let Some(expected) = expected_rows {
            if expected != n_rows {
                return Err(Error::Alignment(format!(
                    "embedding file has {n_rows} rows but the manifest has {expected} documents"
                )));
            }
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let want = n_rows
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("header shape overflows".into()))?;
        if body.len() < want {
            return Err(Error::Format(format!(
                "truncated data: expected {want} bytes, found {}",
                body.len()
            )));
        }
        if body.len() > want {
            return Err(Error::Format(format!(
                "{} trailing bytes after row data",
                body.len() - want
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(n_rows, dim, data, flags & FLAG_NORMALIZED != 0)
    }

    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(&EMBD_MAGIC)?;
        w.write_all(&EMBD_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_rows as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        let flags = if self.normalized { FLAG_NORMALIZED } else { 0 };
        w.write_all(&flags.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }
}

pub fn load_embeddings<R: Read>(reader: R, manifest: &CorpusManifest) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::read_from(reader, Some(manifest.len()))
}

/// Scales every row to unit L2 norm.
pub fn normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let dim = matrix.dim;
    let rows = par::map_range(matrix.n_rows, |i| {
        let row = matrix.row(i);
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Data {
                row: i,
                message: "cannot normalize a zero-norm row".into(),
            });
        }
        Ok(row.iter().map(|&v| (v as f64 / n) as f32).collect::<Vec<f32>>())
    });
    let mut data = Vec::with_capacity(matrix.data.len());
    for r in rows {
        data.extend(r?);
    }
    Ok(EmbeddingMatrix {
        n_rows: matrix.n_rows,
        dim,
        data,
        normalized: true,
    })
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic length-confounded embeddings for tests and demos.
///
/// Each document mixes a private random direction with an anchor shared by
/// its length bin: `normalize((1 - c_b) * r + c_b * a_bin)`, where the
/// coupling `c_b = coupling^(b + 1)` weakens with the bin index `b`. Short
/// documents therefore pack tightly around their anchor while long ones
/// spread out, the way code encoders tend to behave.
pub fn synthetic_embed(
    manifest: &CorpusManifest,
    dim: usize,
    seed: u64,
    coupling: f64,
    bins: &LengthBinning,
) -> Result<EmbeddingMatrix> {
    if dim < 2 {
        return Err(Error::param("synthetic embeddings need dim >= 2"));
    }
    if !(0.0..=1.0).contains(&coupling) {
        return Err(Error::param(format!(
            "length_coupling must lie in [0, 1], got {coupling}"
        )));
    }
    let anchors: Vec<Vec<f64>> = (0..bins.len())
        .map(|b| random_unit(&mut stream_rng(seed, u64::MAX - b as u64), dim))
        .collect();
    let rows = par::map_range(manifest.len(), |i| {
        let b = bins.bin_of(manifest.document(i as u64).token_count);
        let c = coupling.powi(b as i32 + 1);
        let r = random_unit(&mut stream_rng(seed, i as u64), dim);
        let mut v: Vec<f64> = r
            .iter()
            .zip(&anchors[b])
            .map(|(x, a)| (1.0 - c) * x + c * a)
            .collect();
        let mut n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            // exact cancellation; fall back to the private direction
            v = r;
            n = 1.0;
        }
        v.into_iter().map(|x| (x / n) as f32).collect::<Vec<f32>>()
    });
    let data = rows.into_iter().flatten().collect();
    EmbeddingMatrix::new(manifest.len(), dim, data, true)
}
