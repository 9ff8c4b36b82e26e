//! Length-aware data pruning for code corpora.
//!
//! Ingest a corpus into a [`CorpusManifest`], inspect its length
//! distribution, cluster document embeddings, apply pruning strategies, and
//! run bootstrap experiments comparing them. Heavy loops run on rayon when the
//! `parallel` feature is enabled; every result is independent of the thread
//! count.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod clustering;
pub mod corpus;
pub mod embeddings;
mod error;
pub mod harness;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod pruning;
pub mod stats;
mod util;

pub use clustering::{kmeans, Clustering, ClusteringConfig};
pub use corpus::{ingest, CorpusManifest, Document, Split, TokenizerSpec};
pub use embeddings::EmbeddingMatrix;
pub use error::{Error, Result};
pub use harness::{BootstrapPlan, PackingConfig};
pub use pipeline::{run_pipeline, PipelineConfig};
pub use pruning::{apply, PruneReport, PruneSpec, Strategy};
pub use stats::{build_cdf, LengthBinning, LengthCdf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
