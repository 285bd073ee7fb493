//! Probable-class nearest-neighbor (PCNN) re-ranking.
//!
//! A frozen classifier proposes its top-K classes for a query. For each of
//! those classes the nearest training image is retrieved, a learned binary
//! comparator scores the (query, neighbor) pair, and the classes are
//! re-ranked by classifier probability × comparator score.
//!
//! Module map:
//!
//! - [`numkernel`]: tensors and a reverse-mode tape used to train the comparator
//! - [`embedstore`]: token-grid embeddings, manifests and the binary payload
//! - [`nnindex`]: exact squared-L2 retrieval per class and globally
//! - [`classifier`]: probability tables, top-Q selection, synthetic classifier
//! - [`pairsampler`]: positive / hard-negative pair construction
//! - [`comparator`]: the comparator network, training loop and binary metrics
//! - [`reranker`]: soft/hard re-ranking, kNN baselines, sanity checks, ceilings
//! - [`synth`]: desk-scale synthetic datasets
//! - [`experiment`]: end-to-end multi-seed runs and explanation export

pub mod classifier;
pub mod comparator;
pub mod embedstore;
mod error;
pub mod experiment;
mod ids;
pub mod nnindex;
pub mod numkernel;
pub mod pairsampler;
pub mod reranker;
pub mod synth;

pub use error::{Error, Result};
pub use ids::{ClassId, RecordId, Split};
