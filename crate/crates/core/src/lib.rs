//! Selection of pseudo in-domain parallel data from a general-domain corpus
//! by sentence-embedding similarity to a monolingual in-domain corpus.
//!
//! The pipeline embeds both corpora, reduces the embeddings with PCA, runs
//! an exact top-n cosine search for every in-domain sentence, and writes the
//! selected pairs out as per-rank and stacked sub-corpora.

pub mod corpus_io;
pub mod diagnostics;
pub mod embedding_store;
pub mod error;
pub mod hashing;
pub mod pca;
pub mod pipeline;
pub mod selection_builder;
pub mod semantic_search;

pub use error::{Error, Result};
