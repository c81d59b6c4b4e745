//! Pipeline for aligning an instruction-tuning (SFT) dataset with a
//! pre-training corpus.
//!
//! The stages, in order: sample the corpus (reservoir sampling), embed
//! records, project embeddings to 2D with PCA, estimate densities with a
//! Gaussian KDE, extract the difference set (corpus records
//! underrepresented in the SFT distribution), rewrite those records into
//! instruction-response pairs through a three-step prompted LLM
//! procedure, and merge the rewritten pairs back into the SFT dataset.

pub mod cli;
pub mod corpus_io;
pub mod density;
pub mod diffset;
pub mod embedding;
pub mod error;
pub mod merge;
pub mod projection;
pub mod rewrite;
pub mod viz;

pub use error::{Error, Result};
