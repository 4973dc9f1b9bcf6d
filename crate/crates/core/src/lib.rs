//! Score distillation for conversational sparse retrieval.
//!
//! A student encoder reads the whole conversation and is trained so that its
//! query-document scores match those an ad-hoc teacher assigns when it reads a
//! self-contained rewrite of the last utterance. Retrieval runs over an
//! inverted index of sparse vocabulary-sized document vectors.

pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod pipeline;
pub mod sparse;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use sparse::SparseVec;
