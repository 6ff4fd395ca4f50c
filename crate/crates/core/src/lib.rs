//! Grammatical error correction toolkit.
//!
//! The pipeline runs from parallel or revision-mined data, through BPE
//! subwords and noise injection, to a small encoder-decoder transformer
//! trained with edited MLE and whole-word embedding dropout, and finally
//! iterative beam decoding scored with span-level F0.5.

pub mod align;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod model;
pub mod noising;
pub mod subword;
pub mod tokenize;
pub mod training;

pub use error::{Error, Result};
