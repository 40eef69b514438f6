//! Arbitrary-ratio feature compression.
//!
//! A causal transformer turns a `D`-dimensional feature into `T` generated
//! tokens, one at a time, so that every token-aligned prefix of its output is
//! itself a usable lower-dimensional code. A mixture-of-solutions stage
//! refines the code from several dropout views, and a relation-graph penalty
//! keeps pairwise cosine structure intact while training.

pub mod ablation;
pub mod arc;
pub mod decoderpool;
pub mod ergc;
pub mod error;
pub mod evalkit;
pub mod featureio;
pub mod mos;
pub mod numkit;
mod objective;
pub mod schedule;
pub mod tokenizer;
pub mod trainer;

pub use objective::LossParts;

pub use error::{ArfcError, Result};
