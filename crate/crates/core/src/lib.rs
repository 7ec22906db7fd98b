//! Learning scenario dictionaries from object-scene co-occurrence data.
//!
//! A scenario is a set of objects that tend to appear together. Given a binary
//! objects-by-instances matrix, [`pbmf::factorize`] learns a dictionary `W`
//! whose columns are soft scenario memberships and an encoding `H` saying
//! which scenarios each instance activates, under a soft-capped product that
//! mimics Boolean OR. The surrounding modules turn that decomposition into a
//! working pipeline: baselines to compare against, a feature-to-encoding
//! head, a scene classifier with per-scenario influence scores, and
//! content-based retrieval over encoded corpora.

pub mod baselines;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod head;
pub mod matrix;
pub mod pbmf;
pub mod pipeline;
pub mod retrieval;
pub mod synth;

pub use error::{Error, Result};
