//! Few-shot sleep staging with a spatial-temporal hypergraph learner and
//! model-agnostic meta-learning.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod hypergraph;
pub mod learner;
pub mod meta;
pub mod metrics;
