//! Bias measurement and decode-time debiasing for autoregressive language
//! models, built around a small linear toy model.
//!
//! ```
//! use fairdec::metrics::{counterfactual_swap, SwapMap};
//!
//! let pair = counterfactual_swap(&["she", "was", "a", "doctor"], &SwapMap::gender())?;
//! assert_eq!(pair.c2, vec!["he", "was", "a", "doctor"]);
//! # Ok::<(), fairdec::Error>(())
//! ```

pub mod benchmark;
pub mod classifier;
pub mod debias;
pub mod embeddings;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod subspace;
pub mod synthetic;

pub use error::{Error, Result};

/// Runs the guide's code blocks as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/subspace.md")]
    mod subspace {}
    #[doc = include_str!("../../../book/src/toy-model.md")]
    mod toy_model {}
    #[doc = include_str!("../../../book/src/nullspace.md")]
    mod nullspace {}
    #[doc = include_str!("../../../book/src/adaptive.md")]
    mod adaptive {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
