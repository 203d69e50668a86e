//! Sample-point adaptive kernel density estimation with full per-point
//! bandwidth matrices, classical and neural bandwidth selection, synthetic
//! benchmark targets and an experiment harness.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod finetune;
pub mod harness;
pub mod io;
pub mod kde;
pub mod kernel;
pub mod loo;
pub mod neighbors;
pub mod recommender;
pub mod rng;
pub mod selectors;
pub mod targets;

pub use error::{Error, Result};

// Keeps the guide's snippets compiling and passing.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/kernels.md")]
    struct Kernels;
    #[doc = include_str!("../../../book/src/selectors.md")]
    struct Selectors;
    #[doc = include_str!("../../../book/src/targets.md")]
    struct Targets;
    #[doc = include_str!("../../../book/src/recommender.md")]
    struct Recommender;
    #[doc = include_str!("../../../book/src/finetune.md")]
    struct Finetune;
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    struct Benchmarks;
}
