//! Causal evaluation engine for travel mode-shift incentive programs.
//!
//! The crate covers the full evaluation pipeline for a program that rewards
//! low-carbon travel:
//!
//! 1. [`synth`] — a seeded synthetic-city generator with planted treatment
//!    effects, the ground-truth oracle for everything downstream.
//! 2. [`trips`] / [`panel`] — domain types, CSV ingestion, and the monthly
//!    individual panel of low-carbon travel ratios.
//! 3. [`psm`] — logistic propensity scores and 1:2 greedy caliper matching
//!    with balance diagnostics.
//! 4. [`did`] — two-way fixed-effects estimators: average treatment effect,
//!    event study, heterogeneous effects, and placebo tests.
//! 5. [`forest`] / [`carbon`] — counterfactual mode inference with a random
//!    forest and mode-shift carbon accounting.
//! 6. [`spatial`] — daily zone graphs, a dual-channel graph-convolutional
//!    embedding model, hierarchical clustering of zones, and infrastructure
//!    regression.
//! 7. [`pipeline`] — the artifacts-on-disk orchestrator behind the CLI.
//!
//! The `book/` directory of the repository walks through the concepts; its
//! code snippets compile and run as doc-tests of this crate.

pub mod carbon;
pub mod did;
pub mod error;
pub mod forest;
pub(crate) mod linalg;
pub mod panel;
pub mod pipeline;
pub mod psm;
pub mod spatial;
pub mod synth;
pub mod trips;

pub use error::{Error, Result};

// Book chapters double as doc-tests so the guide can never drift from the
// API: every fenced Rust block in `book/src/*.md` compiles and runs under
// `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-city.md")]
    mod synthetic_city {}
    #[doc = include_str!("../../../book/src/panel.md")]
    mod panel {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/difference-in-differences.md")]
    mod difference_in_differences {}
    #[doc = include_str!("../../../book/src/counterfactual-carbon.md")]
    mod counterfactual_carbon {}
    #[doc = include_str!("../../../book/src/spatial.md")]
    mod spatial {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
