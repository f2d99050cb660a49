//! Gradient tracking for decentralized optimization.
//!
//! The crate simulates the unified gradient-tracking iteration over a network
//! of `n` nodes, each holding a local function `f_i`, and evaluates the
//! accompanying convergence theory.
//!
//! - [`topology`]: graphs, mixing matrices and communication strategies.
//! - [`problems`]: quadratic and logistic-regression objective suites.
//! - [`gta`]: the iteration itself and its error traces.
//! - [`theory`]: convergence matrices, step-size bounds and rate bounds.
//! - [`harness`]: experiment configuration, step-size tuning and reports.

pub mod fmt;
pub mod gta;
pub mod harness;
pub mod problems;
pub mod theory;
pub mod topology;

/// Guide chapters compiled as doc-tests so the book cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/topology.md")]
    mod topology {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/algorithm.md")]
    mod algorithm {}
    #[doc = include_str!("../../../book/src/theory.md")]
    mod theory {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
