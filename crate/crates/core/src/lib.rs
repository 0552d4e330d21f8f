//! Open-loop trajectory optimization with time-varying LQR tracking for
//! nonlinear systems under small additive noise, plus the tools to check
//! the near-optimality claims numerically.
//!
//! The guide in `book/` walks through the pipeline; its listings run as
//! doctests of this crate.

// Negated float comparisons are how NaN gets rejected; index loops mirror
// the time-indexed formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod export;
pub mod large_deviations;
pub mod lqr;
pub mod planner;
pub mod rng;
pub mod separation;
pub mod simulator;
pub mod stats;
pub mod verify;

// mdbook cannot run Rust listings against a library, so each chapter is
// pulled in as the docs of an empty module and rustdoc tests it.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/car-model.md")]
    mod car_model {}
    #[doc = include_str!("../../../book/src/planning.md")]
    mod planning {}
    #[doc = include_str!("../../../book/src/tracking.md")]
    mod tracking {}
    #[doc = include_str!("../../../book/src/error-propagation.md")]
    mod error_propagation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/small-noise.md")]
    mod small_noise {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
