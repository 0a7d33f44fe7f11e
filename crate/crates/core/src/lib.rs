//! Inference with few treated units.
//!
//! Tests of sharp nulls, prediction sets for the realized average effect on
//! the treated, and confidence sets for realized effects, together with a
//! Monte Carlo harness that checks their coverage and size.
//!
//! The guide in `book/` walks through each procedure; its code listings are
//! compiled and run as doctests of this crate.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod estimators;
pub mod intervals;
pub mod model;
pub mod quantile_models;
pub mod simulation;

pub use error::{Error, Result};
pub use model::{
    validate, Assumption, AssumptionSet, Dataset, Hypothesis, HypothesisKind, IntervalSet, Level,
    RawRecord, TestResult,
};

pub use simulation::{DgpKind, DgpSpec, SimConfig, SimReport};

/// Chapters of the guide, compiled so that their listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/estimator.md")]
    mod estimator {}
    #[doc = include_str!("../../../book/src/sharp-nulls.md")]
    mod sharp_nulls {}
    #[doc = include_str!("../../../book/src/quantile-models.md")]
    mod quantile_models {}
    #[doc = include_str!("../../../book/src/intervals.md")]
    mod intervals {}
    #[doc = include_str!("../../../book/src/realized-vs-prediction.md")]
    mod realized_vs_prediction {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
