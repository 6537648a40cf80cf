//! The book's chapters, compiled as rustdoc so `cargo test --doc` runs
//! every code snippet. One module per chapter keeps test failures
//! attributable to their chapter.
//!
//! mdBook renders `book/` for reading; this crate exists so the rendered
//! prose and the library can never drift apart silently.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/data-model.md")]
pub mod data_model {}

#[doc = include_str!("../../../book/src/observations.md")]
pub mod observations {}

#[doc = include_str!("../../../book/src/calibration.md")]
pub mod calibration {}

#[doc = include_str!("../../../book/src/filtering.md")]
pub mod filtering {}

#[doc = include_str!("../../../book/src/baselines.md")]
pub mod baselines {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/decision.md")]
pub mod decision {}

#[doc = include_str!("../../../book/src/synthetic.md")]
pub mod synthetic {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
