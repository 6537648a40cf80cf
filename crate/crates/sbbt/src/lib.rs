//! Prefix-safe belief tracking for sequential traces.
//!
//! The crate turns heterogeneous per-prefix observations into an online
//! eventual-success belief: observation extraction ([`observers`]),
//! state-conditioned likelihood calibration ([`calibration`]), a two-state
//! Bayesian filter with log-odds evidence accounting ([`tracker`]), a
//! prefix-safe comparator set ([`baselines`]), rank and probability-quality
//! metrics with bootstrap intervals ([`metrics`]), decision utilities
//! ([`decision`]), and a synthetic corpus generator used as a ground-truth
//! oracle ([`synth`]).
//!
//! Everything online flows through [`corpus::PrefixView`]: a view built for
//! prefix `t` cannot yield later events, and every fitted artifact carries a
//! fit-partition provenance tag that evaluators check before use.

pub mod baselines;
pub mod calibration;
pub mod corpus;
pub mod decision;
pub mod isotonic;
pub mod logistic;
pub mod metrics;
pub mod observers;
pub mod pipeline;
pub mod provenance;
pub mod synth;
pub mod tracker;

pub use corpus::{load_corpus, make_splits, ObservationEvent, PrefixView, SplitAssignment, TraceRecord};
pub use provenance::{FitPartition, Provenance};
