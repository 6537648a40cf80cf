//! State-conditioned emission likelihood calibration.
//!
//! Likelihood tables are probability masses over score bins and concept
//! codes, additively smoothed so every entry stays positive. Three fitting
//! modes share the counting core: all-prefix weak supervision propagates each
//! trace's final label to every prefix, final-step counts only the last
//! observation, and the EM variant re-estimates emissions from expected
//! counts while transitions stay fixed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ObservationEvent, TraceRecord};
use crate::isotonic::{IsotonicError, IsotonicMap};
use crate::provenance::Provenance;
use crate::tracker;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration set contains a single label class")]
    SingleClass,
    #[error("calibration set is empty")]
    Empty,
    #[error("concept alphabet is empty but mode `{0}` needs one")]
    EmptyAlphabet(String),
    #[error("smoothing constant must be positive, got {0}")]
    BadLambda(f64),
    #[error("bin count must be at least 1, got {0}")]
    BadBinCount(usize),
    #[error("no scores available to fit bin edges")]
    NoScores,
    #[error("non-finite score while fitting bin edges")]
    NonFiniteScore,
    #[error("trace `{trace_id}` event t={t} is missing the {channel} channel")]
    MissingChannel {
        trace_id: String,
        t: usize,
        channel: &'static str,
    },
    #[error("trace `{trace_id}` event t={t} carries concept `{code}` outside the declared alphabet")]
    UnknownConcept {
        trace_id: String,
        t: usize,
        code: String,
    },
    #[error("invalid emission model: {0}")]
    InvalidModel(String),
    #[error("non-finite log-likelihood during EM (degenerate initialization)")]
    NonFiniteLikelihood,
    #[error(transparent)]
    Isotonic(#[from] IsotonicError),
    #[error(transparent)]
    Tracker(#[from] Box<crate::tracker::TrackerError>),
    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file `{path}`: {message}")]
    Malformed { path: String, message: String },
}

/// How score bin edges are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinningKind {
    /// Equal-width bins over the observed calibration range.
    Histogram,
    /// Equal-mass edges from the calibration score quantiles.
    Quantile,
}

/// Fitted score discretization. Duplicated quantile edges collapse into
/// fewer bins, so `bins()` is the effective count, which may be smaller than
/// requested. Out-of-range scores clamp to the nearest edge bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub kind: BinningKind,
    pub requested_bins: usize,
    pub edges: Vec<f64>,
}

impl BinningSpec {
    pub fn fit(kind: BinningKind, k_bins: usize, scores: &[f64]) -> Result<Self, CalibrationError> {
        if k_bins < 1 {
            return Err(CalibrationError::BadBinCount(k_bins));
        }
        if scores.is_empty() {
            return Err(CalibrationError::NoScores);
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(CalibrationError::NonFiniteScore);
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];

        let edges = if hi - lo <= 0.0 {
            // Constant scores: a single unit-width bin around the value.
            vec![lo - 0.5, lo + 0.5]
        } else {
            match kind {
                BinningKind::Histogram => (0..=k_bins)
                    .map(|i| lo + (hi - lo) * i as f64 / k_bins as f64)
                    .collect(),
                BinningKind::Quantile => {
                    let mut raw = Vec::with_capacity(k_bins + 1);
                    for i in 0..=k_bins {
                        let q = i as f64 / k_bins as f64;
                        let pos = q * (sorted.len() - 1) as f64;
                        let lo_idx = pos.floor() as usize;
                        let hi_idx = pos.ceil() as usize;
                        let frac = pos - lo_idx as f64;
                        raw.push(sorted[lo_idx] * (1.0 - frac) + sorted[hi_idx] * frac);
                    }
                    // Saturated scores duplicate quantiles; collapse them.
                    let mut edges = vec![raw[0]];
                    for e in raw.into_iter().skip(1) {
                        if e > *edges.last().unwrap() {
                            edges.push(e);
                        }
                    }
                    if edges.len() < 2 {
                        vec![lo - 0.5, lo + 0.5]
                    } else {
                        edges
                    }
                }
            }
        };
        Ok(BinningSpec {
            kind,
            requested_bins: k_bins,
            edges,
        })
    }

    /// Effective bin count after any edge collapsing.
    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin index for a score; out-of-range values take the nearest edge bin.
    pub fn bin_of(&self, score: f64) -> usize {
        let last = self.bins() - 1;
        if score <= self.edges[0] {
            return 0;
        }
        if score >= self.edges[self.edges.len() - 1] {
            return last;
        }
        self.edges.partition_point(|e| *e <= score) - 1
    }
}

/// Which observation channels the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmissionMode {
    ScoreOnly,
    ConceptOnly,
    Hybrid,
    Joint,
}

impl EmissionMode {
    pub fn needs_score(self) -> bool {
        matches!(self, EmissionMode::ScoreOnly | EmissionMode::Hybrid | EmissionMode::Joint)
    }
    pub fn needs_concept(self) -> bool {
        matches!(self, EmissionMode::ConceptOnly | EmissionMode::Hybrid | EmissionMode::Joint)
    }
}

impl std::fmt::Display for EmissionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmissionMode::ScoreOnly => write!(f, "score-only"),
            EmissionMode::ConceptOnly => write!(f, "concept-only"),
            EmissionMode::Hybrid => write!(f, "hybrid"),
            EmissionMode::Joint => write!(f, "joint"),
        }
    }
}

/// Two-state transition parameters. Matrix convention is `[from][to]` with
/// state 0 = L and state 1 = H, so `A[H][L]` is the error probability and
/// `A[L][H]` the recovery probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Transitions {
    Stationary { p_error: f64, p_recover: f64 },
    /// Explicit per-step matrices: entry `i` governs the transition into
    /// step `t = i + 2`. Steps beyond the list reuse the final matrix.
    Schedule { matrices: Vec<[[f64; 2]; 2]> },
}

impl Transitions {
    /// Transition matrix applied when moving into step `t` (`t >= 2`).
    pub fn matrix_at(&self, t: usize) -> [[f64; 2]; 2] {
        match self {
            Transitions::Stationary { p_error, p_recover } => [
                [1.0 - p_recover, *p_recover],
                [*p_error, 1.0 - p_error],
            ],
            Transitions::Schedule { matrices } => {
                let idx = t.saturating_sub(2).min(matrices.len() - 1);
                matrices[idx]
            }
        }
    }

    fn validate(&self) -> Result<(), CalibrationError> {
        match self {
            Transitions::Stationary { p_error, p_recover } => {
                for p in [p_error, p_recover] {
                    if !(0.0..=1.0).contains(p) {
                        return Err(CalibrationError::InvalidModel(format!(
                            "transition probability {p} outside [0, 1]"
                        )));
                    }
                }
            }
            Transitions::Schedule { matrices } => {
                if matrices.is_empty() {
                    return Err(CalibrationError::InvalidModel(
                        "empty transition schedule".to_string(),
                    ));
                }
                for m in matrices {
                    for row in m {
                        let sum: f64 = row.iter().sum();
                        if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
                            return Err(CalibrationError::InvalidModel(format!(
                                "transition row {row:?} is not a distribution"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Swap the roles of the two states (used when EM orientation flips).
    fn swapped(&self) -> Transitions {
        match self {
            Transitions::Stationary { p_error, p_recover } => Transitions::Stationary {
                p_error: *p_recover,
                p_recover: *p_error,
            },
            Transitions::Schedule { matrices } => Transitions::Schedule {
                matrices: matrices
                    .iter()
                    .map(|m| [[m[1][1], m[1][0]], [m[0][1], m[0][0]]])
                    .collect(),
            },
        }
    }
}

/// Per-state likelihood masses over one discrete domain; index 0 = L, 1 = H
/// after orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTable {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl StateTable {
    fn from_counts(low: &[f64], high: &[f64], lambda: f64) -> StateTable {
        let norm = |counts: &[f64]| {
            let total: f64 = counts.iter().map(|c| c + lambda).sum();
            counts.iter().map(|c| (c + lambda) / total).collect()
        };
        StateTable {
            low: norm(low),
            high: norm(high),
        }
    }

    fn validate(&self, what: &str) -> Result<(), CalibrationError> {
        for (state, table) in [("L", &self.low), ("H", &self.high)] {
            if table.is_empty() {
                return Err(CalibrationError::InvalidModel(format!("{what} table for {state} is empty")));
            }
            let sum: f64 = table.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CalibrationError::InvalidModel(format!(
                    "{what} table for {state} sums to {sum}, not 1"
                )));
            }
            if table.iter().any(|&p| p <= 0.0) {
                return Err(CalibrationError::InvalidModel(format!(
                    "{what} table for {state} has a non-positive entry"
                )));
            }
        }
        Ok(())
    }

    fn swapped(&self) -> StateTable {
        StateTable {
            low: self.high.clone(),
            high: self.low.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLikelihood {
    pub binning: BinningSpec,
    pub table: StateTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptLikelihood {
    pub alphabet: Vec<String>,
    pub table: StateTable,
}

/// Joint table over (bin, code) pairs, row-major in the bin index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLikelihood {
    pub binning: BinningSpec,
    pub alphabet: Vec<String>,
    pub table: StateTable,
}

/// Which fitted state index became H.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// H is the state fitted against label 1 (or EM state 1).
    Identity,
    /// EM orientation flipped the fitted states.
    Swapped,
}

/// Posterior-to-probability readout applied by the filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Readout {
    /// Use pi_t(H) directly.
    Identity,
    /// rho_H * pi_t(H) + rho_L * pi_t(L).
    Outcome { rho_low: f64, rho_high: f64 },
    /// Monotone calibration map applied to pi_t(H).
    Monotone { map: IsotonicMap },
}

impl Readout {
    pub fn apply(&self, belief: [f64; 2]) -> f64 {
        match self {
            Readout::Identity => belief[1],
            // Interpolation and mixing can overshoot [0, 1] by an ulp.
            Readout::Outcome { rho_low, rho_high } => {
                (rho_high * belief[1] + rho_low * belief[0]).clamp(0.0, 1.0)
            }
            Readout::Monotone { map } => map.eval(belief[1]).clamp(0.0, 1.0),
        }
    }
}

/// How the model was fitted; recorded in the artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FitMode {
    AllPrefix,
    FinalStep,
    Em { iterations: usize, converged: bool },
    /// Constructed directly (synthetic ground truth, tests).
    Constructed,
}

/// Likelihood pair for one event under both states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodPair {
    pub low: f64,
    pub high: f64,
}

/// Calibrated state-conditioned likelihoods plus the filter parameters.
/// The artifact serializes everything needed to reproduce a filter run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionModel {
    pub mode: EmissionMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreLikelihood>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concept: Option<ConceptLikelihood>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint: Option<JointLikelihood>,
    pub transitions: Transitions,
    /// Initial belief over (L, H).
    pub initial_belief: [f64; 2],
    pub smoothing: f64,
    pub orientation: Orientation,
    pub readout: Readout,
    pub fit_mode: FitMode,
    pub provenance: Provenance,
}

impl EmissionModel {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.smoothing <= 0.0 {
            return Err(CalibrationError::BadLambda(self.smoothing));
        }
        self.transitions.validate()?;
        let pi_sum = self.initial_belief[0] + self.initial_belief[1];
        if (pi_sum - 1.0).abs() > 1e-9 || self.initial_belief.iter().any(|p| *p < 0.0) {
            return Err(CalibrationError::InvalidModel(format!(
                "initial belief {:?} is not a distribution",
                self.initial_belief
            )));
        }
        match self.mode {
            EmissionMode::ScoreOnly => {
                let s = self.score.as_ref().ok_or_else(|| {
                    CalibrationError::InvalidModel("score-only mode without a score table".into())
                })?;
                s.table.validate("score")?;
            }
            EmissionMode::ConceptOnly => {
                let c = self.concept.as_ref().ok_or_else(|| {
                    CalibrationError::InvalidModel("concept-only mode without a concept table".into())
                })?;
                c.table.validate("concept")?;
            }
            EmissionMode::Hybrid => {
                let s = self.score.as_ref().ok_or_else(|| {
                    CalibrationError::InvalidModel("hybrid mode without a score table".into())
                })?;
                let c = self.concept.as_ref().ok_or_else(|| {
                    CalibrationError::InvalidModel("hybrid mode without a concept table".into())
                })?;
                s.table.validate("score")?;
                c.table.validate("concept")?;
            }
            EmissionMode::Joint => {
                let j = self.joint.as_ref().ok_or_else(|| {
                    CalibrationError::InvalidModel("joint mode without a joint table".into())
                })?;
                j.table.validate("joint")?;
            }
        }
        Ok(())
    }

    fn event_score(&self, event: &ObservationEvent, trace_id: &str) -> Result<f64, CalibrationError> {
        event.score.ok_or_else(|| CalibrationError::MissingChannel {
            trace_id: trace_id.to_string(),
            t: event.t,
            channel: "score",
        })
    }

    fn concept_index(
        alphabet: &[String],
        event: &ObservationEvent,
        trace_id: &str,
    ) -> Result<usize, CalibrationError> {
        let code = event
            .concept
            .as_deref()
            .ok_or_else(|| CalibrationError::MissingChannel {
                trace_id: trace_id.to_string(),
                t: event.t,
                channel: "concept",
            })?;
        alphabet
            .iter()
            .position(|c| c == code)
            .ok_or_else(|| CalibrationError::UnknownConcept {
                trace_id: trace_id.to_string(),
                t: event.t,
                code: code.to_string(),
            })
    }

    /// Emission likelihood pair for one event, per the model's mode.
    pub fn likelihoods(
        &self,
        event: &ObservationEvent,
        trace_id: &str,
    ) -> Result<LikelihoodPair, CalibrationError> {
        match self.mode {
            EmissionMode::ScoreOnly => {
                let s = self.score.as_ref().expect("validated");
                let k = s.binning.bin_of(self.event_score(event, trace_id)?);
                Ok(LikelihoodPair {
                    low: s.table.low[k],
                    high: s.table.high[k],
                })
            }
            EmissionMode::ConceptOnly => {
                let c = self.concept.as_ref().expect("validated");
                let idx = Self::concept_index(&c.alphabet, event, trace_id)?;
                Ok(LikelihoodPair {
                    low: c.table.low[idx],
                    high: c.table.high[idx],
                })
            }
            EmissionMode::Hybrid => {
                let s = self.score.as_ref().expect("validated");
                let c = self.concept.as_ref().expect("validated");
                let k = s.binning.bin_of(self.event_score(event, trace_id)?);
                let idx = Self::concept_index(&c.alphabet, event, trace_id)?;
                Ok(LikelihoodPair {
                    low: s.table.low[k] * c.table.low[idx],
                    high: s.table.high[k] * c.table.high[idx],
                })
            }
            EmissionMode::Joint => {
                let j = self.joint.as_ref().expect("validated");
                let k = j.binning.bin_of(self.event_score(event, trace_id)?);
                let idx = Self::concept_index(&j.alphabet, event, trace_id)?;
                let cell = k * j.alphabet.len() + idx;
                Ok(LikelihoodPair {
                    low: j.table.low[cell],
                    high: j.table.high[cell],
                })
            }
        }
    }

    /// Swap state roles everywhere: tables, transitions, initial belief.
    pub(crate) fn swap_states(&mut self) {
        if let Some(s) = &mut self.score {
            s.table = s.table.swapped();
        }
        if let Some(c) = &mut self.concept {
            c.table = c.table.swapped();
        }
        if let Some(j) = &mut self.joint {
            j.table = j.table.swapped();
        }
        self.transitions = self.transitions.swapped();
        self.initial_belief = [self.initial_belief[1], self.initial_belief[0]];
        self.orientation = match self.orientation {
            Orientation::Identity => Orientation::Swapped,
            Orientation::Swapped => Orientation::Identity,
        };
    }

    /// Write the artifact as pretty JSON, newline-terminated.
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), CalibrationError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("model serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| CalibrationError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<EmissionModel, CalibrationError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CalibrationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let model: EmissionModel =
            serde_json::from_str(&text).map_err(|e| CalibrationError::Malformed {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        model.validate()?;
        Ok(model)
    }
}

/// Fit-time configuration: binning, alphabet, smoothing, and the filter
/// parameters carried into the fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub mode: EmissionMode,
    pub binning: BinningKind,
    pub k_bins: usize,
    /// Closed concept alphabet; required by concept-consuming modes.
    #[serde(default)]
    pub alphabet: Vec<String>,
    pub lambda: f64,
    pub transitions: Transitions,
    pub initial_belief: [f64; 2],
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec {
            mode: EmissionMode::ScoreOnly,
            binning: BinningKind::Histogram,
            k_bins: 10,
            alphabet: Vec::new(),
            lambda: 1.0,
            transitions: Transitions::Stationary {
                p_error: 0.05,
                p_recover: 0.05,
            },
            initial_belief: [0.5, 0.5],
        }
    }
}

impl CalibrationSpec {
    fn validate(&self) -> Result<(), CalibrationError> {
        if self.lambda <= 0.0 {
            return Err(CalibrationError::BadLambda(self.lambda));
        }
        if self.k_bins < 1 {
            return Err(CalibrationError::BadBinCount(self.k_bins));
        }
        if self.mode.needs_concept() && self.alphabet.is_empty() {
            return Err(CalibrationError::EmptyAlphabet(self.mode.to_string()));
        }
        self.transitions.validate()?;
        Ok(())
    }
}

fn check_both_classes(traces: &[&TraceRecord]) -> Result<(), CalibrationError> {
    if traces.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let pos = traces.iter().filter(|r| r.final_label == 1).count();
    if pos == 0 || pos == traces.len() {
        return Err(CalibrationError::SingleClass);
    }
    Ok(())
}

/// Which events a counting fit consumes.
enum EventScope {
    AllPrefixes,
    FinalOnly,
}

fn fit_counting(
    traces: &[&TraceRecord],
    spec: &CalibrationSpec,
    scope: EventScope,
    fit_mode: FitMode,
) -> Result<EmissionModel, CalibrationError> {
    spec.validate()?;
    check_both_classes(traces)?;

    fn events_of<'r>(record: &'r TraceRecord, scope: &EventScope) -> Vec<&'r ObservationEvent> {
        match scope {
            EventScope::AllPrefixes => record.events.iter().collect(),
            EventScope::FinalOnly => vec![record.events.last().expect("T >= 1")],
        }
    }

    // Gather scores first so the binning is fitted before counting.
    let binning = if spec.mode.needs_score() {
        let mut scores = Vec::new();
        for record in traces {
            for event in events_of(record, &scope) {
                let s = event.score.ok_or_else(|| CalibrationError::MissingChannel {
                    trace_id: record.trace_id.clone(),
                    t: event.t,
                    channel: "score",
                })?;
                scores.push(s);
            }
        }
        Some(BinningSpec::fit(spec.binning, spec.k_bins, &scores)?)
    } else {
        None
    };

    let n_bins = binning.as_ref().map(|b| b.bins()).unwrap_or(0);
    let n_codes = spec.alphabet.len();

    let mut score_low = vec![0.0; n_bins];
    let mut score_high = vec![0.0; n_bins];
    let mut concept_low = vec![0.0; n_codes];
    let mut concept_high = vec![0.0; n_codes];
    let mut joint_low = vec![0.0; n_bins * n_codes];
    let mut joint_high = vec![0.0; n_bins * n_codes];

    for record in traces {
        let success = record.final_label == 1;
        for event in events_of(record, &scope) {
            let bin = match &binning {
                Some(b) => {
                    let s = event.score.ok_or_else(|| CalibrationError::MissingChannel {
                        trace_id: record.trace_id.clone(),
                        t: event.t,
                        channel: "score",
                    })?;
                    Some(b.bin_of(s))
                }
                None => None,
            };
            let code = if spec.mode.needs_concept() {
                Some(EmissionModel::concept_index(
                    &spec.alphabet,
                    event,
                    &record.trace_id,
                )?)
            } else {
                None
            };
            match spec.mode {
                EmissionMode::ScoreOnly | EmissionMode::Hybrid => {
                    let k = bin.unwrap();
                    if success {
                        score_high[k] += 1.0;
                    } else {
                        score_low[k] += 1.0;
                    }
                    if let Some(idx) = code {
                        if success {
                            concept_high[idx] += 1.0;
                        } else {
                            concept_low[idx] += 1.0;
                        }
                    }
                }
                EmissionMode::ConceptOnly => {
                    let idx = code.unwrap();
                    if success {
                        concept_high[idx] += 1.0;
                    } else {
                        concept_low[idx] += 1.0;
                    }
                }
                EmissionMode::Joint => {
                    let cell = bin.unwrap() * n_codes + code.unwrap();
                    if success {
                        joint_high[cell] += 1.0;
                    } else {
                        joint_low[cell] += 1.0;
                    }
                }
            }
        }
    }

    let model = EmissionModel {
        mode: spec.mode,
        score: binning.as_ref().and_then(|b| {
            if matches!(spec.mode, EmissionMode::ScoreOnly | EmissionMode::Hybrid) {
                Some(ScoreLikelihood {
                    binning: b.clone(),
                    table: StateTable::from_counts(&score_low, &score_high, spec.lambda),
                })
            } else {
                None
            }
        }),
        concept: if spec.mode.needs_concept() && spec.mode != EmissionMode::Joint {
            Some(ConceptLikelihood {
                alphabet: spec.alphabet.clone(),
                table: StateTable::from_counts(&concept_low, &concept_high, spec.lambda),
            })
        } else {
            None
        },
        joint: if spec.mode == EmissionMode::Joint {
            Some(JointLikelihood {
                binning: binning.expect("joint mode needs scores"),
                alphabet: spec.alphabet.clone(),
                table: StateTable::from_counts(&joint_low, &joint_high, spec.lambda),
            })
        } else {
            None
        },
        transitions: spec.transitions.clone(),
        initial_belief: spec.initial_belief,
        smoothing: spec.lambda,
        orientation: Orientation::Identity,
        readout: Readout::Identity,
        fit_mode,
        provenance: Provenance::calibration(),
    };
    model.validate()?;
    Ok(model)
}

/// All-prefix weak supervision: every prefix observation is counted under
/// the trace's final label, so H is the success-labeled state by
/// construction.
pub fn fit_allprefix(
    traces: &[&TraceRecord],
    spec: &CalibrationSpec,
) -> Result<EmissionModel, CalibrationError> {
    fit_counting(traces, spec, EventScope::AllPrefixes, FitMode::AllPrefix)
}

/// Final-step calibration: only each trace's last observation is counted.
pub fn fit_finalstep(
    traces: &[&TraceRecord],
    spec: &CalibrationSpec,
) -> Result<EmissionModel, CalibrationError> {
    fit_counting(traces, spec, EventScope::FinalOnly, FitMode::FinalStep)
}

/// EM fitting output: the oriented model plus per-iteration traces of the
/// optimized objective and the plain data log-likelihood.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: EmissionModel,
    /// The quantity the smoothed M-step ascends: data log-likelihood plus
    /// `lambda` times the log of every re-estimated table entry (the
    /// pseudo-count view of additive smoothing). Non-decreasing across
    /// iterations; drives the stopping rule.
    pub objectives: Vec<f64>,
    /// Plain data log-likelihood per iteration. Not guaranteed monotone
    /// under the smoothed M-step.
    pub data_log_likelihoods: Vec<f64>,
    pub converged: bool,
}

/// Log of every table entry the M-step re-estimates, weighted by lambda.
fn smoothing_bonus(model: &EmissionModel) -> f64 {
    let mut total = 0.0;
    if let Some(s) = &model.score {
        total += s.table.low.iter().chain(&s.table.high).map(|p| p.ln()).sum::<f64>();
    }
    if let Some(c) = &model.concept {
        total += c.table.low.iter().chain(&c.table.high).map(|p| p.ln()).sum::<f64>();
    }
    if let Some(j) = &model.joint {
        total += j.table.low.iter().chain(&j.table.high).map(|p| p.ln()).sum::<f64>();
    }
    model.smoothing * total
}

/// Baum-Welch-style emission re-estimation with transitions and the initial
/// belief held fixed. The E-step runs scaled forward-backward per trace; the
/// M-step renormalizes smoothed expected counts, which ascends the
/// lambda-augmented likelihood (see [`EmFit::objectives`]). After fitting,
/// states are oriented so H is the state with the larger expected
/// final-success rate on the calibration traces.
pub fn fit_em(
    traces: &[&TraceRecord],
    init: &EmissionModel,
    iterations: usize,
    tol: f64,
) -> Result<EmFit, CalibrationError> {
    init.validate()?;
    check_both_classes(traces)?;

    let mut model = init.clone();
    let mut objectives = Vec::new();
    let mut data_log_likelihoods = Vec::new();
    let mut converged = false;
    let mut last_gammas: Vec<Vec<[f64; 2]>> = Vec::new();

    for iter in 0..=iterations {
        // E-step under the current parameters.
        let mut total_ll = 0.0;
        let mut gammas = Vec::with_capacity(traces.len());
        for record in traces {
            let fb = tracker::forward_backward(record, &model).map_err(Box::new)?;
            total_ll += fb.log_likelihood;
            gammas.push(fb.gammas);
        }
        if !total_ll.is_finite() {
            return Err(CalibrationError::NonFiniteLikelihood);
        }
        data_log_likelihoods.push(total_ll);
        objectives.push(total_ll + smoothing_bonus(&model));
        last_gammas = gammas;

        if iter > 0 {
            let improvement = objectives[iter] - objectives[iter - 1];
            if improvement < tol {
                converged = true;
                break;
            }
        }
        if iter == iterations {
            break; // cap reached; reported as status, not an error
        }

        m_step(&mut model, traces, &last_gammas)?;
    }

    // Orientation: H is the state with larger expected final-success rate.
    let mut weight = [0.0f64; 2];
    let mut success = [0.0f64; 2];
    for (record, gammas) in traces.iter().zip(&last_gammas) {
        let y = record.final_label as f64;
        for g in gammas {
            for s in 0..2 {
                weight[s] += g[s];
                success[s] += g[s] * y;
            }
        }
    }
    let rho_low = success[0] / weight[0];
    let rho_high = success[1] / weight[1];
    if rho_low > rho_high {
        model.swap_states();
    }

    model.fit_mode = FitMode::Em {
        iterations: objectives.len() - 1,
        converged,
    };
    model.validate()?;
    Ok(EmFit {
        model,
        objectives,
        data_log_likelihoods,
        converged,
    })
}

/// Re-estimate the mode's emission tables from expected counts.
fn m_step(
    model: &mut EmissionModel,
    traces: &[&TraceRecord],
    gammas: &[Vec<[f64; 2]>],
) -> Result<(), CalibrationError> {
    let lambda = model.smoothing;
    if let Some(score) = &model.score {
        let n = score.binning.bins();
        let mut low = vec![0.0; n];
        let mut high = vec![0.0; n];
        for (record, g) in traces.iter().zip(gammas) {
            for (event, gamma) in record.events.iter().zip(g) {
                let s = event.score.ok_or_else(|| CalibrationError::MissingChannel {
                    trace_id: record.trace_id.clone(),
                    t: event.t,
                    channel: "score",
                })?;
                let k = score.binning.bin_of(s);
                low[k] += gamma[0];
                high[k] += gamma[1];
            }
        }
        let binning = score.binning.clone();
        model.score = Some(ScoreLikelihood {
            binning,
            table: StateTable::from_counts(&low, &high, lambda),
        });
    }
    if let Some(concept) = &model.concept {
        let n = concept.alphabet.len();
        let mut low = vec![0.0; n];
        let mut high = vec![0.0; n];
        for (record, g) in traces.iter().zip(gammas) {
            for (event, gamma) in record.events.iter().zip(g) {
                let idx =
                    EmissionModel::concept_index(&concept.alphabet, event, &record.trace_id)?;
                low[idx] += gamma[0];
                high[idx] += gamma[1];
            }
        }
        let alphabet = concept.alphabet.clone();
        model.concept = Some(ConceptLikelihood {
            alphabet,
            table: StateTable::from_counts(&low, &high, lambda),
        });
    }
    if let Some(joint) = &model.joint {
        let n_codes = joint.alphabet.len();
        let n = joint.binning.bins() * n_codes;
        let mut low = vec![0.0; n];
        let mut high = vec![0.0; n];
        for (record, g) in traces.iter().zip(gammas) {
            for (event, gamma) in record.events.iter().zip(g) {
                let s = event.score.ok_or_else(|| CalibrationError::MissingChannel {
                    trace_id: record.trace_id.clone(),
                    t: event.t,
                    channel: "score",
                })?;
                let idx = EmissionModel::concept_index(&joint.alphabet, event, &record.trace_id)?;
                let cell = joint.binning.bin_of(s) * n_codes + idx;
                low[cell] += gamma[0];
                high[cell] += gamma[1];
            }
        }
        let binning = joint.binning.clone();
        let alphabet = joint.alphabet.clone();
        model.joint = Some(JointLikelihood {
            binning,
            alphabet,
            table: StateTable::from_counts(&low, &high, lambda),
        });
    }
    Ok(())
}

/// Hybrid likelihood: score-bin mass times concept mass, as (H, L).
pub fn hybrid_likelihood(
    model: &EmissionModel,
    event: &ObservationEvent,
) -> Result<(f64, f64), CalibrationError> {
    if model.score.is_none() || model.concept.is_none() {
        return Err(CalibrationError::InvalidModel(
            "hybrid likelihood needs both score and concept tables".into(),
        ));
    }
    let s = model.score.as_ref().unwrap();
    let c = model.concept.as_ref().unwrap();
    let k = s.binning.bin_of(model.event_score(event, "<event>")?);
    let idx = EmissionModel::concept_index(&c.alphabet, event, "<event>")?;
    Ok((
        s.table.high[k] * c.table.high[idx],
        s.table.low[k] * c.table.low[idx],
    ))
}

/// Joint likelihood: smoothed (bin, code) cell per state, as (H, L).
pub fn joint_likelihood(
    model: &EmissionModel,
    event: &ObservationEvent,
) -> Result<(f64, f64), CalibrationError> {
    let j = model.joint.as_ref().ok_or_else(|| {
        CalibrationError::InvalidModel("joint likelihood needs a joint table".into())
    })?;
    let k = j.binning.bin_of(model.event_score(event, "<event>")?);
    let idx = EmissionModel::concept_index(&j.alphabet, event, "<event>")?;
    let cell = k * j.alphabet.len() + idx;
    Ok((j.table.high[cell], j.table.low[cell]))
}

/// Outcome-readout weights: label-weighted average of y under each state's
/// posterior responsibility over calibration prefixes.
pub fn fit_outcome_weights(beliefs: &[([f64; 2], u8)]) -> Result<(f64, f64), CalibrationError> {
    if beliefs.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let pos = beliefs.iter().filter(|(_, y)| *y == 1).count();
    if pos == 0 || pos == beliefs.len() {
        return Err(CalibrationError::SingleClass);
    }
    let mut weight = [0.0f64; 2];
    let mut success = [0.0f64; 2];
    for (belief, y) in beliefs {
        for s in 0..2 {
            weight[s] += belief[s];
            success[s] += belief[s] * *y as f64;
        }
    }
    Ok((success[0] / weight[0], success[1] / weight[1]))
}

/// Monotone readout: isotonic map from pi_t(H) to the empirical success rate
/// on calibration prefixes.
pub fn fit_monotone_readout(points: &[(f64, u8)]) -> Result<IsotonicMap, CalibrationError> {
    if points.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let pos = points.iter().filter(|(_, y)| *y == 1).count();
    if pos == 0 || pos == points.len() {
        return Err(CalibrationError::SingleClass);
    }
    let pairs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x, y as f64)).collect();
    Ok(IsotonicMap::fit(&pairs)?)
}

/// Group per-prefix (belief, label) pairs into a readout fit from filtered
/// calibration trajectories.
pub fn fit_outcome_readout(
    points: &[([f64; 2], u8)],
    monotone: bool,
) -> Result<Readout, CalibrationError> {
    if monotone {
        let pairs: Vec<(f64, u8)> = points.iter().map(|&(b, y)| (b[1], y)).collect();
        Ok(Readout::Monotone {
            map: fit_monotone_readout(&pairs)?,
        })
    } else {
        let (rho_low, rho_high) = fit_outcome_weights(points)?;
        Ok(Readout::Outcome { rho_low, rho_high })
    }
}

/// Helper for building corpora in tests and synthetic generators.
pub fn owned_refs(traces: &[TraceRecord]) -> Vec<&TraceRecord> {
    traces.iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ObservationEvent;

    fn trace(id: &str, label: u8, scores: &[f64]) -> TraceRecord {
        TraceRecord {
            question_id: format!("q-{id}"),
            trace_id: id.to_string(),
            final_label: label,
            events: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| ObservationEvent::score_at(i + 1, s))
                .collect(),
            meta: Default::default(),
        }
    }

    fn concept_trace(id: &str, label: u8, codes: &[&str]) -> TraceRecord {
        TraceRecord {
            question_id: format!("q-{id}"),
            trace_id: id.to_string(),
            final_label: label,
            events: codes
                .iter()
                .enumerate()
                .map(|(i, c)| ObservationEvent::concept_at(i + 1, *c))
                .collect(),
            meta: Default::default(),
        }
    }

    fn score_spec(k_bins: usize) -> CalibrationSpec {
        CalibrationSpec {
            k_bins,
            ..CalibrationSpec::default()
        }
    }

    #[test]
    fn binning_histogram_and_clamping() {
        let spec = BinningSpec::fit(BinningKind::Histogram, 4, &[0.0, 1.0]).unwrap();
        assert_eq!(spec.bins(), 4);
        assert_eq!(spec.bin_of(0.0), 0);
        assert_eq!(spec.bin_of(0.3), 1);
        assert_eq!(spec.bin_of(1.0), 3);
        // Out-of-range clamps to the edge bins.
        assert_eq!(spec.bin_of(-5.0), 0);
        assert_eq!(spec.bin_of(5.0), 3);
    }

    #[test]
    fn binning_quantile_collapses_duplicates() {
        // Saturated scores: half the mass at 1.0.
        let scores = [1.0, 1.0, 1.0, 1.0, 0.2, 0.4, 0.6, 0.8];
        let spec = BinningSpec::fit(BinningKind::Quantile, 4, &scores).unwrap();
        assert!(spec.bins() < 4, "expected collapsed bins, got {}", spec.bins());
        // Constant scores degrade to a single bin.
        let constant = BinningSpec::fit(BinningKind::Quantile, 4, &[0.7; 10]).unwrap();
        assert_eq!(constant.bins(), 1);
        assert_eq!(constant.bin_of(0.7), 0);
    }

    #[test]
    fn allprefix_hand_count() {
        // y=1 scores all in bin 0, y=0 all in bin 1, three prefixes each,
        // two bins, lambda 1: smoothed tables are (4/5, 1/5) and (1/5, 4/5).
        let traces = vec![
            trace("pos", 1, &[0.1, 0.1, 0.1]),
            trace("neg", 0, &[0.9, 0.9, 0.9]),
        ];
        let refs = owned_refs(&traces);
        let model = fit_allprefix(&refs, &score_spec(2)).unwrap();
        let s = model.score.as_ref().unwrap();
        assert!((s.table.high[0] - 0.8).abs() < 1e-12);
        assert!((s.table.high[1] - 0.2).abs() < 1e-12);
        assert!((s.table.low[0] - 0.2).abs() < 1e-12);
        assert!((s.table.low[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn huge_lambda_flattens_tables() {
        let traces = vec![
            trace("pos", 1, &[0.1, 0.1, 0.1]),
            trace("neg", 0, &[0.9, 0.9, 0.9]),
        ];
        let refs = owned_refs(&traces);
        let spec = CalibrationSpec {
            lambda: 1e9,
            k_bins: 2,
            ..CalibrationSpec::default()
        };
        let model = fit_allprefix(&refs, &spec).unwrap();
        let s = model.score.as_ref().unwrap();
        for table in [&s.table.low, &s.table.high] {
            for p in table {
                assert!((p - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_distributions_give_near_equal_tables() {
        let traces = vec![
            trace("a", 1, &[0.2, 0.8, 0.2, 0.8]),
            trace("b", 0, &[0.2, 0.8, 0.2, 0.8]),
        ];
        let refs = owned_refs(&traces);
        let model = fit_allprefix(&refs, &score_spec(2)).unwrap();
        let s = model.score.as_ref().unwrap();
        for k in 0..2 {
            assert!((s.table.low[k] - s.table.high[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn counts_invariant_to_trace_order() {
        let a = trace("a", 1, &[0.1, 0.5, 0.9]);
        let b = trace("b", 0, &[0.3, 0.7]);
        let c = trace("c", 1, &[0.2]);
        let m1 = fit_allprefix(&[&a, &b, &c], &score_spec(3)).unwrap();
        let m2 = fit_allprefix(&[&c, &a, &b], &score_spec(3)).unwrap();
        assert_eq!(m1.score, m2.score);
    }

    #[test]
    fn finalstep_counts_only_last_event() {
        let traces = vec![
            trace("pos", 1, &[0.9, 0.9, 0.1]),
            trace("neg", 0, &[0.1, 0.1, 0.9]),
        ];
        let refs = owned_refs(&traces);
        let model = fit_finalstep(&refs, &score_spec(2)).unwrap();
        let s = model.score.as_ref().unwrap();
        // Final events: pos at 0.1 (bin 0), neg at 0.9 (bin 1).
        assert!((s.table.high[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.table.low[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn finalstep_equals_allprefix_for_single_event_traces() {
        let traces = vec![trace("pos", 1, &[0.2]), trace("neg", 0, &[0.8])];
        let refs = owned_refs(&traces);
        let a = fit_allprefix(&refs, &score_spec(2)).unwrap();
        let b = fit_finalstep(&refs, &score_spec(2)).unwrap();
        assert_eq!(a.score, b.score);
    }

    #[test]
    fn missing_score_errors_name_the_trace() {
        let mut bad = concept_trace("c", 1, &["x"]);
        bad.events[0].concept = Some("x".into());
        let good = trace("g", 0, &[0.5]);
        let spec = score_spec(2);
        let err = fit_allprefix(&[&bad, &good], &spec).unwrap_err();
        match err {
            CalibrationError::MissingChannel { trace_id, channel, .. } => {
                assert_eq!(trace_id, "c");
                assert_eq!(channel, "score");
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn single_class_calibration_rejected() {
        let traces = vec![trace("a", 1, &[0.1]), trace("b", 1, &[0.9])];
        let refs = owned_refs(&traces);
        assert!(matches!(
            fit_allprefix(&refs, &score_spec(2)),
            Err(CalibrationError::SingleClass)
        ));
    }

    #[test]
    fn concept_mode_requires_alphabet() {
        let traces = vec![
            concept_trace("a", 1, &["x"]),
            concept_trace("b", 0, &["y"]),
        ];
        let refs = owned_refs(&traces);
        let spec = CalibrationSpec {
            mode: EmissionMode::ConceptOnly,
            ..CalibrationSpec::default()
        };
        assert!(matches!(
            fit_allprefix(&refs, &spec),
            Err(CalibrationError::EmptyAlphabet(_))
        ));
    }

    fn hybrid_model() -> EmissionModel {
        EmissionModel {
            mode: EmissionMode::Hybrid,
            score: Some(ScoreLikelihood {
                binning: BinningSpec {
                    kind: BinningKind::Histogram,
                    requested_bins: 2,
                    edges: vec![0.0, 0.5, 1.0],
                },
                table: StateTable {
                    low: vec![0.2, 0.8],
                    high: vec![0.8, 0.2],
                },
            }),
            concept: Some(ConceptLikelihood {
                alphabet: vec!["a".into(), "b".into()],
                table: StateTable {
                    low: vec![0.5, 0.5],
                    high: vec![0.5, 0.5],
                },
            }),
            joint: None,
            transitions: Transitions::Stationary {
                p_error: 0.0,
                p_recover: 0.0,
            },
            initial_belief: [0.5, 0.5],
            smoothing: 1.0,
            orientation: Orientation::Identity,
            readout: Readout::Identity,
            fit_mode: FitMode::Constructed,
            provenance: Provenance::calibration(),
        }
    }

    #[test]
    fn hybrid_product_by_hand() {
        let model = hybrid_model();
        let mut event = ObservationEvent::score_at(1, 0.2);
        event.concept = Some("a".into());
        let (h, l) = hybrid_likelihood(&model, &event).unwrap();
        assert!((h - 0.4).abs() < 1e-12);
        assert!((l - 0.1).abs() < 1e-12);
    }

    #[test]
    fn uniform_concept_factor_cancels_in_posterior() {
        let model = hybrid_model();
        let mut event = ObservationEvent::score_at(1, 0.2);
        event.concept = Some("b".into());
        let (h, l) = hybrid_likelihood(&model, &event).unwrap();
        // Score-only ratio is 0.8/0.2; the uniform concept factor scales
        // both sides equally, so the posterior is unchanged.
        assert!((h / l - 4.0).abs() < 1e-12);
    }

    #[test]
    fn hybrid_missing_channel() {
        let model = hybrid_model();
        let event = ObservationEvent::score_at(1, 0.2);
        assert!(matches!(
            hybrid_likelihood(&model, &event),
            Err(CalibrationError::MissingChannel { .. })
        ));
    }

    fn joint_traces(n_per_cell: usize) -> Vec<TraceRecord> {
        // Independent channels by construction: every (bin, code) pair gets
        // the same count per class.
        let mut traces = Vec::new();
        let mut idx = 0;
        for label in [0u8, 1u8] {
            for (score, code) in [(0.1, "a"), (0.1, "b"), (0.9, "a"), (0.9, "b")] {
                for _ in 0..n_per_cell {
                    let mut event = ObservationEvent::score_at(1, score);
                    event.concept = Some(code.to_string());
                    traces.push(TraceRecord {
                        question_id: format!("q{idx}"),
                        trace_id: format!("t{idx}"),
                        final_label: label,
                        events: vec![event],
                        meta: Default::default(),
                    });
                    idx += 1;
                }
            }
        }
        traces
    }

    #[test]
    fn joint_matches_product_on_factorized_counts() {
        let traces = joint_traces(8);
        let refs = owned_refs(&traces);
        let spec = CalibrationSpec {
            mode: EmissionMode::Joint,
            k_bins: 2,
            alphabet: vec!["a".into(), "b".into()],
            lambda: 1e-9,
            ..CalibrationSpec::default()
        };
        let joint = fit_allprefix(&refs, &spec).unwrap();
        let hybrid_spec = CalibrationSpec {
            mode: EmissionMode::Hybrid,
            ..spec
        };
        let hybrid = fit_allprefix(&refs, &hybrid_spec).unwrap();
        for score in [0.1, 0.9] {
            for code in ["a", "b"] {
                let mut event = ObservationEvent::score_at(1, score);
                event.concept = Some(code.to_string());
                let (jh, jl) = joint_likelihood(&joint, &event).unwrap();
                let (hh, hl) = hybrid_likelihood(&hybrid, &event).unwrap();
                assert!((jh - hh).abs() < 1e-6, "{jh} vs {hh}");
                assert!((jl - hl).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn joint_unseen_cell_keeps_lambda_floor() {
        let traces = vec![
            {
                let mut e = ObservationEvent::score_at(1, 0.1);
                e.concept = Some("a".into());
                TraceRecord {
                    question_id: "q0".into(),
                    trace_id: "t0".into(),
                    final_label: 1,
                    events: vec![e],
                    meta: Default::default(),
                }
            },
            {
                let mut e = ObservationEvent::score_at(1, 0.9);
                e.concept = Some("b".into());
                TraceRecord {
                    question_id: "q1".into(),
                    trace_id: "t1".into(),
                    final_label: 0,
                    events: vec![e],
                    meta: Default::default(),
                }
            },
        ];
        let refs = owned_refs(&traces);
        let spec = CalibrationSpec {
            mode: EmissionMode::Joint,
            k_bins: 2,
            alphabet: vec!["a".into(), "b".into()],
            ..CalibrationSpec::default()
        };
        let model = fit_allprefix(&refs, &spec).unwrap();
        let j = model.joint.as_ref().unwrap();
        for p in j.table.low.iter().chain(j.table.high.iter()) {
            assert!(*p > 0.0);
        }
    }

    #[test]
    fn outcome_weights_special_cases() {
        // rho_H = 1, rho_L = 0 reduces the readout to the identity readout.
        let readout = Readout::Outcome {
            rho_low: 0.0,
            rho_high: 1.0,
        };
        for pi_h in [0.0, 0.3, 0.9] {
            assert_eq!(readout.apply([1.0 - pi_h, pi_h]), pi_h);
        }
        // Equal weights give a constant readout.
        let constant = Readout::Outcome {
            rho_low: 0.4,
            rho_high: 0.4,
        };
        for pi_h in [0.0, 0.5, 1.0] {
            assert!((constant.apply([1.0 - pi_h, pi_h]) - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn outcome_weights_from_responsibilities() {
        // Perfectly separated beliefs recover rho_H = 1, rho_L = 0.
        let beliefs = vec![
            ([0.0, 1.0], 1u8),
            ([0.0, 1.0], 1u8),
            ([1.0, 0.0], 0u8),
            ([1.0, 0.0], 0u8),
        ];
        let (rho_low, rho_high) = fit_outcome_weights(&beliefs).unwrap();
        assert_eq!(rho_low, 0.0);
        assert_eq!(rho_high, 1.0);
        assert!(matches!(
            fit_outcome_weights(&[([0.5, 0.5], 1)]),
            Err(CalibrationError::SingleClass)
        ));
    }

    #[test]
    fn monotone_readout_interpolates_monotone_rates() {
        // Five belief levels with monotone success rates: the isotonic fit
        // must reproduce the empirical rates exactly at the knots.
        let mut points = Vec::new();
        let levels = [(0.1, 0.0), (0.3, 0.25), (0.5, 0.5), (0.7, 0.75), (0.9, 1.0)];
        for &(x, rate) in &levels {
            let n = 4;
            let pos = (rate * n as f64).round() as usize;
            for i in 0..n {
                points.push((x, u8::from(i < pos)));
            }
        }
        let map = fit_monotone_readout(&points).unwrap();
        for &(x, rate) in &levels {
            assert!((map.eval(x) - rate).abs() < 1e-12);
        }
    }

    #[test]
    fn model_artifact_roundtrip() {
        let traces = vec![
            trace("pos", 1, &[0.1, 0.3, 0.2]),
            trace("neg", 0, &[0.9, 0.7, 0.8]),
        ];
        let refs = owned_refs(&traces);
        let model = fit_allprefix(&refs, &score_spec(3)).unwrap();
        let path = std::env::temp_dir().join(format!("sbbt-model-{}.json", std::process::id()));
        model.write_json(&path).unwrap();
        let loaded = EmissionModel::read_json(&path).unwrap();
        assert_eq!(model, loaded);
        std::fs::remove_file(path).ok();
    }
}
