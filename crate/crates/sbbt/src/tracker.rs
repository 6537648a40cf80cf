//! The online two-state Bayesian filter, its log-odds evidence accounting,
//! and the offline smoothing and Viterbi diagnostics.
//!
//! The filter consumes events strictly through prefix views, so the online
//! belief at prefix t is a function of pre-fit parameters and observations
//! through t only. Smoothing and Viterbi use the whole trace; their outputs
//! are separate types so they cannot slip into an online metric path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationError, EmissionModel};
use crate::corpus::{PrefixView, TraceRecord};

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error(transparent)]
    Likelihood(#[from] CalibrationError),
    #[error("non-finite likelihood lookup at step {t}")]
    NonFiniteLikelihood { t: usize },
    #[error("positivity violated at step {t}: a state has zero mass")]
    PositivityViolation { t: usize },
    #[error("empty trajectory")]
    EmptyTrajectory,
}

/// Normalizers at or below this threshold trigger the predictive-belief
/// fallback.
pub const NORMALIZER_FLOOR: f64 = 1e-300;

/// One filtering step. Beliefs are `[L, H]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefStep {
    pub t: usize,
    /// Predictive belief before the observation.
    pub predictive: [f64; 2],
    /// Posterior belief after the observation.
    pub posterior: [f64; 2],
    /// Log-likelihood-ratio evidence log(l_H / l_L); zero on fallback steps.
    pub evidence: f64,
    /// Initial log-odds plus the running evidence sum. Equals the posterior
    /// log-odds under identity transitions.
    pub cumulative_log_odds: f64,
    /// Readout value (identity readout unless the model carries one).
    pub readout: f64,
    /// Set when the normalizer vanished and the predictive belief was
    /// carried forward without new evidence.
    pub fallback: bool,
}

/// Online belief trajectory for one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefTrajectory {
    pub question_id: String,
    pub trace_id: String,
    pub steps: Vec<BeliefStep>,
}

impl BeliefTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Final posterior over (L, H).
    pub fn final_posterior(&self) -> [f64; 2] {
        self.steps.last().expect("non-empty trajectory").posterior
    }

    /// The trace-level online score: the readout at the final prefix.
    pub fn final_readout(&self) -> f64 {
        self.steps.last().expect("non-empty trajectory").readout
    }

    /// Readout at prefix `t` (1-based).
    pub fn readout_at(&self, t: usize) -> f64 {
        self.steps[t - 1].readout
    }

    /// Readout series over all prefixes.
    pub fn readout_series(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.readout).collect()
    }
}

fn log_odds(belief: [f64; 2]) -> f64 {
    (belief[1] / belief[0]).ln()
}

/// Run the two-state filter over a prefix view.
///
/// Per step: predictive belief from the transition row, unnormalized
/// posterior as likelihood times predictive mass (computed in log space with
/// a max shift), normalization, and the model's readout. A vanished
/// normalizer falls back to the predictive belief and flags the step.
pub fn filter_trace(
    view: &PrefixView<'_>,
    model: &EmissionModel,
) -> Result<BeliefTrajectory, TrackerError> {
    let mut steps = Vec::with_capacity(view.len());
    let mut previous = model.initial_belief;
    let mut cumulative = log_odds(model.initial_belief);

    for (idx, event) in view.events().iter().enumerate() {
        let t = idx + 1;
        let predictive = if t == 1 {
            model.initial_belief
        } else {
            let a = model.transitions.matrix_at(t);
            [
                a[0][0] * previous[0] + a[1][0] * previous[1],
                a[0][1] * previous[0] + a[1][1] * previous[1],
            ]
        };

        let pair = model.likelihoods(event, view.trace_id())?;
        if !pair.low.is_finite() || !pair.high.is_finite() {
            return Err(TrackerError::NonFiniteLikelihood { t });
        }

        let log_u = [
            pair.low.ln() + predictive[0].ln(),
            pair.high.ln() + predictive[1].ln(),
        ];
        let shift = log_u[0].max(log_u[1]);
        let mut fallback = shift == f64::NEG_INFINITY;
        let mut posterior = predictive;
        if !fallback {
            let u = [(log_u[0] - shift).exp(), (log_u[1] - shift).exp()];
            let z = u[0] + u[1];
            if shift + z.ln() <= NORMALIZER_FLOOR.ln() {
                fallback = true;
            } else {
                posterior = [u[0] / z, u[1] / z];
            }
        }

        let evidence = if fallback {
            0.0
        } else {
            pair.high.ln() - pair.low.ln()
        };
        if !fallback {
            cumulative += evidence;
        }

        steps.push(BeliefStep {
            t,
            predictive,
            posterior,
            evidence,
            cumulative_log_odds: cumulative,
            readout: model.readout.apply(posterior),
            fallback,
        });
        previous = posterior;
    }

    if steps.is_empty() {
        return Err(TrackerError::EmptyTrajectory);
    }
    Ok(BeliefTrajectory {
        question_id: view.question_id().to_string(),
        trace_id: view.trace_id().to_string(),
        steps,
    })
}

/// Filter a whole record (view at `t = T`).
pub fn filter_record(
    record: &TraceRecord,
    model: &EmissionModel,
) -> Result<BeliefTrajectory, TrackerError> {
    filter_trace(&record.full_view(), model)
}

/// One row of the additive evidence decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceStep {
    pub t: usize,
    pub prior_log_odds: f64,
    pub evidence: f64,
    pub posterior_log_odds: f64,
    /// Fallback steps contribute no evidence; the gap is flagged.
    pub fallback: bool,
}

/// Per-step additive decomposition: posterior log-odds equal predictive
/// log-odds plus the evidence term on every non-fallback step. Requires
/// positive mass in both states wherever a log-odds is taken.
pub fn evidence_decomposition(
    trajectory: &BeliefTrajectory,
) -> Result<Vec<EvidenceStep>, TrackerError> {
    let mut rows = Vec::with_capacity(trajectory.steps.len());
    for step in &trajectory.steps {
        if step.fallback {
            rows.push(EvidenceStep {
                t: step.t,
                prior_log_odds: log_odds(step.predictive),
                evidence: 0.0,
                posterior_log_odds: log_odds(step.posterior),
                fallback: true,
            });
            continue;
        }
        if step.predictive.iter().any(|&p| p <= 0.0) || step.posterior.iter().any(|&p| p <= 0.0) {
            return Err(TrackerError::PositivityViolation { t: step.t });
        }
        rows.push(EvidenceStep {
            t: step.t,
            prior_log_odds: log_odds(step.predictive),
            evidence: step.evidence,
            posterior_log_odds: log_odds(step.posterior),
            fallback: false,
        });
    }
    Ok(rows)
}

/// Offline smoothed responsibilities. A deliberate separate type: smoothing
/// uses future observations, so nothing here converts into an online score
/// series.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTrajectory {
    pub trace_id: String,
    /// Per-step smoothed posterior over (L, H).
    pub gammas: Vec<[f64; 2]>,
    /// Total log-likelihood of the observation sequence under the model.
    pub log_likelihood: f64,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) struct ForwardBackward {
    pub gammas: Vec<[f64; 2]>,
    pub log_likelihood: f64,
}

/// Log-space forward-backward over a full record.
pub(crate) fn forward_backward(
    record: &TraceRecord,
    model: &EmissionModel,
) -> Result<ForwardBackward, TrackerError> {
    let t_len = record.events.len();
    if t_len == 0 {
        return Err(TrackerError::EmptyTrajectory);
    }
    let mut log_lik = Vec::with_capacity(t_len);
    for event in &record.events {
        let pair = model.likelihoods(event, &record.trace_id)?;
        if !pair.low.is_finite() || !pair.high.is_finite() {
            return Err(TrackerError::NonFiniteLikelihood { t: event.t });
        }
        log_lik.push([pair.low.ln(), pair.high.ln()]);
    }

    let mut log_alpha = vec![[f64::NEG_INFINITY; 2]; t_len];
    for s in 0..2 {
        log_alpha[0][s] = model.initial_belief[s].ln() + log_lik[0][s];
    }
    for t in 1..t_len {
        let a = model.transitions.matrix_at(t + 1);
        for s in 0..2 {
            let from = log_sum_exp(
                log_alpha[t - 1][0] + a[0][s].ln(),
                log_alpha[t - 1][1] + a[1][s].ln(),
            );
            log_alpha[t][s] = log_lik[t][s] + from;
        }
    }

    let mut log_beta = vec![[0.0f64; 2]; t_len];
    for t in (0..t_len - 1).rev() {
        let a = model.transitions.matrix_at(t + 2);
        for s in 0..2 {
            log_beta[t][s] = log_sum_exp(
                a[s][0].ln() + log_lik[t + 1][0] + log_beta[t + 1][0],
                a[s][1].ln() + log_lik[t + 1][1] + log_beta[t + 1][1],
            );
        }
    }

    let log_likelihood = log_sum_exp(log_alpha[t_len - 1][0], log_alpha[t_len - 1][1]);
    let mut gammas = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let raw = [
            log_alpha[t][0] + log_beta[t][0],
            log_alpha[t][1] + log_beta[t][1],
        ];
        let z = log_sum_exp(raw[0], raw[1]);
        gammas.push([(raw[0] - z).exp(), (raw[1] - z).exp()]);
    }
    Ok(ForwardBackward {
        gammas,
        log_likelihood,
    })
}

/// Offline smoothing over the full trace. Diagnostic only: the backward pass
/// consumes observations after t.
pub fn smooth_trace(
    record: &TraceRecord,
    model: &EmissionModel,
) -> Result<SmoothedTrajectory, TrackerError> {
    let fb = forward_backward(record, model)?;
    Ok(SmoothedTrajectory {
        trace_id: record.trace_id.clone(),
        gammas: fb.gammas,
        log_likelihood: fb.log_likelihood,
    })
}

/// The two latent reliability states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityState {
    Low,
    High,
}

/// Offline most-likely full state path. Diagnostic only.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub trace_id: String,
    pub states: Vec<ReliabilityState>,
    pub log_probability: f64,
}

/// Max-product decoding in log space; ties break toward H at every argmax.
pub fn viterbi_trace(
    record: &TraceRecord,
    model: &EmissionModel,
) -> Result<StatePath, TrackerError> {
    let t_len = record.events.len();
    if t_len == 0 {
        return Err(TrackerError::EmptyTrajectory);
    }
    let mut log_lik = Vec::with_capacity(t_len);
    for event in &record.events {
        let pair = model.likelihoods(event, &record.trace_id)?;
        log_lik.push([pair.low.ln(), pair.high.ln()]);
    }

    let mut delta = vec![[f64::NEG_INFINITY; 2]; t_len];
    let mut back = vec![[0usize; 2]; t_len];
    for s in 0..2 {
        delta[0][s] = model.initial_belief[s].ln() + log_lik[0][s];
    }
    for t in 1..t_len {
        let a = model.transitions.matrix_at(t + 1);
        for s in 0..2 {
            let from_low = delta[t - 1][0] + a[0][s].ln();
            let from_high = delta[t - 1][1] + a[1][s].ln();
            // Tie toward H: prefer the high-state predecessor on equality.
            let (best, arg) = if from_high >= from_low {
                (from_high, 1)
            } else {
                (from_low, 0)
            };
            delta[t][s] = log_lik[t][s] + best;
            back[t][s] = arg;
        }
    }

    let mut states = vec![0usize; t_len];
    let last = t_len - 1;
    states[last] = if delta[last][1] >= delta[last][0] { 1 } else { 0 };
    let log_probability = delta[last][states[last]];
    for t in (0..last).rev() {
        states[t] = back[t + 1][states[t + 1]];
    }

    Ok(StatePath {
        trace_id: record.trace_id.clone(),
        states: states
            .into_iter()
            .map(|s| {
                if s == 1 {
                    ReliabilityState::High
                } else {
                    ReliabilityState::Low
                }
            })
            .collect(),
        log_probability,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{
        BinningKind, BinningSpec, EmissionMode, FitMode, Orientation, Readout, ScoreLikelihood,
        StateTable, Transitions,
    };
    use crate::corpus::ObservationEvent;
    use crate::provenance::Provenance;

    /// Score-table model over unit-interval bins: scores in [0,1), bin i of n
    /// covers [i/n, (i+1)/n).
    fn score_model(low: Vec<f64>, high: Vec<f64>, transitions: Transitions, pi0: [f64; 2]) -> EmissionModel {
        let bins = low.len();
        let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
        EmissionModel {
            mode: EmissionMode::ScoreOnly,
            score: Some(ScoreLikelihood {
                binning: BinningSpec {
                    kind: BinningKind::Histogram,
                    requested_bins: bins,
                    edges,
                },
                table: StateTable { low, high },
            }),
            concept: None,
            joint: None,
            transitions,
            initial_belief: pi0,
            smoothing: 1.0,
            orientation: Orientation::Identity,
            readout: Readout::Identity,
            fit_mode: FitMode::Constructed,
            provenance: Provenance::calibration(),
        }
    }

    fn identity_transitions() -> Transitions {
        Transitions::Stationary {
            p_error: 0.0,
            p_recover: 0.0,
        }
    }

    fn record(scores: &[f64]) -> TraceRecord {
        TraceRecord {
            question_id: "q".into(),
            trace_id: "t".into(),
            final_label: 1,
            events: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| ObservationEvent::score_at(i + 1, s))
                .collect(),
            meta: Default::default(),
        }
    }

    #[test]
    fn single_step_update_by_hand() {
        // pi0 = (0.5, 0.5), identity transitions, likelihoods (H, L) = (0.8, 0.2):
        // posterior H = 0.8.
        let model = score_model(vec![0.2, 0.8], vec![0.8, 0.2], identity_transitions(), [0.5, 0.5]);
        let r = record(&[0.1]);
        let traj = filter_record(&r, &model).unwrap();
        assert!((traj.final_posterior()[1] - 0.8).abs() < 1e-12);
        assert!((traj.final_readout() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn uninformative_evidence_keeps_initial_belief() {
        let model = score_model(vec![0.5, 0.5], vec![0.5, 0.5], identity_transitions(), [0.3, 0.7]);
        let r = record(&[0.1, 0.6, 0.3, 0.9]);
        let traj = filter_record(&r, &model).unwrap();
        for step in &traj.steps {
            assert!((step.posterior[0] - 0.3).abs() < 1e-12);
            assert!((step.posterior[1] - 0.7).abs() < 1e-12);
            for s in 0..2 {
                assert!((step.posterior[s] - step.predictive[s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evidence_telescopes_under_identity_transitions() {
        // Evidence terms +a, +a, -a: final log-odds is initial plus a.
        let model = score_model(vec![0.2, 0.8], vec![0.8, 0.2], identity_transitions(), [0.5, 0.5]);
        let r = record(&[0.1, 0.1, 0.9]);
        let traj = filter_record(&r, &model).unwrap();
        let a = (0.8f64 / 0.2).ln();
        let last = traj.steps.last().unwrap();
        assert!((last.cumulative_log_odds - a).abs() < 1e-12);
        let post = last.posterior;
        assert!(((post[1] / post[0]).ln() - a).abs() < 1e-9);
    }

    #[test]
    fn log_odds_identity_per_step() {
        let model = score_model(
            vec![0.1, 0.3, 0.6],
            vec![0.5, 0.3, 0.2],
            Transitions::Stationary {
                p_error: 0.1,
                p_recover: 0.2,
            },
            [0.4, 0.6],
        );
        let r = record(&[0.15, 0.5, 0.85, 0.2, 0.7]);
        let traj = filter_record(&r, &model).unwrap();
        let rows = evidence_decomposition(&traj).unwrap();
        for row in rows {
            assert!(!row.fallback);
            let residual = row.posterior_log_odds - row.prior_log_odds - row.evidence;
            assert!(residual.abs() < 1e-9, "step {} residual {residual}", row.t);
        }
    }

    #[test]
    fn filter_matches_prefix_views_exactly() {
        let model = score_model(
            vec![0.3, 0.7],
            vec![0.6, 0.4],
            Transitions::Stationary {
                p_error: 0.05,
                p_recover: 0.1,
            },
            [0.5, 0.5],
        );
        let r = record(&[0.1, 0.9, 0.4, 0.6, 0.2]);
        let full = filter_record(&r, &model).unwrap();
        for t in 1..=r.len() {
            let view = r.prefix_view(t).unwrap();
            let partial = filter_trace(&view, &model).unwrap();
            assert_eq!(partial.steps.len(), t);
            for (a, b) in partial.steps.iter().zip(full.steps.iter()) {
                assert_eq!(a, b, "prefix {t} diverged");
            }
        }
    }

    /// Exhaustive path enumeration oracle for the final posterior.
    fn enumerate_posterior(record: &TraceRecord, model: &EmissionModel) -> [f64; 2] {
        let t_len = record.len();
        let mut mass = [0.0f64; 2];
        for assignment in 0..(1usize << t_len) {
            let mut p = 1.0;
            let mut prev = usize::MAX;
            for (t, event) in record.events.iter().enumerate() {
                let state = (assignment >> t) & 1;
                p *= if t == 0 {
                    model.initial_belief[state]
                } else {
                    model.transitions.matrix_at(t + 1)[prev][state]
                };
                let pair = model.likelihoods(event, "oracle").unwrap();
                p *= if state == 1 { pair.high } else { pair.low };
                prev = state;
            }
            mass[(assignment >> (t_len - 1)) & 1] += p;
        }
        let z = mass[0] + mass[1];
        [mass[0] / z, mass[1] / z]
    }

    #[test]
    fn filter_matches_enumeration() {
        let model = score_model(
            vec![0.15, 0.25, 0.6],
            vec![0.5, 0.3, 0.2],
            Transitions::Stationary {
                p_error: 0.08,
                p_recover: 0.15,
            },
            [0.35, 0.65],
        );
        let r = record(&[0.1, 0.55, 0.9, 0.4, 0.25, 0.7, 0.05]);
        let traj = filter_record(&r, &model).unwrap();
        let oracle = enumerate_posterior(&r, &model);
        for s in 0..2 {
            assert!((traj.final_posterior()[s] - oracle[s]).abs() < 1e-9);
        }
    }

    #[test]
    fn smoothing_reduces_to_filter_at_final_step() {
        let model = score_model(
            vec![0.3, 0.7],
            vec![0.55, 0.45],
            Transitions::Stationary {
                p_error: 0.1,
                p_recover: 0.05,
            },
            [0.5, 0.5],
        );
        let r = record(&[0.2, 0.8, 0.3, 0.6]);
        let traj = filter_record(&r, &model).unwrap();
        let smooth = smooth_trace(&r, &model).unwrap();
        let last = smooth.gammas.last().unwrap();
        for s in 0..2 {
            assert!((last[s] - traj.final_posterior()[s]).abs() < 1e-12);
        }
        // T = 1: gamma_1 equals pi_1.
        let single = record(&[0.2]);
        let t1 = filter_record(&single, &model).unwrap();
        let s1 = smooth_trace(&single, &model).unwrap();
        for s in 0..2 {
            assert!((s1.gammas[0][s] - t1.final_posterior()[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn uninformative_smoothing_equals_chain_marginals() {
        // Flat emissions: gamma_t is the transition-chain marginal from pi0.
        let model = score_model(
            vec![0.5, 0.5],
            vec![0.5, 0.5],
            Transitions::Stationary {
                p_error: 0.2,
                p_recover: 0.1,
            },
            [0.9, 0.1],
        );
        let r = record(&[0.2, 0.8, 0.4, 0.6, 0.1]);
        let smooth = smooth_trace(&r, &model).unwrap();
        // Matrix-power oracle.
        let mut marginal = model.initial_belief;
        for (t, gamma) in smooth.gammas.iter().enumerate() {
            if t > 0 {
                let a = model.transitions.matrix_at(t + 1);
                marginal = [
                    a[0][0] * marginal[0] + a[1][0] * marginal[1],
                    a[0][1] * marginal[0] + a[1][1] * marginal[1],
                ];
            }
            for s in 0..2 {
                assert!((gamma[s] - marginal[s]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn viterbi_dominant_evidence_and_ties() {
        let model = score_model(
            vec![0.1, 0.9],
            vec![0.9, 0.1],
            Transitions::Stationary {
                p_error: 0.1,
                p_recover: 0.1,
            },
            [0.5, 0.5],
        );
        // Strongly H-favoring evidence at every step.
        let r = record(&[0.1, 0.2, 0.3, 0.1]);
        let path = viterbi_trace(&r, &model).unwrap();
        assert!(path.states.iter().all(|s| *s == ReliabilityState::High));

        // Fully symmetric model and evidence: the tie rule picks all-H.
        let tie_model = score_model(vec![0.5, 0.5], vec![0.5, 0.5], Transitions::Stationary {
            p_error: 0.25,
            p_recover: 0.25,
        }, [0.5, 0.5]);
        let tie = viterbi_trace(&record(&[0.2, 0.8, 0.5]), &tie_model).unwrap();
        assert!(tie.states.iter().all(|s| *s == ReliabilityState::High));
    }

    #[test]
    fn viterbi_matches_enumerated_maximum() {
        let model = score_model(
            vec![0.2, 0.35, 0.45],
            vec![0.5, 0.3, 0.2],
            Transitions::Stationary {
                p_error: 0.12,
                p_recover: 0.07,
            },
            [0.45, 0.55],
        );
        let r = record(&[0.1, 0.45, 0.8, 0.3, 0.65, 0.15]);
        let path = viterbi_trace(&r, &model).unwrap();
        // Enumerate all path log-probabilities.
        let t_len = r.len();
        let mut best = f64::NEG_INFINITY;
        for assignment in 0..(1usize << t_len) {
            let mut lp = 0.0;
            let mut prev = usize::MAX;
            for (t, event) in r.events.iter().enumerate() {
                let state = (assignment >> t) & 1;
                lp += if t == 0 {
                    model.initial_belief[state].ln()
                } else {
                    model.transitions.matrix_at(t + 1)[prev][state].ln()
                };
                let pair = model.likelihoods(event, "oracle").unwrap();
                lp += if state == 1 { pair.high.ln() } else { pair.low.ln() };
                prev = state;
            }
            best = best.max(lp);
        }
        assert!((path.log_probability - best).abs() < 1e-9);
    }

    #[test]
    fn transition_schedule_matches_stationary_and_clamps() {
        let stationary = Transitions::Stationary {
            p_error: 0.1,
            p_recover: 0.2,
        };
        // A one-entry schedule equal to the stationary matrix: identical
        // trajectories, with steps beyond the list reusing the last entry.
        let schedule = Transitions::Schedule {
            matrices: vec![stationary.matrix_at(2)],
        };
        let base = score_model(vec![0.3, 0.7], vec![0.6, 0.4], stationary, [0.5, 0.5]);
        let mut scheduled = base.clone();
        scheduled.transitions = schedule;
        let r = record(&[0.1, 0.9, 0.4, 0.6, 0.2]);
        let a = filter_record(&r, &base).unwrap();
        let b = filter_record(&r, &scheduled).unwrap();
        assert_eq!(a.steps, b.steps);

        // A genuinely time-varying schedule changes the trajectory.
        let varying = Transitions::Schedule {
            matrices: vec![
                [[0.9, 0.1], [0.1, 0.9]],
                [[0.5, 0.5], [0.5, 0.5]],
            ],
        };
        let mut varied = base.clone();
        varied.transitions = varying;
        let c = filter_record(&r, &varied).unwrap();
        assert_ne!(a.steps, c.steps);
        // Step 4 and later reuse the final matrix.
        assert_eq!(varied.transitions.matrix_at(4), varied.transitions.matrix_at(9));
    }

    #[test]
    fn fallback_on_zero_normalizer() {
        // Zero initial mass on H with zero L-likelihood forces Z = 0.
        let model = score_model(vec![0.0, 1.0], vec![1.0, 0.0], identity_transitions(), [1.0, 0.0]);
        let r = record(&[0.1]); // bin 0: l_L = 0, l_H = 1, but predictive H mass is 0
        let traj = filter_record(&r, &model).unwrap();
        assert!(traj.steps[0].fallback);
        assert_eq!(traj.steps[0].posterior, [1.0, 0.0]);
        assert_eq!(traj.steps[0].evidence, 0.0);
    }

    #[test]
    fn decomposition_flags_fallback_gap() {
        let model = score_model(vec![0.0, 1.0], vec![1.0, 0.0], identity_transitions(), [1.0, 0.0]);
        let r = record(&[0.1]);
        let traj = filter_record(&r, &model).unwrap();
        let rows = evidence_decomposition(&traj).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].fallback);
        assert_eq!(rows[0].evidence, 0.0);
    }
}
