//! Decision-facing utilities: early bad-trace detection operating points and
//! rollout-join prefix-value validation.
//!
//! Operating points quantify triage tradeoffs, not risk-control guarantees:
//! a threshold is chosen on calibration traces, a trace is flagged at its
//! first risky prefix, and the report carries recall of eventually-incorrect
//! traces, the false-positive rate on eventually-correct ones, and the
//! compute saved by truncating flagged incorrect traces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{pearson, spearman, MetricError};
use crate::provenance::FitPartition;

#[derive(Debug, Error)]
pub enum DecisionError {
    #[error("calibration trajectories contain a single class")]
    SingleClass,
    #[error("empty trajectory set")]
    Empty,
    #[error("target {0} is unreachable on the calibration trajectories")]
    UnreachableTarget(String),
    #[error("rollout group ({trace_id}, t={t}) has no evaluated prefix to join")]
    UnmatchedKey { trace_id: String, t: usize },
    #[error("rollout group ({trace_id}, t={t}) has K = 0 continuations")]
    EmptyGroup { trace_id: String, t: usize },
    #[error("rollout group ({trace_id}, t={t}) reports {successes} successes out of K = {k}")]
    BadSuccessCount {
        trace_id: String,
        t: usize,
        successes: u32,
        k: u32,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Online readout series with its final label, the operating-point input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeries {
    pub trace_id: String,
    pub label: u8,
    /// Readout at every prefix, in order.
    pub readouts: Vec<f64>,
}

/// A detection target for threshold selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum UtilityTarget {
    /// Flag at least this fraction of eventually-incorrect traces.
    RecallAtLeast(f64),
    /// Keep the false-positive rate on eventually-correct traces at or
    /// below this fraction.
    FprAtMost(f64),
}

impl std::fmt::Display for UtilityTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UtilityTarget::RecallAtLeast(r) => write!(f, "recall >= {r}"),
            UtilityTarget::FprAtMost(v) => write!(f, "fpr <= {v}"),
        }
    }
}

/// A chosen threshold with its realized calibration-set tradeoffs.
///
/// The threshold applies to the oriented risk `1 - readout`, so low beliefs
/// are risky; a trace is flagged at the first prefix whose risk reaches the
/// threshold. Raising the threshold never increases recall or FPR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub recall_incorrect: f64,
    pub fpr: f64,
    /// Mean fraction of prefixes truncated over flagged incorrect traces.
    pub saved_compute: f64,
    pub chosen_on: FitPartition,
}

/// First prefix (1-based) whose risk reaches the threshold.
fn flag_index(readouts: &[f64], threshold: f64) -> Option<usize> {
    readouts
        .iter()
        .position(|&b| 1.0 - b >= threshold)
        .map(|i| i + 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SweepPoint {
    threshold: f64,
    recall: f64,
    fpr: f64,
    saved: f64,
}

fn evaluate_threshold(series: &[LabeledSeries], threshold: f64) -> SweepPoint {
    let mut incorrect = 0usize;
    let mut correct = 0usize;
    let mut flagged_incorrect = 0usize;
    let mut flagged_correct = 0usize;
    let mut saved_sum = 0.0;
    for s in series {
        let flag = flag_index(&s.readouts, threshold);
        if s.label == 0 {
            incorrect += 1;
            if let Some(t) = flag {
                flagged_incorrect += 1;
                saved_sum += 1.0 - t as f64 / s.readouts.len() as f64;
            }
        } else {
            correct += 1;
            if flag.is_some() {
                flagged_correct += 1;
            }
        }
    }
    SweepPoint {
        threshold,
        recall: if incorrect > 0 {
            flagged_incorrect as f64 / incorrect as f64
        } else {
            0.0
        },
        fpr: if correct > 0 {
            flagged_correct as f64 / correct as f64
        } else {
            0.0
        },
        saved: if flagged_incorrect > 0 {
            saved_sum / flagged_incorrect as f64
        } else {
            0.0
        },
    }
}

/// Sweep all candidate thresholds (the distinct observed risks) and pick the
/// one meeting the target with the best secondary objective: maximum saved
/// compute for recall targets, maximum recall for FPR targets. Ties go to
/// the more conservative (higher) threshold.
pub fn choose_threshold(
    calibration: &[LabeledSeries],
    target: UtilityTarget,
) -> Result<OperatingPoint, DecisionError> {
    if calibration.is_empty() {
        return Err(DecisionError::Empty);
    }
    let incorrect = calibration.iter().filter(|s| s.label == 0).count();
    if incorrect == 0 || incorrect == calibration.len() {
        return Err(DecisionError::SingleClass);
    }

    let mut candidates: Vec<f64> = calibration
        .iter()
        .flat_map(|s| s.readouts.iter().map(|&b| 1.0 - b))
        .collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let mut best: Option<SweepPoint> = None;
    for &threshold in &candidates {
        let point = evaluate_threshold(calibration, threshold);
        let feasible = match target {
            UtilityTarget::RecallAtLeast(r) => point.recall >= r,
            UtilityTarget::FprAtMost(f) => point.fpr <= f,
        };
        if !feasible {
            continue;
        }
        let better = match (&best, target) {
            (None, _) => true,
            (Some(b), UtilityTarget::RecallAtLeast(_)) => {
                point.saved > b.saved || (point.saved == b.saved && point.threshold > b.threshold)
            }
            (Some(b), UtilityTarget::FprAtMost(_)) => {
                point.recall > b.recall || (point.recall == b.recall && point.threshold > b.threshold)
            }
        };
        if better {
            best = Some(point);
        }
    }

    let point = best.ok_or_else(|| DecisionError::UnreachableTarget(target.to_string()))?;
    Ok(OperatingPoint {
        threshold: point.threshold,
        recall_incorrect: point.recall,
        fpr: point.fpr,
        saved_compute: point.saved,
        chosen_on: FitPartition::Calibration,
    })
}

/// Realized tradeoffs of a fixed operating point on another trace set.
pub fn apply_threshold(series: &[LabeledSeries], point: &OperatingPoint) -> OperatingPoint {
    let sweep = evaluate_threshold(series, point.threshold);
    OperatingPoint {
        threshold: point.threshold,
        recall_incorrect: sweep.recall,
        fpr: sweep.fpr,
        saved_compute: sweep.saved,
        chosen_on: point.chosen_on,
    }
}

/// Rollout outcomes for one evaluated prefix: K sampled continuations and
/// their success count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub trace_id: String,
    pub t: usize,
    pub k: u32,
    pub successes: u32,
}

impl RolloutGroup {
    /// Empirical continuation-success rate.
    pub fn value(&self) -> f64 {
        self.successes as f64 / self.k as f64
    }

    /// Binomial standard error sqrt(v(1-v)/K).
    pub fn std_error(&self) -> f64 {
        let v = self.value();
        (v * (1.0 - v) / self.k as f64).sqrt()
    }
}

/// One joined row: the prefix's source score and belief readout against the
/// rollout estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinedRow {
    pub trace_id: String,
    pub t: usize,
    pub source_score: f64,
    pub belief: f64,
    pub value: f64,
    pub std_error: f64,
    pub k: u32,
}

/// Join summary: probability quality of source scores and beliefs against
/// empirical continuation success, plus rank correlations. No step-level
/// output: the join validates prefix values, it does not localize errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub n_groups: usize,
    pub n_continuations: u64,
    pub mean_value: f64,
    pub brier_source: f64,
    pub brier_belief: f64,
    pub pearson_source: Option<f64>,
    pub pearson_belief: Option<f64>,
    pub spearman_source: Option<f64>,
    pub spearman_belief: Option<f64>,
}

/// Scores available for joining, keyed by (trace_id, prefix index).
pub type PrefixScores = BTreeMap<(String, usize), (f64, f64)>;

/// Join rollout groups to evaluated prefixes. Every group must match an
/// evaluated prefix; rows come back sorted by key, so input order cannot
/// matter.
pub fn rollout_join(
    scores: &PrefixScores,
    groups: &[RolloutGroup],
) -> Result<(Vec<JoinedRow>, RolloutSummary), DecisionError> {
    if groups.is_empty() {
        return Err(DecisionError::Empty);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for g in groups {
        if g.k == 0 {
            return Err(DecisionError::EmptyGroup {
                trace_id: g.trace_id.clone(),
                t: g.t,
            });
        }
        if g.successes > g.k {
            return Err(DecisionError::BadSuccessCount {
                trace_id: g.trace_id.clone(),
                t: g.t,
                successes: g.successes,
                k: g.k,
            });
        }
        let key = (g.trace_id.clone(), g.t);
        let &(source_score, belief) = scores.get(&key).ok_or_else(|| DecisionError::UnmatchedKey {
            trace_id: g.trace_id.clone(),
            t: g.t,
        })?;
        rows.push(JoinedRow {
            trace_id: g.trace_id.clone(),
            t: g.t,
            source_score,
            belief,
            value: g.value(),
            std_error: g.std_error(),
            k: g.k,
        });
    }
    rows.sort_by(|a, b| (&a.trace_id, a.t).cmp(&(&b.trace_id, b.t)));

    let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let sources: Vec<f64> = rows.iter().map(|r| r.source_score).collect();
    let beliefs: Vec<f64> = rows.iter().map(|r| r.belief).collect();

    // Brier with the rollout estimate as the target: mean squared deviation.
    // Source scores are unconstrained reals, so no [0, 1] check here.
    let mse = |xs: &[f64]| -> f64 {
        xs.iter()
            .zip(&values)
            .map(|(&x, &v)| (x - v) * (x - v))
            .sum::<f64>()
            / xs.len() as f64
    };

    let summary = RolloutSummary {
        n_groups: rows.len(),
        n_continuations: rows.iter().map(|r| r.k as u64).sum(),
        mean_value: values.iter().sum::<f64>() / values.len() as f64,
        brier_source: mse(&sources),
        brier_belief: mse(&beliefs),
        pearson_source: pearson(&sources, &values),
        pearson_belief: pearson(&beliefs, &values),
        spearman_source: spearman(&sources, &values),
        spearman_belief: spearman(&beliefs, &values),
    };
    Ok((rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(label: u8, readouts: &[f64]) -> LabeledSeries {
        LabeledSeries {
            trace_id: format!("t{label}-{}", readouts.len()),
            label,
            readouts: readouts.to_vec(),
        }
    }

    #[test]
    fn separable_beliefs_reach_full_recall_without_false_positives() {
        let cal = vec![
            series(0, &[0.2, 0.1, 0.1]),
            series(0, &[0.3, 0.2, 0.1]),
            series(1, &[0.8, 0.9, 0.9]),
            series(1, &[0.7, 0.8, 0.9]),
        ];
        let op = choose_threshold(&cal, UtilityTarget::RecallAtLeast(1.0)).unwrap();
        assert_eq!(op.recall_incorrect, 1.0);
        assert_eq!(op.fpr, 0.0);
        assert!(op.saved_compute > 0.0);
    }

    #[test]
    fn threshold_above_all_risks_flags_nothing() {
        let cal = vec![series(0, &[0.5, 0.5]), series(1, &[0.5, 0.5])];
        let sweep = evaluate_threshold(&cal, 2.0);
        assert_eq!(sweep.recall, 0.0);
        assert_eq!(sweep.fpr, 0.0);
        assert_eq!(sweep.saved, 0.0);
    }

    #[test]
    fn raising_threshold_never_increases_recall_or_fpr() {
        let cal = vec![
            series(0, &[0.6, 0.3, 0.2, 0.5]),
            series(0, &[0.9, 0.7, 0.4]),
            series(1, &[0.4, 0.6, 0.8]),
            series(1, &[0.7, 0.5, 0.9, 0.8]),
        ];
        let mut prev_recall = f64::INFINITY;
        let mut prev_fpr = f64::INFINITY;
        for i in 0..=20 {
            let threshold = i as f64 / 20.0;
            let sweep = evaluate_threshold(&cal, threshold);
            assert!(sweep.recall <= prev_recall + 1e-12);
            assert!(sweep.fpr <= prev_fpr + 1e-12);
            prev_recall = sweep.recall;
            prev_fpr = sweep.fpr;
        }
    }

    #[test]
    fn flagging_is_prefix_safe() {
        // Recomputing the flag from prefix views changes nothing: the flag
        // index depends only on readouts up to the crossing.
        let readouts = vec![0.9, 0.4, 0.8, 0.2];
        let threshold = 0.55; // risk >= 0.55 means readout <= 0.45
        let full = flag_index(&readouts, threshold);
        assert_eq!(full, Some(2));
        // Truncating after the flag cannot move it.
        for t in 2..=readouts.len() {
            assert_eq!(flag_index(&readouts[..t], threshold), Some(2));
        }
    }

    #[test]
    fn unreachable_target_is_an_error() {
        let cal = vec![series(0, &[0.5]), series(1, &[0.5])];
        // Identical readouts: any threshold flags both or neither, so
        // recall 1 forces fpr 1; an FPR cap of 0 with positive recall is
        // unreachable, and recall >= 1 with fpr <= 0 cannot be met by any
        // candidate when classes tie. FprAtMost(0) is satisfiable only by
        // flagging nothing, which no observed-risk candidate achieves here
        // except thresholds above all risks, which are not candidates, so
        // expect the fallback behavior: the sweep finds threshold-equal
        // candidates flagging both. recall target 1.0 IS reachable (flag
        // everything), so test an impossible FPR target instead.
        let err = choose_threshold(&cal, UtilityTarget::FprAtMost(-0.1)).unwrap_err();
        assert!(matches!(err, DecisionError::UnreachableTarget(_)));
    }

    #[test]
    fn rollout_group_formulas() {
        let g = RolloutGroup {
            trace_id: "a".into(),
            t: 3,
            k: 4,
            successes: 2,
        };
        assert_eq!(g.value(), 0.5);
        assert_eq!(g.std_error(), 0.25);

        let zero = RolloutGroup {
            trace_id: "a".into(),
            t: 3,
            k: 4,
            successes: 0,
        };
        assert_eq!(zero.value(), 0.0);
        assert_eq!(zero.std_error(), 0.0);

        let g3 = RolloutGroup {
            trace_id: "a".into(),
            t: 3,
            k: 4,
            successes: 3,
        };
        assert!((g3.value() - 0.75).abs() < 1e-15);
        assert!((g3.std_error() - (0.75f64 * 0.25 / 4.0).sqrt()).abs() < 1e-15);
    }

    fn score_map() -> PrefixScores {
        let mut m = PrefixScores::new();
        m.insert(("a".into(), 1), (0.3, 0.4));
        m.insert(("a".into(), 2), (0.5, 0.7));
        m.insert(("b".into(), 1), (0.9, 0.2));
        m
    }

    #[test]
    fn join_is_order_invariant() {
        let groups = vec![
            RolloutGroup { trace_id: "a".into(), t: 1, k: 4, successes: 1 },
            RolloutGroup { trace_id: "a".into(), t: 2, k: 4, successes: 3 },
            RolloutGroup { trace_id: "b".into(), t: 1, k: 2, successes: 0 },
        ];
        let mut reversed = groups.clone();
        reversed.reverse();
        let (rows_a, sum_a) = rollout_join(&score_map(), &groups).unwrap();
        let (rows_b, sum_b) = rollout_join(&score_map(), &reversed).unwrap();
        assert_eq!(rows_a, rows_b);
        assert_eq!(sum_a, sum_b);
        assert_eq!(sum_a.n_groups, 3);
        assert_eq!(sum_a.n_continuations, 10);
    }

    #[test]
    fn join_rejects_bad_groups() {
        let unmatched = vec![RolloutGroup { trace_id: "zz".into(), t: 9, k: 4, successes: 1 }];
        assert!(matches!(
            rollout_join(&score_map(), &unmatched),
            Err(DecisionError::UnmatchedKey { .. })
        ));
        let empty = vec![RolloutGroup { trace_id: "a".into(), t: 1, k: 0, successes: 0 }];
        assert!(matches!(
            rollout_join(&score_map(), &empty),
            Err(DecisionError::EmptyGroup { .. })
        ));
        let overfull = vec![RolloutGroup { trace_id: "a".into(), t: 1, k: 2, successes: 3 }];
        assert!(matches!(
            rollout_join(&score_map(), &overfull),
            Err(DecisionError::BadSuccessCount { .. })
        ));
    }

    #[test]
    fn constant_columns_yield_undefined_correlations() {
        let mut m = PrefixScores::new();
        m.insert(("a".into(), 1), (0.5, 0.5));
        m.insert(("b".into(), 1), (0.5, 0.5));
        let groups = vec![
            RolloutGroup { trace_id: "a".into(), t: 1, k: 4, successes: 1 },
            RolloutGroup { trace_id: "b".into(), t: 1, k: 4, successes: 3 },
        ];
        let (_, summary) = rollout_join(&m, &groups).unwrap();
        assert_eq!(summary.pearson_source, None);
        assert_eq!(summary.spearman_source, None);
    }
}
