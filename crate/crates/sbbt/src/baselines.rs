//! The prefix-safe comparator set.
//!
//! Standard baselines: score summaries (last, mean), moving average, EMA,
//! isotonic-calibrated last/EMA, a temporal summary collapsed through a
//! fitted monotone map, and a deterministic learned score/length classifier.
//! The prefix-feature classifier (PFC) is the separate same-prefix audit:
//! score summaries, observed prefix length, and concept-code features from
//! the same observation stream, trained only on calibration traces.
//!
//! Every baseline value at prefix t is a pure function of the prefix view
//! and pre-fit artifacts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PrefixView, TraceRecord};
use crate::isotonic::{IsotonicError, IsotonicMap};
use crate::logistic::{self, LogisticError, TrainConfig};
use crate::provenance::{Provenance, ProvenanceError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("trace `{trace_id}` event t={t} is missing the score channel")]
    MissingScore { trace_id: String, t: usize },
    #[error("trace `{trace_id}` event t={t} is missing the concept channel")]
    MissingConcept { trace_id: String, t: usize },
    #[error("trace `{trace_id}` event t={t} carries concept `{code}` outside the declared alphabet")]
    UnknownCode {
        trace_id: String,
        t: usize,
        code: String,
    },
    #[error("moving-average window must be at least 1")]
    BadWindow,
    #[error("EMA coefficient must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("every feature column is constant; nothing to fit")]
    AllFeaturesConstant,
    #[error("calibration set is empty")]
    Empty,
    #[error(transparent)]
    Logistic(#[from] LogisticError),
    #[error(transparent)]
    Isotonic(#[from] IsotonicError),
    #[error(transparent)]
    Provenance(#[from] ProvenanceError),
}

/// Window and EMA coefficient shared by summary features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryParams {
    pub window: usize,
    pub ema_alpha: f64,
}

impl Default for SummaryParams {
    fn default() -> Self {
        SummaryParams {
            window: 5,
            ema_alpha: 0.3,
        }
    }
}

impl SummaryParams {
    fn validate(&self) -> Result<(), BaselineError> {
        if self.window < 1 {
            return Err(BaselineError::BadWindow);
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(BaselineError::BadAlpha(self.ema_alpha));
        }
        Ok(())
    }
}

fn scores_of(view: &PrefixView<'_>) -> Result<Vec<f64>, BaselineError> {
    view.events()
        .iter()
        .map(|e| {
            e.score.ok_or_else(|| BaselineError::MissingScore {
                trace_id: view.trace_id().to_string(),
                t: e.t,
            })
        })
        .collect()
}

pub fn last_score(view: &PrefixView<'_>) -> Result<f64, BaselineError> {
    let e = view.last_event();
    e.score.ok_or_else(|| BaselineError::MissingScore {
        trace_id: view.trace_id().to_string(),
        t: e.t,
    })
}

pub fn mean_score(view: &PrefixView<'_>) -> Result<f64, BaselineError> {
    let scores = scores_of(view)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn moving_average(view: &PrefixView<'_>, window: usize) -> Result<f64, BaselineError> {
    if window < 1 {
        return Err(BaselineError::BadWindow);
    }
    let scores = scores_of(view)?;
    let take = window.min(scores.len());
    let tail = &scores[scores.len() - take..];
    Ok(tail.iter().sum::<f64>() / take as f64)
}

/// EMA with `ema_1 = a_1`, `ema_t = alpha * a_t + (1 - alpha) * ema_{t-1}`.
pub fn ema(view: &PrefixView<'_>, alpha: f64) -> Result<f64, BaselineError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(BaselineError::BadAlpha(alpha));
    }
    let scores = scores_of(view)?;
    let mut value = scores[0];
    for &s in &scores[1..] {
        value = alpha * s + (1.0 - alpha) * value;
    }
    Ok(value)
}

/// Least-squares slope of scores against prefix index; zero for a single
/// point.
pub fn score_slope(scores: &[f64]) -> f64 {
    let n = scores.len();
    if n < 2 {
        return 0.0;
    }
    let mean_t = (n as f64 + 1.0) / 2.0;
    let mean_s = scores.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        let dt = (i + 1) as f64 - mean_t;
        num += dt * (s - mean_s);
        den += dt * dt;
    }
    num / den
}

/// Standardization plus a deterministic logistic fit over prefix features.
/// Constant columns are dropped (with a report) before fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixClassifier {
    pub feature_names: Vec<String>,
    /// Indices of `feature_names` kept after dropping constant columns.
    pub kept: Vec<usize>,
    pub dropped: Vec<String>,
    /// Column means and standard deviations for the kept features.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Weights in the standardized feature space.
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Concept alphabet when concept features are included.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<Vec<String>>,
    pub params: SummaryParams,
    pub l2: f64,
    pub provenance: Provenance,
}

impl PrefixClassifier {
    pub fn probability(&self, view: &PrefixView<'_>) -> Result<f64, BaselineError> {
        let raw = prefix_features(view, &self.params, self.alphabet.as_deref())?;
        let mut z = self.bias;
        for (slot, &col) in self.kept.iter().enumerate() {
            let x = (raw[col] - self.means[slot]) / self.stds[slot];
            z += self.weights[slot] * x;
        }
        Ok(logistic::sigmoid(z))
    }
}

/// Names for the score-summary block of the feature vector.
fn score_feature_names() -> Vec<String> {
    ["last", "ema", "moving_average", "mean", "delta", "length"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Feature vector for one prefix: last score, EMA, moving average, mean,
/// score delta (a_t - a_{t-1}, zero at t=1), and observed prefix length;
/// with an alphabet, also the last-code one-hot, the code frequency vector
/// over the prefix, and the concept transition rate.
pub fn prefix_features(
    view: &PrefixView<'_>,
    params: &SummaryParams,
    alphabet: Option<&[String]>,
) -> Result<Vec<f64>, BaselineError> {
    params.validate()?;
    let scores = scores_of(view)?;
    let n = scores.len();
    let last = scores[n - 1];
    let mean = scores.iter().sum::<f64>() / n as f64;
    let take = params.window.min(n);
    let ma = scores[n - take..].iter().sum::<f64>() / take as f64;
    let mut ema_value = scores[0];
    for &s in &scores[1..] {
        ema_value = params.ema_alpha * s + (1.0 - params.ema_alpha) * ema_value;
    }
    let delta = if n >= 2 { last - scores[n - 2] } else { 0.0 };

    let mut features = vec![last, ema_value, ma, mean, delta, n as f64];

    if let Some(alphabet) = alphabet {
        let mut indices = Vec::with_capacity(n);
        for e in view.events() {
            let code = e.concept.as_deref().ok_or_else(|| BaselineError::MissingConcept {
                trace_id: view.trace_id().to_string(),
                t: e.t,
            })?;
            let idx = alphabet.iter().position(|c| c == code).ok_or_else(|| {
                BaselineError::UnknownCode {
                    trace_id: view.trace_id().to_string(),
                    t: e.t,
                    code: code.to_string(),
                }
            })?;
            indices.push(idx);
        }
        let mut one_hot = vec![0.0; alphabet.len()];
        one_hot[indices[n - 1]] = 1.0;
        let mut freq = vec![0.0; alphabet.len()];
        for &idx in &indices {
            freq[idx] += 1.0 / n as f64;
        }
        let transitions = indices.windows(2).filter(|w| w[0] != w[1]).count();
        let rate = if n >= 2 {
            transitions as f64 / (n as f64 - 1.0)
        } else {
            0.0
        };
        features.extend(one_hot);
        features.extend(freq);
        features.push(rate);
    }
    Ok(features)
}

fn feature_names(alphabet: Option<&[String]>) -> Vec<String> {
    let mut names = score_feature_names();
    if let Some(alphabet) = alphabet {
        for code in alphabet {
            names.push(format!("last_code[{code}]"));
        }
        for code in alphabet {
            names.push(format!("code_freq[{code}]"));
        }
        names.push("concept_transition_rate".to_string());
    }
    names
}

fn fit_classifier(
    calibration: &[&TraceRecord],
    params: SummaryParams,
    alphabet: Option<Vec<String>>,
    l2: f64,
) -> Result<PrefixClassifier, BaselineError> {
    if calibration.is_empty() {
        return Err(BaselineError::Empty);
    }
    params.validate()?;
    let names = feature_names(alphabet.as_deref());
    let mut rows = Vec::with_capacity(calibration.len());
    let mut labels = Vec::with_capacity(calibration.len());
    for record in calibration {
        let view = record.full_view();
        rows.push(prefix_features(&view, &params, alphabet.as_deref())?);
        labels.push(record.final_label);
    }

    let dim = names.len();
    let n = rows.len() as f64;
    let mut means = vec![0.0; dim];
    for row in &rows {
        for (m, x) in means.iter_mut().zip(row) {
            *m += x / n;
        }
    }
    let mut stds = vec![0.0; dim];
    for row in &rows {
        for ((s, x), m) in stds.iter_mut().zip(row).zip(&means) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for s in &mut stds {
        *s = s.sqrt();
    }

    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (i, &s) in stds.iter().enumerate() {
        if s > 1e-12 {
            kept.push(i);
        } else {
            dropped.push(names[i].clone());
        }
    }
    if kept.is_empty() {
        return Err(BaselineError::AllFeaturesConstant);
    }

    let kept_means: Vec<f64> = kept.iter().map(|&i| means[i]).collect();
    let kept_stds: Vec<f64> = kept.iter().map(|&i| stds[i]).collect();
    let standardized: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| {
            kept.iter()
                .enumerate()
                .map(|(slot, &i)| (row[i] - kept_means[slot]) / kept_stds[slot])
                .collect()
        })
        .collect();

    let fit = logistic::train(&standardized, &labels, &TrainConfig::with_l2(l2))?;
    Ok(PrefixClassifier {
        feature_names: names,
        kept,
        dropped,
        means: kept_means,
        stds: kept_stds,
        weights: fit.weights,
        bias: fit.bias,
        alphabet,
        params,
        l2,
        provenance: Provenance::calibration(),
    })
}

/// Prefix-feature classifier audit: score summaries, length, and concept
/// features. With no alphabet it degenerates to the learned score/length
/// feature set.
pub fn fit_pfc(
    calibration: &[&TraceRecord],
    params: SummaryParams,
    alphabet: Option<Vec<String>>,
    l2: f64,
) -> Result<PrefixClassifier, BaselineError> {
    fit_classifier(calibration, params, alphabet, l2)
}

/// Deterministic learned score/length baseline: the PFC feature set without
/// concept features.
pub fn fit_learned_score_length(
    calibration: &[&TraceRecord],
    params: SummaryParams,
    l2: f64,
) -> Result<PrefixClassifier, BaselineError> {
    fit_classifier(calibration, params, None, l2)
}

/// Temporal summary: the fixed (last, mean, slope) vector collapsed by a
/// calibration-fitted monotone map of its fitted linear score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSummaryModel {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub map: IsotonicMap,
    pub provenance: Provenance,
}

impl TemporalSummaryModel {
    fn raw_features(view: &PrefixView<'_>) -> Result<Vec<f64>, BaselineError> {
        let scores = scores_of(view)?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        Ok(vec![scores[scores.len() - 1], mean, score_slope(&scores)])
    }

    fn linear_score(&self, view: &PrefixView<'_>) -> Result<f64, BaselineError> {
        let raw = Self::raw_features(view)?;
        let mut z = self.bias;
        for ((w, x), (m, s)) in self
            .weights
            .iter()
            .zip(&raw)
            .zip(self.means.iter().zip(&self.stds))
        {
            z += w * (x - m) / s;
        }
        Ok(z)
    }

    pub fn score(&self, view: &PrefixView<'_>) -> Result<f64, BaselineError> {
        Ok(self.map.eval(self.linear_score(view)?))
    }
}

pub fn fit_temporal_summary(
    calibration: &[&TraceRecord],
    l2: f64,
) -> Result<TemporalSummaryModel, BaselineError> {
    if calibration.is_empty() {
        return Err(BaselineError::Empty);
    }
    let mut rows = Vec::with_capacity(calibration.len());
    let mut labels = Vec::with_capacity(calibration.len());
    for record in calibration {
        rows.push(TemporalSummaryModel::raw_features(&record.full_view())?);
        labels.push(record.final_label);
    }
    let dim = 3;
    let n = rows.len() as f64;
    let mut means = vec![0.0; dim];
    for row in &rows {
        for (m, x) in means.iter_mut().zip(row) {
            *m += x / n;
        }
    }
    let mut stds = vec![0.0; dim];
    for row in &rows {
        for ((s, x), m) in stds.iter_mut().zip(row).zip(&means) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for s in &mut stds {
        *s = s.sqrt().max(1e-12); // constant columns contribute nothing
    }
    let standardized: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| {
            row.iter()
                .zip(means.iter().zip(&stds))
                .map(|(x, (m, s))| (x - m) / s)
                .collect()
        })
        .collect();
    let fit = logistic::train(&standardized, &labels, &TrainConfig::with_l2(l2))?;

    let model = TemporalSummaryModel {
        means,
        stds,
        weights: fit.weights,
        bias: fit.bias,
        map: IsotonicMap::fit(&[(0.0, 0.0), (1.0, 1.0)])?, // placeholder, replaced below
        provenance: Provenance::calibration(),
    };
    // Monotone collapse of the linear score, fitted on the same traces.
    let mut pairs = Vec::with_capacity(calibration.len());
    for (record, &label) in calibration.iter().zip(&labels) {
        pairs.push((model.linear_score(&record.full_view())?, label as f64));
    }
    let map = IsotonicMap::fit(&pairs)?;
    Ok(TemporalSummaryModel { map, ..model })
}

/// Fit an isotonic calibration map from a final-prefix summary to labels.
fn fit_summary_map<F>(calibration: &[&TraceRecord], summary: F) -> Result<IsotonicMap, BaselineError>
where
    F: Fn(&PrefixView<'_>) -> Result<f64, BaselineError>,
{
    if calibration.is_empty() {
        return Err(BaselineError::Empty);
    }
    let mut pairs = Vec::with_capacity(calibration.len());
    for record in calibration {
        pairs.push((summary(&record.full_view())?, record.final_label as f64));
    }
    Ok(IsotonicMap::fit(&pairs)?)
}

/// A ready-to-score comparator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Baseline {
    LastScore,
    MeanScore,
    MovingAverage { window: usize },
    Ema { alpha: f64 },
    CalibratedLast { map: IsotonicMap, provenance: Provenance },
    CalibratedEma {
        alpha: f64,
        map: IsotonicMap,
        provenance: Provenance,
    },
    TemporalSummary { model: TemporalSummaryModel },
    LearnedScoreLength { model: PrefixClassifier },
    Pfc { model: PrefixClassifier },
}

impl Baseline {
    pub fn name(&self) -> String {
        match self {
            Baseline::LastScore => "last-score".into(),
            Baseline::MeanScore => "mean-score".into(),
            Baseline::MovingAverage { window } => format!("moving-average({window})"),
            Baseline::Ema { alpha } => format!("ema({alpha})"),
            Baseline::CalibratedLast { .. } => "calibrated-last".into(),
            Baseline::CalibratedEma { .. } => "calibrated-ema".into(),
            Baseline::TemporalSummary { .. } => "temporal-summary".into(),
            Baseline::LearnedScoreLength { .. } => "learned-score-length".into(),
            Baseline::Pfc { .. } => "pfc".into(),
        }
    }

    /// The audit classifier is reported separately from the standard set.
    pub fn is_audit(&self) -> bool {
        matches!(self, Baseline::Pfc { .. })
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        match self {
            Baseline::LastScore | Baseline::MeanScore | Baseline::MovingAverage { .. } | Baseline::Ema { .. } => None,
            Baseline::CalibratedLast { provenance, .. } => Some(provenance),
            Baseline::CalibratedEma { provenance, .. } => Some(provenance),
            Baseline::TemporalSummary { model } => Some(&model.provenance),
            Baseline::LearnedScoreLength { model } => Some(&model.provenance),
            Baseline::Pfc { model } => Some(&model.provenance),
        }
    }

    /// Refuse test-tagged fitted artifacts.
    pub fn check_usable(&self) -> Result<(), BaselineError> {
        if let Some(p) = self.provenance() {
            p.check_usable(&self.name())?;
        }
        Ok(())
    }

    /// Baseline value at this prefix.
    pub fn score(&self, view: &PrefixView<'_>) -> Result<f64, BaselineError> {
        match self {
            Baseline::LastScore => last_score(view),
            Baseline::MeanScore => mean_score(view),
            Baseline::MovingAverage { window } => moving_average(view, *window),
            Baseline::Ema { alpha } => ema(view, *alpha),
            Baseline::CalibratedLast { map, .. } => Ok(map.eval(last_score(view)?)),
            Baseline::CalibratedEma { alpha, map, .. } => Ok(map.eval(ema(view, *alpha)?)),
            Baseline::TemporalSummary { model } => model.score(view),
            Baseline::LearnedScoreLength { model } => model.probability(view),
            Baseline::Pfc { model } => model.probability(view),
        }
    }
}

/// Fit the full standard comparator set on calibration traces.
pub fn fit_standard_set(
    calibration: &[&TraceRecord],
    params: SummaryParams,
    l2: f64,
) -> Result<Vec<Baseline>, BaselineError> {
    params.validate()?;
    let calibrated_last = fit_summary_map(calibration, last_score)?;
    let calibrated_ema = fit_summary_map(calibration, |v| ema(v, params.ema_alpha))?;
    Ok(vec![
        Baseline::LastScore,
        Baseline::MeanScore,
        Baseline::MovingAverage { window: params.window },
        Baseline::Ema { alpha: params.ema_alpha },
        Baseline::CalibratedLast {
            map: calibrated_last,
            provenance: Provenance::calibration(),
        },
        Baseline::CalibratedEma {
            alpha: params.ema_alpha,
            map: calibrated_ema,
            provenance: Provenance::calibration(),
        },
        Baseline::TemporalSummary {
            model: fit_temporal_summary(calibration, l2)?,
        },
        Baseline::LearnedScoreLength {
            model: fit_learned_score_length(calibration, params, l2)?,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ObservationEvent;
    use crate::metrics;

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

    fn concept_scored_trace(id: &str, label: u8, rows: &[(f64, &str)]) -> TraceRecord {
        TraceRecord {
            question_id: format!("q-{id}"),
            trace_id: id.to_string(),
            final_label: label,
            events: rows
                .iter()
                .enumerate()
                .map(|(i, &(s, c))| {
                    let mut e = ObservationEvent::score_at(i + 1, s);
                    e.concept = Some(c.to_string());
                    e
                })
                .collect(),
            meta: Default::default(),
        }
    }

    #[test]
    fn constant_scores_collapse_all_summaries() {
        let r = trace("a", 1, &[0.4, 0.4, 0.4, 0.4]);
        let v = r.full_view();
        assert_eq!(last_score(&v).unwrap(), 0.4);
        assert_eq!(mean_score(&v).unwrap(), 0.4);
        assert_eq!(moving_average(&v, 2).unwrap(), 0.4);
        assert!((ema(&v, 0.3).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ema_hand_recursion() {
        let r = trace("a", 1, &[0.0, 1.0]);
        let v = r.full_view();
        assert!((ema(&v, 0.5).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ema_alpha_one_is_last_score() {
        let r = trace("a", 1, &[0.3, 0.9, 0.1, 0.7]);
        let v = r.full_view();
        assert_eq!(ema(&v, 1.0).unwrap(), last_score(&v).unwrap());
    }

    #[test]
    fn window_covering_prefix_equals_mean() {
        let r = trace("a", 1, &[0.1, 0.5, 0.9]);
        let v = r.full_view();
        assert_eq!(moving_average(&v, 10).unwrap(), mean_score(&v).unwrap());
    }

    #[test]
    fn slope_of_linear_scores() {
        assert!((score_slope(&[0.1, 0.2, 0.3, 0.4]) - 0.1).abs() < 1e-12);
        assert_eq!(score_slope(&[0.7]), 0.0);
    }

    #[test]
    fn transition_rate_examples() {
        let r = concept_scored_trace("a", 1, &[(0.1, "x"), (0.2, "x"), (0.3, "x")]);
        let alphabet = vec!["x".to_string(), "y".to_string()];
        let f = prefix_features(&r.full_view(), &SummaryParams::default(), Some(&alphabet)).unwrap();
        // Constant code: transition rate 0.
        assert_eq!(*f.last().unwrap(), 0.0);

        let r2 = concept_scored_trace("b", 1, &[(0.1, "x"), (0.2, "y"), (0.3, "x")]);
        let f2 = prefix_features(&r2.full_view(), &SummaryParams::default(), Some(&alphabet)).unwrap();
        assert_eq!(*f2.last().unwrap(), 1.0);
    }

    #[test]
    fn pfc_learns_length_threshold() {
        // Labels determined exactly by prefix length: short traces succeed.
        let mut traces = Vec::new();
        for i in 0..30 {
            let len = 2 + (i % 10);
            let label = u8::from(len <= 6);
            let scores: Vec<f64> = (0..len).map(|j| 0.5 + 0.01 * (j as f64)).collect();
            traces.push(trace(&format!("t{i}"), label, &scores));
        }
        let refs: Vec<&TraceRecord> = traces.iter().collect();
        let model = fit_pfc(&refs, SummaryParams::default(), None, 0.01).unwrap();
        let scores: Vec<f64> = refs
            .iter()
            .map(|r| model.probability(&r.full_view()).unwrap())
            .collect();
        let labels: Vec<u8> = refs.iter().map(|r| r.final_label).collect();
        assert_eq!(metrics::auroc(&scores, &labels), Some(1.0));
    }

    #[test]
    fn pfc_without_concepts_equals_learned_score_length() {
        let traces: Vec<TraceRecord> = (0..20)
            .map(|i| {
                let scores: Vec<f64> = (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin().abs()).collect();
                trace(&format!("t{i}"), (i % 2) as u8, &scores)
            })
            .collect();
        let refs: Vec<&TraceRecord> = traces.iter().collect();
        let a = fit_pfc(&refs, SummaryParams::default(), None, 1.0).unwrap();
        let b = fit_learned_score_length(&refs, SummaryParams::default(), 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pfc_on_permuted_labels_stays_near_chance() {
        // Real structure, labels detached from it: held-out AUROC must sit
        // near one half.
        let make = |label_of: &dyn Fn(usize) -> u8| -> Vec<TraceRecord> {
            (0..60)
                .map(|i| {
                    let len = 3 + (i % 7);
                    let scores: Vec<f64> =
                        (0..len).map(|j| ((i * 13 + j * 5) as f64 * 0.41).sin().abs()).collect();
                    trace(&format!("t{i}"), label_of(i), &scores)
                })
                .collect()
        };
        // "Permuted": labels depend on an index hash unrelated to features.
        let train = make(&|i| ((i * 7 + 3) % 5 < 2) as u8);
        let held = make(&|i| ((i * 11 + 1) % 5 < 2) as u8);
        let refs: Vec<&TraceRecord> = train.iter().collect();
        let model = fit_pfc(&refs, SummaryParams::default(), None, 1.0).unwrap();
        let scores: Vec<f64> = held
            .iter()
            .map(|r| model.probability(&r.full_view()).unwrap())
            .collect();
        let labels: Vec<u8> = held.iter().map(|r| r.final_label).collect();
        let auroc = metrics::auroc(&scores, &labels).unwrap();
        assert!((auroc - 0.5).abs() < 0.2, "permuted-label AUROC {auroc}");
    }

    #[test]
    fn pfc_fitting_is_deterministic() {
        let traces: Vec<TraceRecord> = (0..16)
            .map(|i| {
                let scores: Vec<f64> = (0..5).map(|j| ((i + j) as f64 * 0.21).cos().abs()).collect();
                trace(&format!("t{i}"), (i % 2) as u8, &scores)
            })
            .collect();
        let refs: Vec<&TraceRecord> = traces.iter().collect();
        let a = fit_pfc(&refs, SummaryParams::default(), None, 1.0).unwrap();
        let b = fit_pfc(&refs, SummaryParams::default(), None, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn learned_score_length_picks_up_length_signal() {
        // Shorter traces are correct; scores carry nothing.
        let mut traces = Vec::new();
        for i in 0..40 {
            let len = 2 + (i % 8);
            let label = u8::from(len <= 5);
            let scores: Vec<f64> = (0..len).map(|_| 0.5).collect();
            traces.push(trace(&format!("t{i}"), label, &scores));
        }
        let refs: Vec<&TraceRecord> = traces.iter().collect();
        let model = fit_learned_score_length(&refs, SummaryParams::default(), 0.1).unwrap();
        let scores: Vec<f64> = refs
            .iter()
            .map(|r| model.probability(&r.full_view()).unwrap())
            .collect();
        let labels: Vec<u8> = refs.iter().map(|r| r.final_label).collect();
        assert!(metrics::auroc(&scores, &labels).unwrap() > 0.95);
        // Constant score columns were dropped and reported.
        assert!(!model.dropped.is_empty());
    }

    #[test]
    fn baseline_scores_are_prefix_functions() {
        let traces: Vec<TraceRecord> = (0..12)
            .map(|i| {
                let scores: Vec<f64> = (0..6).map(|j| ((i * 3 + j) as f64 * 0.29).sin().abs()).collect();
                trace(&format!("t{i}"), (i % 2) as u8, &scores)
            })
            .collect();
        let refs: Vec<&TraceRecord> = traces.iter().collect();
        let set = fit_standard_set(&refs, SummaryParams::default(), 1.0).unwrap();
        let record = &traces[0];
        for baseline in &set {
            baseline.check_usable().unwrap();
            for t in 1..=record.len() {
                let direct = baseline.score(&record.prefix_view(t).unwrap()).unwrap();
                // Recompute through a nested view: must be bit-identical.
                let outer = record.prefix_view(record.len()).unwrap();
                let nested = baseline.score(&outer.prefix_view(t).unwrap()).unwrap();
                assert_eq!(direct.to_bits(), nested.to_bits());
            }
        }
    }

    #[test]
    fn test_tagged_artifact_is_refused() {
        let traces: Vec<TraceRecord> = (0..8)
            .map(|i| trace(&format!("t{i}"), (i % 2) as u8, &[0.1 * i as f64, 0.5]))
            .collect();
        let refs: Vec<&TraceRecord> = traces.iter().collect();
        let mut model = fit_learned_score_length(&refs, SummaryParams::default(), 1.0).unwrap();
        model.provenance.partition = crate::provenance::FitPartition::Test;
        let baseline = Baseline::LearnedScoreLength { model };
        assert!(matches!(
            baseline.check_usable(),
            Err(BaselineError::Provenance(_))
        ));
    }

    #[test]
    fn missing_score_channel_is_reported() {
        let r = TraceRecord {
            question_id: "q".into(),
            trace_id: "t".into(),
            final_label: 1,
            events: vec![ObservationEvent::concept_at(1, "x")],
            meta: Default::default(),
        };
        assert!(matches!(
            last_score(&r.full_view()),
            Err(BaselineError::MissingScore { .. })
        ));
    }
}
