//! Rank and probability-quality metrics, gap algebra, bootstrap intervals,
//! and fixed-fraction evaluation.
//!
//! AUROC is a rank statistic: the exact pairwise form is the definition here,
//! with a sort-based equivalent for large inputs. Brier and ECE measure the
//! numerical probability assigned to the realized outcome, which strictly
//! increasing maps can move while ranks stay fixed. Keeping both axes
//! explicit is the point of the reporting layer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("probability {value} at index {index} is outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("ECE needs at least one bin")]
    NoBins,
    #[error("empty baseline set")]
    EmptyBaselineSet,
    #[error("no valid seeds to summarize")]
    NoValidSeeds,
    #[error("cluster bootstrap needs at least 2 questions, got {0}")]
    TooFewQuestions(usize),
    #[error("statistic undefined on every bootstrap resample")]
    AllResamplesInvalid,
    #[error("empty fraction list")]
    EmptyFractions,
    #[error("fraction {0} is outside (0, 1]")]
    BadFraction(f64),
    #[error("empty input")]
    Empty,
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Exact pairwise AUROC with half-credit ties. `None` when a class is
/// missing: a degenerate input is flagged, never silently 0.5.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    debug_assert_eq!(scores.len(), labels.len());
    let mut wins = 0.0f64;
    let mut positives = 0usize;
    let mut negatives = 0usize;
    for (i, &yi) in labels.iter().enumerate() {
        if yi == 1 {
            positives += 1;
        } else {
            negatives += 1;
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj == 1 {
                continue;
            }
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if positives == 0 || negatives == 0 {
        return None;
    }
    Some(wins / (positives as f64 * negatives as f64))
}

/// Sort-based AUROC (Mann-Whitney with average ranks). Must agree with the
/// pairwise form within 1e-12; used where O(|P||N|) is too slow.
pub fn auroc_ranked(scores: &[f64], labels: &[u8]) -> Option<f64> {
    debug_assert_eq!(scores.len(), labels.len());
    let n = scores.len();
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tied groups, then the rank-sum statistic.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Some(u / (p * negatives as f64))
}

/// Mean squared error of probabilistic predictions against binary labels.
pub fn brier(probs: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_lengths(probs, labels)?;
    if probs.is_empty() {
        return Err(MetricError::Empty);
    }
    for (index, &p) in probs.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricError::ProbabilityOutOfRange { index, value: p });
        }
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - y as f64) * (p - y as f64))
        .sum();
    Ok(sum / probs.len() as f64)
}

/// One reliability-diagram row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_prob: f64,
    pub empirical_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
}

/// Equal-width binned expected calibration error plus the per-bin rows the
/// reliability diagrams are drawn from.
pub fn ece(probs: &[f64], labels: &[u8], bins: usize) -> Result<EceReport, MetricError> {
    check_lengths(probs, labels)?;
    if bins < 1 {
        return Err(MetricError::NoBins);
    }
    if probs.is_empty() {
        return Err(MetricError::Empty);
    }
    for (index, &p) in probs.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricError::ProbabilityOutOfRange { index, value: p });
        }
    }
    let mut count = vec![0usize; bins];
    let mut prob_sum = vec![0.0f64; bins];
    let mut label_sum = vec![0.0f64; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let mut b = (p * bins as f64).floor() as usize;
        if b == bins {
            b = bins - 1; // p == 1.0 belongs to the top bin
        }
        count[b] += 1;
        prob_sum[b] += p;
        label_sum[b] += y as f64;
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let mut rows = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        if count[b] == 0 {
            rows.push(ReliabilityBin {
                lo,
                hi,
                count: 0,
                mean_prob: 0.0,
                empirical_rate: 0.0,
            });
            continue;
        }
        let mean_prob = prob_sum[b] / count[b] as f64;
        let rate = label_sum[b] / count[b] as f64;
        total += (count[b] as f64 / n) * (mean_prob - rate).abs();
        rows.push(ReliabilityBin {
            lo,
            hi,
            count: count[b],
            mean_prob,
            empirical_rate: rate,
        });
    }
    Ok(EceReport { ece: total, bins: rows })
}

/// The three gap views for one method on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSet {
    /// Method AUROC minus the best standard prefix-safe baseline.
    pub standard: f64,
    /// Method AUROC minus the classifier audit baseline.
    pub pfc: f64,
    /// Method AUROC minus the best of standard plus the audit classifier.
    pub audit: f64,
}

/// Gap algebra for one split. The audit gap is computed from the enlarged
/// baseline set and checked against `min(standard, pfc)`, which it equals
/// identically.
pub fn gaps(method_auroc: f64, standard: &[f64], pfc_auroc: f64) -> Result<GapSet, MetricError> {
    if standard.is_empty() {
        return Err(MetricError::EmptyBaselineSet);
    }
    let best_standard = standard.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best_audit = best_standard.max(pfc_auroc);
    let set = GapSet {
        standard: method_auroc - best_standard,
        pfc: method_auroc - pfc_auroc,
        audit: method_auroc - best_audit,
    };
    debug_assert_eq!(set.audit, set.standard.min(set.pfc));
    Ok(set)
}

/// One evaluated (method, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub seed: u64,
    /// Absent on degenerate splits.
    pub auroc: Option<f64>,
    pub brier: f64,
    pub ece: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaps: Option<GapSet>,
    pub n_traces: usize,
}

/// Seed-averaged summary for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub method: String,
    pub valid_seeds: usize,
    pub mean_standard_gap: f64,
    pub mean_pfc_gap: f64,
    /// Mean of per-seed audit gaps. Not derivable from the two averaged gaps.
    pub mean_audit_gap: f64,
    /// min(mean standard, mean pfc): emitted only so the difference from
    /// `mean_audit_gap` stays visible.
    pub min_of_mean_gaps: f64,
    /// Share of valid seeds with a positive standard gap.
    pub positive_fraction: f64,
    pub mean_brier: f64,
    pub mean_ece: f64,
}

/// Average rows over the seeds where the split was valid for rank claims.
pub fn seed_summary(rows: &[MetricRow]) -> Result<SeedSummary, MetricError> {
    let valid: Vec<&MetricRow> = rows.iter().filter(|r| r.gaps.is_some()).collect();
    if valid.is_empty() {
        return Err(MetricError::NoValidSeeds);
    }
    let n = valid.len() as f64;
    let mut std_sum = 0.0;
    let mut pfc_sum = 0.0;
    let mut audit_sum = 0.0;
    let mut positive = 0usize;
    for row in &valid {
        let g = row.gaps.as_ref().unwrap();
        std_sum += g.standard;
        pfc_sum += g.pfc;
        audit_sum += g.audit;
        if g.standard > 0.0 {
            positive += 1;
        }
    }
    let mean_std = std_sum / n;
    let mean_pfc = pfc_sum / n;
    Ok(SeedSummary {
        method: rows[0].method.clone(),
        valid_seeds: valid.len(),
        mean_standard_gap: mean_std,
        mean_pfc_gap: mean_pfc,
        mean_audit_gap: audit_sum / n,
        min_of_mean_gaps: mean_std.min(mean_pfc),
        positive_fraction: positive as f64 / n,
        mean_brier: rows.iter().map(|r| r.brier).sum::<f64>() / rows.len() as f64,
        mean_ece: rows.iter().map(|r| r.ece).sum::<f64>() / rows.len() as f64,
    })
}

/// Percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub lo: f64,
    pub hi: f64,
    pub resamples: usize,
    /// Resamples where the statistic was undefined (dropped, counted).
    pub dropped: usize,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-index derived seed so resamples are reproducible independent of
/// evaluation order.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut state = base ^ 0xD6E8FEB86659FD93u64.wrapping_mul(index.wrapping_add(1));
    splitmix64(&mut state)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Question-cluster bootstrap: questions are resampled with replacement and
/// every trace of a sampled question is carried along. Returns the 95%
/// percentile interval of the statistic over resamples.
pub fn cluster_bootstrap<T, F>(
    groups: &[T],
    resamples: usize,
    seed: u64,
    statistic: F,
) -> Result<BootstrapInterval, MetricError>
where
    F: Fn(&[&T]) -> Option<f64>,
{
    if groups.len() < 2 {
        return Err(MetricError::TooFewQuestions(groups.len()));
    }
    let mut values = Vec::with_capacity(resamples);
    let mut dropped = 0usize;
    let mut sample: Vec<&T> = Vec::with_capacity(groups.len());
    for b in 0..resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, b as u64));
        sample.clear();
        for _ in 0..groups.len() {
            let idx = rng.gen_range(0..groups.len());
            sample.push(&groups[idx]);
        }
        match statistic(&sample) {
            Some(v) if v.is_finite() => values.push(v),
            _ => dropped += 1,
        }
    }
    if values.is_empty() {
        return Err(MetricError::AllResamplesInvalid);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(BootstrapInterval {
        lo: percentile(&values, 0.025),
        hi: percentile(&values, 0.975),
        resamples,
        dropped,
    })
}

/// Prefix index for a fixed fraction of a trace: `max(1, ceil(f * T))`.
pub fn fixed_fraction_index(fraction: f64, trace_len: usize) -> usize {
    ((fraction * trace_len as f64).ceil() as usize).max(1)
}

/// Per-trace score series for fixed-fraction evaluation: the online score at
/// every prefix, plus the final label.
#[derive(Debug, Clone)]
pub struct TraceScoreSeries {
    pub question_id: String,
    pub trace_id: String,
    pub label: u8,
    pub scores_by_prefix: Vec<f64>,
}

/// Metrics for one evaluated prefix fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub fraction: f64,
    pub auroc: Option<f64>,
    pub brier: Option<f64>,
    pub n_traces: usize,
}

/// Evaluate a score series at fixed prefix fractions. The Brier column is
/// present only when the scores are probabilities.
pub fn fixed_fraction_eval(
    series: &[TraceScoreSeries],
    fractions: &[f64],
) -> Result<Vec<FractionRow>, MetricError> {
    if fractions.is_empty() {
        return Err(MetricError::EmptyFractions);
    }
    if series.is_empty() {
        return Err(MetricError::Empty);
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(MetricError::BadFraction(f));
        }
    }
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut scores = Vec::with_capacity(series.len());
        let mut labels = Vec::with_capacity(series.len());
        for s in series {
            let idx = fixed_fraction_index(fraction, s.scores_by_prefix.len());
            scores.push(s.scores_by_prefix[idx - 1]);
            labels.push(s.label);
        }
        let auroc_value = auroc_ranked(&scores, &labels);
        let brier_value = if scores.iter().all(|&p| (0.0..=1.0).contains(&p)) {
            Some(brier(&scores, &labels)?)
        } else {
            None
        };
        rows.push(FractionRow {
            fraction,
            auroc: auroc_value,
            brier: brier_value,
            n_traces: series.len(),
        });
    }
    Ok(rows)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Average ranks with ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}
