//! Deterministic L2-regularized logistic regression.
//!
//! One trainer serves the pooled-feature probe, the learned score/length
//! baseline, the temporal-summary collapse, and the prefix-feature
//! classifier. Full-batch gradient descent with a fixed starting step and
//! halving on non-improvement: identical inputs and settings always produce
//! identical weights, which is the property the comparators require.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogisticError {
    #[error("training set contains a single class")]
    SingleClass,
    #[error("training set is empty")]
    Empty,
    #[error("feature row {row} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("non-finite feature value in row {0}")]
    NonFinite(usize),
}

/// Optimizer settings. The defaults are the fixed settings used everywhere;
/// they are recorded alongside fitted artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// L2 penalty strength on the weights (the bias is not penalized).
    pub l2: f64,
    /// Initial gradient-descent step.
    pub initial_step: f64,
    /// Iteration cap.
    pub max_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2: 1.0,
            initial_step: 0.1,
            max_iterations: 500,
        }
    }
}

impl TrainConfig {
    pub fn with_l2(l2: f64) -> Self {
        TrainConfig {
            l2,
            ..TrainConfig::default()
        }
    }
}

/// Fitted weights plus fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub final_loss: f64,
}

impl LogisticFit {
    pub fn linear_score(&self, features: &[f64]) -> f64 {
        debug_assert_eq!(features.len(), self.weights.len());
        let mut z = self.bias;
        for (w, x) in self.weights.iter().zip(features) {
            z += w * x;
        }
        z
    }

    pub fn probability(&self, features: &[f64]) -> f64 {
        sigmoid(self.linear_score(features))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean negative log-likelihood plus `l2/(2n) * ||w||^2`.
fn loss(features: &[Vec<f64>], labels: &[u8], w: &[f64], b: f64, l2: f64) -> f64 {
    let n = features.len() as f64;
    let mut nll = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let mut z = b;
        for (wi, xi) in w.iter().zip(x) {
            z += wi * xi;
        }
        let p = sigmoid(z).clamp(1e-12, 1.0 - 1e-12);
        nll -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    let penalty: f64 = w.iter().map(|wi| wi * wi).sum::<f64>() * l2 / 2.0;
    (nll + penalty) / n
}

fn gradient(
    features: &[Vec<f64>],
    labels: &[u8],
    w: &[f64],
    b: f64,
    l2: f64,
) -> (Vec<f64>, f64) {
    let n = features.len() as f64;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let mut z = b;
        for (wi, xi) in w.iter().zip(x) {
            z += wi * xi;
        }
        let residual = sigmoid(z) - y as f64;
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += residual * xi;
        }
        gb += residual;
    }
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = (*g + l2 * wi) / n;
    }
    (gw, gb / n)
}

/// Train on (feature row, binary label) pairs.
pub fn train(
    features: &[Vec<f64>],
    labels: &[u8],
    cfg: &TrainConfig,
) -> Result<LogisticFit, LogisticError> {
    if features.is_empty() {
        return Err(LogisticError::Empty);
    }
    let dim = features[0].len();
    for (row, x) in features.iter().enumerate() {
        if x.len() != dim {
            return Err(LogisticError::DimensionMismatch {
                row,
                found: x.len(),
                expected: dim,
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LogisticError::NonFinite(row));
        }
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(LogisticError::SingleClass);
    }

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut step = cfg.initial_step;
    let mut current = loss(features, labels, &w, b, cfg.l2);
    let mut iterations = 0;

    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let (gw, gb) = gradient(features, labels, &w, b, cfg.l2);
        let cand_w: Vec<f64> = w.iter().zip(&gw).map(|(wi, gi)| wi - step * gi).collect();
        let cand_b = b - step * gb;
        let cand_loss = loss(features, labels, &cand_w, cand_b, cfg.l2);
        if cand_loss < current {
            w = cand_w;
            b = cand_b;
            current = cand_loss;
        } else {
            step /= 2.0;
            if step < 1e-12 {
                break;
            }
        }
    }

    Ok(LogisticFit {
        weights: w,
        bias: b,
        iterations,
        final_loss: current,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact pairwise AUROC used as the local oracle.
    fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (si, &yi) in scores.iter().zip(labels) {
            if yi != 1 {
                continue;
            }
            for (sj, &yj) in scores.iter().zip(labels) {
                if yj != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn separable_data_reaches_perfect_training_auroc() {
        let features: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![if i < 10 { -1.0 - 0.1 * i as f64 } else { 1.0 + 0.1 * i as f64 }])
            .collect();
        let labels: Vec<u8> = (0..20).map(|i| u8::from(i >= 10)).collect();
        let fit = train(&features, &labels, &TrainConfig::with_l2(0.1)).unwrap();
        let scores: Vec<f64> = features.iter().map(|x| fit.probability(x)).collect();
        assert_eq!(pairwise_auroc(&scores, &labels), 1.0);
    }

    #[test]
    fn growing_l2_shrinks_weights_toward_prior_through_bias() {
        let features: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64) / 10.0]).collect();
        let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 4 == 0)).collect();
        let prior = labels.iter().filter(|&&y| y == 1).count() as f64 / labels.len() as f64;

        let fit_at = |l2: f64| {
            let cfg = TrainConfig {
                l2,
                max_iterations: 30_000,
                ..TrainConfig::default()
            };
            train(&features, &labels, &cfg).unwrap()
        };
        let small = fit_at(1.0);
        let medium = fit_at(100.0);
        let large = fit_at(10_000.0);
        // Weights shrink monotonically with the penalty.
        assert!(medium.weights[0].abs() < small.weights[0].abs());
        assert!(large.weights[0].abs() < medium.weights[0].abs());
        assert!(large.weights[0].abs() < 1e-3, "weight stayed at {}", large.weights[0]);
        // Bias-only optimum is the log-odds of the training prior.
        let expected_bias = (prior / (1.0 - prior)).ln();
        assert!(
            (large.bias - expected_bias).abs() < 1e-3,
            "bias {} vs {expected_bias}",
            large.bias
        );
        for x in &features {
            assert!((large.probability(x) - prior).abs() < 1e-3);
        }
    }

    #[test]
    fn identical_features_give_prior_probability() {
        let features: Vec<Vec<f64>> = (0..32).map(|_| vec![0.7, -0.2]).collect();
        let labels: Vec<u8> = (0..32).map(|i| u8::from(i % 4 == 0)).collect();
        let prior = 0.25;
        let cfg = TrainConfig {
            max_iterations: 20_000,
            ..TrainConfig::default()
        };
        let fit = train(&features, &labels, &cfg).unwrap();
        for x in &features {
            assert!((fit.probability(x) - prior).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let features: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()])
            .collect();
        let labels: Vec<u8> = (0..30).map(|i| u8::from((i * 7) % 3 == 0)).collect();
        let a = train(&features, &labels, &TrainConfig::default()).unwrap();
        let b = train(&features, &labels, &TrainConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_is_rejected() {
        let features = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            train(&features, &[1, 1], &TrainConfig::default()),
            Err(LogisticError::SingleClass)
        ));
    }
}
