//! Monotone (non-decreasing) calibration maps via pool-adjacent-violators.
//!
//! One implementation serves every monotone map in the crate: outcome
//! readouts, calibrated score baselines, and the temporal-summary collapse.
//! Strictly increasing maps preserve AUROC, so swapping a raw summary for its
//! calibrated version is a pure probability-quality intervention.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IsotonicError {
    #[error("cannot fit an isotonic map on an empty point set")]
    Empty,
    #[error("non-finite input at point {0}")]
    NonFinite(usize),
}

/// Fitted monotone non-decreasing map.
///
/// Knots are the distinct fitted inputs with their pooled values; evaluation
/// interpolates linearly between knots and clamps outside the fitted range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    knots_x: Vec<f64>,
    knots_y: Vec<f64>,
}

impl IsotonicMap {
    /// Weighted pool-adjacent-violators fit of `y` as a non-decreasing
    /// function of `x`. Ties in `x` are pooled into one weighted point first.
    pub fn fit_weighted(points: &[(f64, f64, f64)]) -> Result<Self, IsotonicError> {
        if points.is_empty() {
            return Err(IsotonicError::Empty);
        }
        for (i, &(x, y, w)) in points.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() || !w.is_finite() || w <= 0.0 {
                return Err(IsotonicError::NonFinite(i));
            }
        }
        let mut sorted: Vec<(f64, f64, f64)> = points.to_vec();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite inputs"));

        // Pool identical x values.
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        let mut ws: Vec<f64> = Vec::new();
        for (x, y, w) in sorted {
            if let Some(last_x) = xs.last() {
                if *last_x == x {
                    let i = xs.len() - 1;
                    let total = ws[i] + w;
                    ys[i] = (ys[i] * ws[i] + y * w) / total;
                    ws[i] = total;
                    continue;
                }
            }
            xs.push(x);
            ys.push(y);
            ws.push(w);
        }

        // PAV: merge adjacent blocks while the fitted values decrease.
        // blocks: (end index into xs, pooled value, pooled weight)
        let mut blocks: Vec<(usize, f64, f64)> = Vec::with_capacity(xs.len());
        for i in 0..xs.len() {
            blocks.push((i, ys[i], ws[i]));
            while blocks.len() >= 2 {
                let (_, v2, w2) = blocks[blocks.len() - 1];
                let (_, v1, w1) = blocks[blocks.len() - 2];
                if v1 <= v2 {
                    break;
                }
                let merged = (v1 * w1 + v2 * w2) / (w1 + w2);
                let (end, _, _) = blocks.pop().unwrap();
                let last = blocks.last_mut().unwrap();
                last.0 = end;
                last.1 = merged;
                last.2 = w1 + w2;
            }
        }

        let mut knots_x = Vec::with_capacity(xs.len());
        let mut knots_y = Vec::with_capacity(xs.len());
        let mut start = 0;
        for &(end, value, _) in &blocks {
            for x in &xs[start..=end] {
                knots_x.push(*x);
                knots_y.push(value);
            }
            start = end + 1;
        }
        Ok(IsotonicMap { knots_x, knots_y })
    }

    /// Unit-weight fit.
    pub fn fit(points: &[(f64, f64)]) -> Result<Self, IsotonicError> {
        let weighted: Vec<(f64, f64, f64)> = points.iter().map(|&(x, y)| (x, y, 1.0)).collect();
        Self::fit_weighted(&weighted)
    }

    /// Evaluate the map: clamped outside the fitted range, linear between
    /// knots.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.knots_x.len();
        if x <= self.knots_x[0] {
            return self.knots_y[0];
        }
        if x >= self.knots_x[n - 1] {
            return self.knots_y[n - 1];
        }
        // First knot strictly greater than x; the one before is <= x.
        let hi = self.knots_x.partition_point(|&k| k <= x);
        let lo = hi - 1;
        let (x0, x1) = (self.knots_x[lo], self.knots_x[hi]);
        let (y0, y1) = (self.knots_y[lo], self.knots_y[hi]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    /// Fitted knot positions and values.
    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.knots_x.iter().copied().zip(self.knots_y.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force PAV oracle: pooled means found by scanning until no
    /// adjacent violation remains.
    fn pav_oracle(mut values: Vec<f64>, mut weights: Vec<f64>) -> Vec<f64> {
        let mut sizes: Vec<usize> = vec![1; values.len()];
        loop {
            let mut merged = false;
            for i in 0..values.len().saturating_sub(1) {
                if values[i] > values[i + 1] {
                    let w = weights[i] + weights[i + 1];
                    let v = (values[i] * weights[i] + values[i + 1] * weights[i + 1]) / w;
                    values[i] = v;
                    weights[i] = w;
                    sizes[i] += sizes[i + 1];
                    values.remove(i + 1);
                    weights.remove(i + 1);
                    sizes.remove(i + 1);
                    merged = true;
                    break;
                }
            }
            if !merged {
                break;
            }
        }
        let mut out = Vec::new();
        for (v, s) in values.iter().zip(sizes.iter()) {
            for _ in 0..*s {
                out.push(*v);
            }
        }
        out
    }

    #[test]
    fn monotone_input_interpolates_exactly_at_knots() {
        let pts = [(0.1, 0.0), (0.2, 0.25), (0.4, 0.5), (0.7, 0.75), (0.9, 1.0)];
        let map = IsotonicMap::fit(&pts).unwrap();
        for &(x, y) in &pts {
            assert!((map.eval(x) - y).abs() < 1e-12, "knot {x} -> {}", map.eval(x));
        }
        // Interpolation between knots.
        let mid = map.eval(0.3);
        assert!((mid - 0.375).abs() < 1e-12);
    }

    #[test]
    fn violators_are_pooled_to_oracle_values() {
        let ys = vec![0.2, 0.6, 0.4, 0.8, 0.3, 0.9];
        let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect();
        let map = IsotonicMap::fit(&pts).unwrap();
        let expect = pav_oracle(ys, vec![1.0; 6]);
        for (i, e) in expect.iter().enumerate() {
            assert!((map.eval(i as f64) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_monotone_and_clamped() {
        let pts = [(0.0, 1.0), (1.0, 0.0), (2.0, 0.5), (3.0, 0.2)];
        let map = IsotonicMap::fit(&pts).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=60 {
            let x = -1.0 + 5.0 * (i as f64) / 60.0;
            let y = map.eval(x);
            assert!(y >= prev - 1e-12);
            prev = y;
        }
        assert_eq!(map.eval(-100.0), map.eval(0.0));
        assert_eq!(map.eval(100.0), map.eval(3.0));
    }

    #[test]
    fn duplicate_x_pooled_first() {
        let pts = [(1.0, 0.0), (1.0, 1.0), (2.0, 0.25)];
        let map = IsotonicMap::fit(&pts).unwrap();
        // x=1 pools to 0.5, then violates against 0.25: merged to (0.5+0.5+0.25)/3.
        let expect = (0.5 + 0.5 + 0.25) / 3.0;
        assert!((map.eval(1.0) - expect).abs() < 1e-12);
        assert!((map.eval(2.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(IsotonicMap::fit(&[]), Err(IsotonicError::Empty)));
    }
}
