use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::metrics::{Metrics, MetricsAccumulator};
use crate::data::{window_starts, SeriesTable};
use crate::error::{Error, Result};

/// Scores `forecast(start) -> [H * C]` (row-major `[H, C]`) over every ordered
/// window of `range`.
pub fn evaluate_predictor(
    table: &SeriesTable,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    mut forecast: impl FnMut(usize) -> Vec<f64>,
) -> Result<Metrics> {
    let c = table.num_channels();
    let mut acc = MetricsAccumulator::new(horizon, c);
    for s in window_starts(range, lookback, horizon, None)? {
        let from = (s + lookback) * c;
        acc.add(&forecast(s), &table.values[from..from + horizon * c])?;
    }
    acc.finish()
}

/// Repeats the last observed value of each channel over the horizon.
pub fn persistence(table: &SeriesTable, start: usize, lookback: usize, horizon: usize) -> Vec<f64> {
    let last = table.row(start + lookback - 1);
    (0..horizon).flat_map(|_| last.iter().copied()).collect()
}

/// One ridge regression per channel from its own lookback window (plus an
/// intercept) to its horizon.
#[derive(Clone, Debug)]
pub struct ChannelRegression {
    lookback: usize,
    horizon: usize,
    /// per channel, `(L + 1) x H`
    weights: Vec<DMatrix<f64>>,
}

impl ChannelRegression {
    pub fn fit(table: &SeriesTable, range: Range<usize>, lookback: usize, horizon: usize, ridge: f64) -> Result<Self> {
        let starts = window_starts(range, lookback, horizon, None)?;
        let n = starts.len();
        let mut weights = Vec::with_capacity(table.num_channels());
        for ch in 0..table.num_channels() {
            let x = DMatrix::from_fn(n, lookback + 1, |i, j| {
                if j == lookback {
                    1.0
                } else {
                    table.value(starts[i] + j, ch)
                }
            });
            let y = DMatrix::from_fn(n, horizon, |i, k| table.value(starts[i] + lookback + k, ch));
            let mut gram = x.transpose() * &x;
            for j in 0..lookback {
                gram[(j, j)] += ridge * n as f64;
            }
            let rhs = x.transpose() * y;
            let chol = gram
                .cholesky()
                .ok_or_else(|| Error::Numeric(format!("regression system for channel {ch} is singular")))?;
            weights.push(chol.solve(&rhs));
        }
        Ok(ChannelRegression { lookback, horizon, weights })
    }

    pub fn predict(&self, table: &SeriesTable, start: usize) -> Vec<f64> {
        let c = self.weights.len();
        let mut out = vec![0.0; self.horizon * c];
        for (ch, w) in self.weights.iter().enumerate() {
            let mut x = DVector::from_fn(self.lookback + 1, |j, _| if j == self.lookback { 1.0 } else { 0.0 });
            for j in 0..self.lookback {
                x[j] = table.value(start + j, ch);
            }
            let y = w.transpose() * x;
            for k in 0..self.horizon {
                out[k * c + ch] = y[k];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sine_series;

    #[test]
    fn persistence_is_exact_on_whole_periods() {
        let t = sine_series(400, 24.0, 2).unwrap();
        let m = evaluate_predictor(&t, 0..400, 48, 24, |s| {
            // seasonal persistence: repeat the last period
            (0..24).flat_map(|k| t.row(s + 48 - 24 + k).to_vec()).collect()
        })
        .unwrap();
        assert!(m.mse < 1e-20);
        let m = evaluate_predictor(&t, 0..400, 48, 24, |s| persistence(&t, s, 48, 24)).unwrap();
        assert!(m.mse > 0.1);
    }

    #[test]
    fn persistence_on_constant_series_is_exact() {
        let t = SeriesTable::new((0..50).map(|i| i.to_string()).collect(), vec!["a".into()], vec![2.5; 50]).unwrap();
        let m = evaluate_predictor(&t, 0..50, 10, 5, |s| persistence(&t, s, 10, 5)).unwrap();
        assert_eq!(m.mse, 0.0);
    }

    #[test]
    fn regression_extrapolates_sinusoids() {
        let t = sine_series(600, 17.0, 2).unwrap();
        let reg = ChannelRegression::fit(&t, 0..400, 24, 8, 1e-8).unwrap();
        let m = evaluate_predictor(&t, 400..600, 24, 8, |s| reg.predict(&t, s)).unwrap();
        assert!(m.mse < 1e-8, "{}", m.mse);
    }
}
