use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Mean absolute error over every element; the training objective.
pub fn mae_loss<T: Real>(tape: &mut Tape<T>, target: Var, pred: Var) -> Result<Var> {
    if tape.shape(target) != tape.shape(pred) {
        return Err(Error::shape("mae_loss", tape.shape(target), tape.shape(pred)));
    }
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean_all(abs))
}

/// Forecast accuracy over a set of windows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// MSE per horizon step
    pub mse_per_step: Vec<f64>,
    pub count: usize,
}

/// Running sums for [`Metrics`] over `[.., H, C]` forecasts.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    horizon: usize,
    channels: usize,
    abs: f64,
    sq: f64,
    sq_step: Vec<f64>,
    count: usize,
}

impl MetricsAccumulator {
    pub fn new(horizon: usize, channels: usize) -> Self {
        MetricsAccumulator { horizon, channels, abs: 0.0, sq: 0.0, sq_step: vec![0.0; horizon], count: 0 }
    }

    /// Adds row-major `[n, H, C]` predictions and targets.
    pub fn add<T: Real>(&mut self, pred: &[T], target: &[T]) -> Result<()> {
        let block = self.horizon * self.channels;
        if pred.len() != target.len() || !pred.len().is_multiple_of(block) {
            return Err(Error::shape("metrics", &[pred.len()], &[target.len(), block]));
        }
        for (i, (p, y)) in pred.iter().zip(target).enumerate() {
            let d = p.to_f64() - y.to_f64();
            self.abs += d.abs();
            self.sq += d * d;
            self.sq_step[(i % block) / self.channels] += d * d;
        }
        self.count += pred.len();
        Ok(())
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::data("no forecasts to score"));
        }
        let n = self.count as f64;
        let per_step = n / self.horizon as f64;
        Ok(Metrics {
            mse: self.sq / n,
            mae: self.abs / n,
            mse_per_step: self.sq_step.iter().map(|s| s / per_step).collect(),
            count: self.count,
        })
    }
}
