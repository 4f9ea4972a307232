use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use super::metrics::{mae_loss, Metrics, MetricsAccumulator};
use super::optim::{clip_grad_norm, lr_at, Adam};
use crate::config::{LossScale, RunConfig};
use crate::data::{make_batch, prefetch, window_starts, PredictionRow, SeriesTable, Splits, WindowBatch};
use crate::error::{Error, Result};
use crate::model::PrFormer;
use crate::params::ParamStore;
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss_scale: LossScale,
    pub clip_grad: Option<f64>,
    pub seed: u64,
    /// cap on optimizer steps per epoch (the shuffled epoch is truncated)
    pub max_batches_per_epoch: Option<usize>,
    /// build batches on a background thread
    pub prefetch: bool,
}

impl TrainOptions {
    pub fn from_run(run: &RunConfig, seed: u64) -> Self {
        TrainOptions {
            epochs: run.epochs,
            patience: run.patience,
            lr: run.lr,
            batch_size: run.batch_size,
            loss_scale: run.loss_scale,
            clip_grad: run.clip_grad,
            seed,
            max_batches_per_epoch: None,
            prefetch: false,
        }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_mae: f64,
    pub val_mae: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport<T> {
    /// parameters from the epoch with the lowest validation MAE
    pub best_params: ParamStore<T>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Owns a model's parameters and optimizer state during training.
pub struct Trainer<T> {
    pub model: PrFormer,
    pub params: ParamStore<T>,
    pub opts: TrainOptions,
    adam: Adam<T>,
    steps: u64,
}

impl<T: Real + Send + 'static> Trainer<T> {
    pub fn new(model: PrFormer, params: ParamStore<T>, opts: TrainOptions) -> Self {
        let adam = Adam::new(params.values());
        Trainer { model, params, opts, adam, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One forward/backward/update on `batch`; returns the batch loss.
    pub fn step(&mut self, batch: &WindowBatch<T>, lr: f64) -> Result<f64> {
        let dropout_seed = self.opts.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.steps);
        let mut tape = Tape::training(dropout_seed);
        let p = self.params.bind(&mut tape);
        let x = tape.constant(batch.inputs.clone());
        let y = tape.constant(batch.targets.clone());
        let f = self.model.forward(&mut tape, &p, x)?;
        let loss = match self.opts.loss_scale {
            LossScale::Raw => mae_loss(&mut tape, y, f.output)?,
            LossScale::Normalized => {
                let yn = self.model.normalize_targets(&mut tape, &p, &f.state, y)?;
                mae_loss(&mut tape, yn, f.normalized)?
            }
        };
        let value = tape.value(loss).item().to_f64();
        if !value.is_finite() {
            let largest = self
                .params
                .iter()
                .map(|(n, t)| (n, t.data().iter().map(|x| x.to_f64().abs()).fold(0.0, f64::max)))
                .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
            return Err(Error::Numeric(format!(
                "loss became {value} at step {}; largest parameter magnitude {:.3e} in `{}`",
                self.steps + 1,
                largest.1,
                largest.0
            )));
        }
        tape.backward(loss)?;
        let mut grads = self.params.grads(&tape, &p);
        drop(tape);
        if let Some(max) = self.opts.clip_grad {
            clip_grad_norm(&mut grads, max);
        }
        self.adam.step(self.params.values_mut(), &grads, lr)?;
        self.model.constrain(&mut self.params);
        self.steps += 1;
        Ok(value)
    }

    /// Runs epochs with decay and early stopping on validation MAE.
    pub fn fit(
        &mut self,
        table: &Arc<SeriesTable>,
        splits: &Splits,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<FitReport<T>> {
        let (l, h) = (self.model.spec.lookback, self.model.spec.horizon);
        let mut best: Option<(f64, usize, ParamStore<T>)> = None;
        let mut history = Vec::new();
        let mut waited = 0;
        let mut stopped_early = false;
        for epoch in 1..=self.opts.epochs {
            let started = Instant::now();
            let lr = lr_at(self.opts.lr, epoch);
            let mut starts = window_starts(splits.train.clone(), l, h, Some(self.opts.seed.wrapping_add(epoch as u64)))?;
            if let Some(cap) = self.opts.max_batches_per_epoch {
                starts.truncate(cap * self.opts.batch_size);
            }
            let mut total = 0.0;
            let mut count = 0usize;
            let mut run = |trainer: &mut Self, batch: WindowBatch<T>| -> Result<()> {
                let n = batch.starts.len();
                let loss = trainer.step(&batch, lr).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
                total += loss * n as f64;
                count += n;
                Ok(())
            };
            if self.opts.prefetch {
                for batch in prefetch::<T>(table.clone(), starts, l, h, self.opts.batch_size, 2)? {
                    run(self, batch)?;
                }
            } else {
                for chunk in starts.chunks(self.opts.batch_size) {
                    run(self, make_batch(table, chunk, l, h))?;
                }
            }
            let val = self.evaluate(table, splits.val.clone())?;
            let record = EpochRecord {
                epoch,
                lr,
                train_mae: total / count.max(1) as f64,
                val_mae: val.mae,
                val_mse: val.mse,
                seconds: started.elapsed().as_secs_f64(),
            };
            on_epoch(&record);
            history.push(record);
            if best.as_ref().is_none_or(|b| val.mae < b.0) {
                best = Some((val.mae, epoch, self.params.clone()));
                waited = 0;
            } else {
                waited += 1;
                if waited >= self.opts.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        let (best_val_mae, best_epoch, best_params) =
            best.ok_or_else(|| Error::config("training ran for zero epochs"))?;
        Ok(FitReport { best_params, best_epoch, best_val_mae, history, stopped_early })
    }

    /// Forecasts `[B, H, C]` for raw inputs `[B, L, C]`, inference mode.
    pub fn predict(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        predict(&self.model, &self.params, inputs)
    }

    pub fn evaluate(&self, table: &SeriesTable, range: Range<usize>) -> Result<Metrics> {
        evaluate(&self.model, &self.params, table, range, self.opts.batch_size)
    }
}

pub fn predict<T: Real>(model: &PrFormer, params: &ParamStore<T>, inputs: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let x = tape.constant(inputs.clone());
    let f = model.forward(&mut tape, &p, x)?;
    Ok(tape.value(f.output).clone())
}

/// Calls `visit(batch, forecast)` for ordered windows of `range`.
pub fn forecast_windows<T: Real>(
    model: &PrFormer,
    params: &ParamStore<T>,
    table: &SeriesTable,
    range: Range<usize>,
    batch_size: usize,
    mut visit: impl FnMut(&WindowBatch<T>, &Tensor<T>) -> Result<()>,
) -> Result<()> {
    if table.num_channels() != model.spec.channels {
        return Err(Error::data(format!(
            "model expects {} channels, data has {}",
            model.spec.channels,
            table.num_channels()
        )));
    }
    let (l, h) = (model.spec.lookback, model.spec.horizon);
    let starts = window_starts(range, l, h, None)?;
    for chunk in starts.chunks(batch_size.max(1)) {
        let batch = make_batch::<T>(table, chunk, l, h);
        let pred = predict(model, params, &batch.inputs)?;
        visit(&batch, &pred)?;
    }
    Ok(())
}

/// Every forecast value over the ordered windows of `range`, for export.
pub fn prediction_rows<T: Real>(
    model: &PrFormer,
    params: &ParamStore<T>,
    table: &SeriesTable,
    range: Range<usize>,
    batch_size: usize,
) -> Result<Vec<PredictionRow>> {
    let (h, c) = (model.spec.horizon, model.spec.channels);
    let mut rows = Vec::new();
    forecast_windows(model, params, table, range, batch_size, |batch, pred| {
        let (y, p) = (batch.targets.data(), pred.data());
        for (b, &start) in batch.starts.iter().enumerate() {
            for k in 0..h {
                for ch in 0..c {
                    let i = (b * h + k) * c + ch;
                    rows.push(PredictionRow {
                        window_start: start,
                        horizon_step: k + 1,
                        channel: table.channels[ch].clone(),
                        y_true: y[i].to_f64(),
                        y_pred: p[i].to_f64(),
                    });
                }
            }
        }
        Ok(())
    })?;
    Ok(rows)
}

/// MSE and MAE of denormalized forecasts over every ordered window of `range`.
pub fn evaluate<T: Real>(
    model: &PrFormer,
    params: &ParamStore<T>,
    table: &SeriesTable,
    range: Range<usize>,
    batch_size: usize,
) -> Result<Metrics> {
    let mut acc = MetricsAccumulator::new(model.spec.horizon, model.spec.channels);
    forecast_windows(model, params, table, range, batch_size, |batch, pred| {
        if !pred.all_finite() {
            return Err(Error::Numeric("model produced non-finite forecasts".into()));
        }
        acc.add(pred.data(), batch.targets.data())
    })?;
    acc.finish()
}
