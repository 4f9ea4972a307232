//! Optimization, evaluation, baselines and persistence of trained models.

mod baselines;
mod checkpoint;
mod metrics;
mod optim;
mod trainer;

use std::io::Write;
use std::sync::Arc;

pub use baselines::{evaluate_predictor, persistence, ChannelRegression};
pub use checkpoint::{Checkpoint, Manifest, TensorEntry, FORMAT_VERSION};
pub use metrics::{mae_loss, Metrics, MetricsAccumulator};
pub use optim::{clip_grad_norm, lr_at, Adam, ADAM_EPS, BETA1, BETA2, DECAY_AFTER, LR_DECAY};
pub use trainer::{evaluate, forecast_windows, predict, prediction_rows, EpochRecord, FitReport, TrainOptions, Trainer};

use crate::config::RunConfig;
use crate::data::{split, SeriesTable, Splits};
use crate::error::Result;
use crate::model::PrFormer;
use crate::tensor::Real;

/// Result of [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainedRun<T> {
    pub checkpoint: Checkpoint<T>,
    pub model: PrFormer,
    pub splits: Splits,
    pub history: Vec<EpochRecord>,
    pub val: Metrics,
    pub test: Metrics,
    pub stopped_early: bool,
    /// configuration notes that did not stop the run
    pub warnings: Vec<String>,
}

/// Validates `run`, splits `table`, trains, and scores the best epoch on the
/// test split.
pub fn run_training<T: Real + Send + 'static>(
    run: &RunConfig,
    table: Arc<SeriesTable>,
    opts: Option<TrainOptions>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedRun<T>> {
    let warnings = run.validate()?;
    let seed = run.resolved_seed()?;
    let splits = split(table.len(), run.split_scheme(), run.lookback, run.pred_len, run.strict_split)?;
    let (params, model) = PrFormer::from_run::<T>(run, table.num_channels(), seed)?;
    let opts = opts.unwrap_or_else(|| TrainOptions::from_run(run, seed));
    let batch_size = opts.batch_size;
    let mut trainer = Trainer::new(model, params, opts);
    let report = trainer.fit(&table, &splits, on_epoch)?;
    let model = trainer.model;
    let val = evaluate(&model, &report.best_params, &table, splits.val.clone(), batch_size)?;
    let test = evaluate(&model, &report.best_params, &table, splits.test.clone(), batch_size)?;
    let checkpoint = Checkpoint {
        run_config: RunConfig { seed: Some(seed), ..run.clone() },
        channels: table.channels.clone(),
        seed,
        best_epoch: Some(report.best_epoch),
        best_val_mae: Some(report.best_val_mae),
        params: report.best_params,
    };
    Ok(TrainedRun { checkpoint, model, splits, history: report.history, val, test, stopped_early: report.stopped_early, warnings })
}

/// Per-epoch CSV: `epoch,lr,train_mae,val_mae,val_mse,seconds`.
pub fn write_history(writer: impl Write, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::Variant;
    use crate::data::{make_batch, sine_series, synthetic_series, SynthConfig};
    use crate::tensor::Tensor;

    fn tiny_run() -> RunConfig {
        RunConfig {
            lookback: 24,
            pred_len: 6,
            pyramidal_windows: vec![2, 4],
            e_layers: 1,
            d_model: 8,
            heads: 2,
            conv_channels: 3,
            dropout: 0.1,
            batch_size: 16,
            lr: 3e-3,
            epochs: 3,
            seed: Some(5),
            ..RunConfig::default()
        }
    }

    fn tiny_table() -> Arc<SeriesTable> {
        Arc::new(synthetic_series(&SynthConfig { rows: 300, ..Default::default() }).unwrap())
    }

    #[test]
    fn training_is_deterministic() {
        let run = tiny_run();
        let a = run_training::<f32>(&run, tiny_table(), None, |_| {}).unwrap();
        let b = run_training::<f32>(&run, tiny_table(), None, |_| {}).unwrap();
        assert_eq!(a.history[0].train_mae.to_bits(), b.history[0].train_mae.to_bits());
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        let c = run_training::<f32>(&RunConfig { seed: Some(6), ..run }, tiny_table(), None, |_| {}).unwrap();
        assert_ne!(a.history[0].train_mae, c.history[0].train_mae);
    }

    #[test]
    fn history_records_schedule_and_best_epoch() {
        let run = RunConfig { epochs: 5, ..tiny_run() };
        let mut seen = Vec::new();
        let out = run_training::<f32>(&run, tiny_table(), None, |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, [1, 2, 3, 4, 5]);
        let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, (1..=5).map(|e| lr_at(3e-3, e)).collect::<Vec<_>>());
        let best = out.history.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(out.checkpoint.best_val_mae, Some(best));
        // the returned parameters reproduce the recorded best validation score
        assert!((out.val.mae - best).abs() < 1e-6 * best.max(1.0));

        let mut buf = Vec::new();
        write_history(&mut buf, &out.history).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,lr,train_mae,val_mae,val_mse,seconds\n1,0.003,"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        // a frozen model never improves after its first evaluation
        let run = RunConfig { epochs: 30, patience: 2, ..tiny_run() };
        let opts = TrainOptions { lr: 0.0, ..TrainOptions::from_run(&run, 5) };
        let out = run_training::<f64>(&run, tiny_table(), Some(opts), |_| {}).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.checkpoint.best_epoch, Some(1));
        assert_eq!(out.history.len(), 3);
        for r in &out.history {
            assert!(r.val_mae >= out.checkpoint.best_val_mae.unwrap());
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let table = sine_series(120, 12.0, 2).unwrap();
        let run = RunConfig { dropout: 0.0, ..tiny_run() };
        let (params, model) = PrFormer::from_run::<f64>(&run, 2, 0).unwrap();
        let mut trainer = Trainer::new(model, params, TrainOptions::from_run(&run, 0));
        let batch = make_batch::<f64>(&table, &[0, 7, 13, 40], 24, 6);
        let first = trainer.step(&batch, 3e-3).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = trainer.step(&batch, 3e-3).unwrap();
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert_eq!(trainer.steps(), 61);
    }

    #[test]
    fn prediction_rows_cover_every_window_step_and_channel() {
        let table = synthetic_series(&SynthConfig { rows: 120, ..Default::default() }).unwrap();
        let run = tiny_run();
        let (params, model) = PrFormer::from_run::<f64>(&run, 3, 0).unwrap();
        let rows = prediction_rows(&model, &params, &table, 60..120, 7).unwrap();
        let windows = 60 - 24 - 6 + 1;
        assert_eq!(rows.len(), windows * 6 * 3);
        assert_eq!((rows[0].window_start, rows[0].horizon_step, rows[0].channel.as_str()), (60, 1, "driver"));
        assert_eq!(rows[0].y_true, table.value(60 + 24, 0));
        let last = rows.last().unwrap();
        assert_eq!((last.window_start, last.horizon_step, last.channel.as_str()), (90, 6, "lag2"));
        let m = evaluate(&model, &params, &table, 60..120, 7).unwrap();
        let mse = rows.iter().map(|r| (r.y_pred - r.y_true).powi(2)).sum::<f64>() / rows.len() as f64;
        assert!((mse - m.mse).abs() < 1e-9 * m.mse);
    }

    #[test]
    fn divergence_is_reported() {
        let table = sine_series(120, 12.0, 2).unwrap();
        let run = tiny_run();
        let (mut params, model) = PrFormer::from_run::<f64>(&run, 2, 0).unwrap();
        let id = params.find("head.bias").unwrap();
        params.get_mut(id).data_mut()[0] = f64::NAN;
        let mut trainer = Trainer::new(model, params, TrainOptions::from_run(&run, 0));
        let batch = make_batch::<f64>(&table, &[0], 24, 6);
        assert!(matches!(trainer.step(&batch, 1e-3), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn forecasts_are_equivariant_to_channel_affine_rescaling() {
        let run = RunConfig { dropout: 0.0, ..tiny_run() };
        for variant in Variant::ALL {
            let run = RunConfig { variant, ..run.clone() };
            let (params, model) = PrFormer::from_run::<f64>(&run, 3, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let x: Vec<f64> = (0..4 * 24 * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..4 * 6 * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (a, b) = ([0.5, 3.0, 40.0], [1.0, -20.0, 300.0]);
            let scale = |v: &[f64]| v.iter().enumerate().map(|(i, &x)| a[i % 3] * x + b[i % 3]).collect::<Vec<_>>();

            let pred = predict(&model, &params, &Tensor::new([4, 24, 3], x.clone()).unwrap()).unwrap();
            let pred_s = predict(&model, &params, &Tensor::new([4, 24, 3], scale(&x)).unwrap()).unwrap();
            let unscaled: Vec<f64> =
                pred_s.data().iter().enumerate().map(|(i, &p)| (p - b[i % 3]) / a[i % 3]).collect();
            let worst = unscaled.iter().zip(pred.data()).map(|(u, p)| (u - p).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-5, "{variant}: {worst}");

            let mae = |p: &[f64], t: &[f64]| p.iter().zip(t).map(|(p, t)| (p - t).abs()).sum::<f64>() / p.len() as f64;
            assert!((mae(&unscaled, &y) - mae(pred.data(), &y)).abs() < 1e-5);
        }
    }
}
