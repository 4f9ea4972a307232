//! Dataset ingestion, chronological splits and sliding windows.

mod split;
mod synth;
mod table;
mod window;

use std::io::Write;

use serde::Serialize;

pub use split::{split, split_sizes, SplitScheme, SplitSizes, Splits};
pub use synth::{sine_series, synthetic_series, SynthConfig};
pub use table::{load_csv, SeriesTable};
pub use window::{make_batch, prefetch, window_count, window_iter, window_starts, Prefetch, WindowBatch, WindowIter};

use crate::error::Result;

/// One forecast value in the prediction export.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionRow {
    pub window_start: usize,
    /// 1-based step into the horizon
    pub horizon_step: usize,
    pub channel: String,
    pub y_true: f64,
    pub y_pred: f64,
}

pub fn write_predictions(writer: impl Write, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_csv_layout() {
        let rows = [
            PredictionRow { window_start: 3, horizon_step: 1, channel: "OT".into(), y_true: 1.5, y_pred: 1.25 },
            PredictionRow { window_start: 3, horizon_step: 2, channel: "OT".into(), y_true: -2.0, y_pred: 0.0 },
        ];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "window_start,horizon_step,channel,y_true,y_pred\n3,1,OT,1.5,1.25\n3,2,OT,-2.0,0.0\n"
        );
    }
}
