//! Export of per-variable tokens for external clustering.

use std::io::Write;
use std::ops::Range;

use crate::data::{make_batch, window_starts, SeriesTable};
use crate::error::{Error, Result};
use crate::model::PrFormer;
use crate::params::ParamStore;
use crate::tensor::{Real, Tape};

/// The embedding of one variable in one lookback window.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub window_start: usize,
    pub variable: usize,
    pub values: Vec<f64>,
}

/// Embeddings (before the encoder) of up to `limit` windows of `range`,
/// spread evenly over the range.
pub fn collect_embeddings<T: Real>(
    model: &PrFormer,
    params: &ParamStore<T>,
    table: &SeriesTable,
    range: Range<usize>,
    limit: usize,
) -> Result<Vec<EmbeddingRow>> {
    if table.num_channels() != model.spec.channels {
        return Err(Error::data(format!(
            "model expects {} channels, data has {}",
            model.spec.channels,
            table.num_channels()
        )));
    }
    let (l, h, d) = (model.spec.lookback, model.spec.horizon, model.spec.d_model);
    let all = window_starts(range, l, h, None)?;
    let starts: Vec<usize> = if all.len() <= limit {
        all
    } else {
        (0..limit).map(|i| all[i * all.len() / limit]).collect()
    };
    let mut rows = Vec::with_capacity(starts.len() * table.num_channels());
    for chunk in starts.chunks(32) {
        let batch = make_batch::<T>(table, chunk, l, h);
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let x = tape.constant(batch.inputs);
        let tokens = model.tokens(&mut tape, &p, x)?;
        let values = tape.value(tokens).to_f64_vec();
        for (b, &start) in chunk.iter().enumerate() {
            for v in 0..model.spec.channels {
                let at = (b * model.spec.channels + v) * d;
                rows.push(EmbeddingRow { window_start: start, variable: v, values: values[at..at + d].to_vec() });
            }
        }
    }
    Ok(rows)
}

/// CSV with header `run_id,window_start,variable,e0,...,e{D-1}`.
pub fn write_embeddings(writer: impl Write, run_id: &str, rows: &[EmbeddingRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut header = vec!["run_id".to_string(), "window_start".into(), "variable".into()];
    header.extend((0..d).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![run_id.to_string(), r.window_start.to_string(), r.variable.to_string()];
        rec.extend(r.values.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn setup() -> (ParamStore<f64>, PrFormer, SeriesTable) {
        let run = RunConfig {
            lookback: 16,
            pred_len: 4,
            pyramidal_windows: vec![2, 4],
            d_model: 6,
            heads: 2,
            e_layers: 1,
            conv_channels: 3,
            ..RunConfig::default()
        };
        let (params, model) = PrFormer::from_run::<f64>(&run, 2, 1).unwrap();
        // two identical channels
        let values = (0..80).flat_map(|t| [(t as f64 * 0.3).sin(); 2]).collect();
        let table = SeriesTable::new((0..80).map(|t| t.to_string()).collect(), vec!["a".into(), "b".into()], values).unwrap();
        (params, model, table)
    }

    #[test]
    fn rows_per_window_and_variable() {
        let (params, model, table) = setup();
        let rows = collect_embeddings(&model, &params, &table, 0..80, 5).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[0].window_start, 0);
        assert!(rows.iter().all(|r| r.values.len() == 6));
        // identical series share weights, so their tokens match
        for pair in rows.chunks(2) {
            assert_eq!(pair[0].values, pair[1].values);
            assert_eq!((pair[0].variable, pair[1].variable), (0, 1));
        }
        let every = collect_embeddings(&model, &params, &table, 0..80, 1000).unwrap();
        assert_eq!(every.len(), 2 * 61);
    }

    #[test]
    fn csv_header_and_width() {
        let (params, model, table) = setup();
        let rows = collect_embeddings(&model, &params, &table, 0..80, 2).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, "run7", &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "run_id,window_start,variable,e0,e1,e2,e3,e4,e5");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 9);
        assert_eq!(&first[..3], ["run7", "0", "0"]);
        let back: f64 = first[3].parse().unwrap();
        assert_eq!(back, rows[0].values[0]);
    }

    #[test]
    fn channel_mismatch_is_a_data_error() {
        let (params, model, _) = setup();
        let one = SeriesTable::new((0..40).map(|t| t.to_string()).collect(), vec!["a".into()], vec![0.5; 40]).unwrap();
        assert!(matches!(collect_embeddings(&model, &params, &one, 0..40, 3), Err(Error::Data(_))));
    }
}
