use std::ops::Range;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SeriesTable;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A batch of aligned lookback/target windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch<T> {
    /// `[batch, L, C]`
    pub inputs: Tensor<T>,
    /// `[batch, H, C]`, starting right after each input window
    pub targets: Tensor<T>,
    /// first row of each input window
    pub starts: Vec<usize>,
}

/// Number of `(L + H)`-row windows inside `range_len` rows.
pub fn window_count(range_len: usize, lookback: usize, horizon: usize) -> Result<usize> {
    let need = lookback + horizon;
    if lookback == 0 || horizon == 0 {
        return Err(Error::config("lookback and horizon must be positive"));
    }
    if range_len < need {
        return Err(Error::data(format!("range of {range_len} rows cannot hold a window of {need}")));
    }
    Ok(range_len - need + 1)
}

/// All valid window starts in `range`, in order or shuffled by `seed`.
pub fn window_starts(range: Range<usize>, lookback: usize, horizon: usize, seed: Option<u64>) -> Result<Vec<usize>> {
    let n = window_count(range.len(), lookback, horizon)?;
    let mut starts: Vec<usize> = (range.start..range.start + n).collect();
    if let Some(seed) = seed {
        starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(starts)
}

/// Copies the windows starting at `starts` out of `table`.
pub fn make_batch<T: Real>(table: &SeriesTable, starts: &[usize], lookback: usize, horizon: usize) -> WindowBatch<T> {
    let c = table.num_channels();
    let mut inputs = Vec::with_capacity(starts.len() * lookback * c);
    let mut targets = Vec::with_capacity(starts.len() * horizon * c);
    for &s in starts {
        let cut = (s + lookback) * c;
        inputs.extend(table.values[s * c..cut].iter().map(|&v| T::from_f64(v)));
        targets.extend(table.values[cut..cut + horizon * c].iter().map(|&v| T::from_f64(v)));
    }
    let b = starts.len();
    WindowBatch {
        inputs: Tensor::from_parts(vec![b, lookback, c], inputs),
        targets: Tensor::from_parts(vec![b, horizon, c], targets),
        starts: starts.to_vec(),
    }
}

/// One epoch of batches over `range`. The last batch may be short.
pub struct WindowIter<'a, T> {
    table: &'a SeriesTable,
    starts: Vec<usize>,
    pos: usize,
    batch_size: usize,
    lookback: usize,
    horizon: usize,
    _elem: std::marker::PhantomData<T>,
}

pub fn window_iter<T: Real>(
    table: &SeriesTable,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<WindowIter<'_, T>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if range.end > table.len() {
        return Err(Error::data(format!("range ends at {} but the table has {} rows", range.end, table.len())));
    }
    Ok(WindowIter {
        table,
        starts: window_starts(range, lookback, horizon, shuffle_seed)?,
        pos: 0,
        batch_size,
        lookback,
        horizon,
        _elem: std::marker::PhantomData,
    })
}

impl<T> WindowIter<'_, T> {
    pub fn num_windows(&self) -> usize {
        self.starts.len()
    }

    pub fn num_batches(&self) -> usize {
        self.starts.len().div_ceil(self.batch_size)
    }
}

impl<T: Real> Iterator for WindowIter<'_, T> {
    type Item = WindowBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.starts.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.starts.len());
        let batch = make_batch(self.table, &self.starts[self.pos..end], self.lookback, self.horizon);
        self.pos = end;
        Some(batch)
    }
}

/// Builds batches on a background thread, at most `depth` ahead of the consumer.
pub struct Prefetch<T> {
    rx: Option<Receiver<WindowBatch<T>>>,
    worker: Option<JoinHandle<()>>,
}

pub fn prefetch<T: Real + Send + 'static>(
    table: Arc<SeriesTable>,
    starts: Vec<usize>,
    lookback: usize,
    horizon: usize,
    batch_size: usize,
    depth: usize,
) -> Result<Prefetch<T>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let (tx, rx) = sync_channel(depth.max(1));
    let worker = std::thread::spawn(move || {
        for chunk in starts.chunks(batch_size) {
            if tx.send(make_batch(&table, chunk, lookback, horizon)).is_err() {
                break;
            }
        }
    });
    Ok(Prefetch { rx: Some(rx), worker: Some(worker) })
}

impl<T> Iterator for Prefetch<T> {
    type Item = WindowBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl<T> Drop for Prefetch<T> {
    fn drop(&mut self) {
        // closing the receiver unblocks a worker waiting on a full queue
        self.rx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
