//! Wall-clock scaling of the embedding, encoder and full model.
//!
//! Every measurement runs on one thread (the numeric kernels are
//! single-threaded), uses a monotonic clock, discards warm-up runs and reports
//! the median of the timed repetitions.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, Variant};
use crate::encoder::{Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::model::PrFormer;
use crate::params::ParamStore;
use crate::tensor::{Real, Tape, Tensor};

/// What a benchmark row times.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchTarget {
    /// the pyramidal embedding of every channel series
    Pre,
    /// the encoder stack on random tokens
    Encoder,
    /// RevIN, embedding, encoder, head
    Forward,
    /// forward plus backward of an MAE loss
    Train,
}

impl fmt::Display for BenchTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchTarget::Pre => "pre",
            BenchTarget::Encoder => "encoder",
            BenchTarget::Forward => "forward",
            BenchTarget::Train => "train",
        })
    }
}

impl FromStr for BenchTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(BenchTarget::Pre),
            "encoder" => Ok(BenchTarget::Encoder),
            "forward" => Ok(BenchTarget::Forward),
            "train" => Ok(BenchTarget::Train),
            _ => Err(Error::config(format!("unknown bench target `{s}` (pre, encoder, forward, train)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub target: BenchTarget,
    pub channels: usize,
    pub batch_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { target: BenchTarget::Pre, channels: 7, batch_size: 8, repetitions: 5, warmup: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub target: BenchTarget,
    pub lookback: usize,
    pub d_model: usize,
    pub repetitions: usize,
    pub median_seconds: f64,
    pub mean_seconds: f64,
    pub min_seconds: f64,
    /// tape estimate of floating-point work in one repetition
    pub flops: u64,
    /// share of the timed span spent waiting for a CPU, where the kernel
    /// reports it
    pub wait_share: Option<f64>,
    /// median over the previous row's median
    pub ratio: Option<f64>,
}

impl BenchRow {
    /// Whether another process competed for the CPU during the timed runs.
    pub fn contended(&self) -> bool {
        self.wait_share.is_some_and(|w| w > MAX_WAIT_SHARE)
    }
}

/// Run-queue wait above this share of the timed span marks a row as
/// measured under load.
pub const MAX_WAIT_SHARE: f64 = 0.05;

/// `(running, waiting)` nanoseconds of the calling thread.
fn sched_times() -> Option<(u64, u64)> {
    let text = std::fs::read_to_string("/proc/thread-self/schedstat").ok()?;
    let mut it = text.split_whitespace().map(|f| f.parse::<u64>().ok());
    Some((it.next()??, it.next()??))
}

fn random_tensor<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect())
        .expect("shape and data agree")
}

struct Measured {
    times: Vec<f64>,
    flops: u64,
    wait_share: Option<f64>,
}

fn measure(opts: &BenchOptions, mut once: impl FnMut() -> Result<u64>) -> Result<Measured> {
    if opts.repetitions == 0 {
        return Err(Error::config("bench needs at least one repetition"));
    }
    for _ in 0..opts.warmup {
        once()?;
    }
    let mut times = Vec::with_capacity(opts.repetitions);
    let mut flops = 0;
    let before = sched_times();
    for _ in 0..opts.repetitions {
        let t = Instant::now();
        flops = once()?;
        times.push(t.elapsed().as_secs_f64());
    }
    let wait_share = match (before, sched_times()) {
        (Some((r0, w0)), Some((r1, w1))) if r1 + w1 > r0 + w0 => {
            Some((w1 - w0) as f64 / ((r1 - r0) + (w1 - w0)) as f64)
        }
        _ => None,
    };
    Ok(Measured { times, flops, wait_share })
}

fn row(target: BenchTarget, lookback: usize, d_model: usize, m: Measured) -> BenchRow {
    let Measured { mut times, flops, wait_share } = m;
    let n = times.len();
    times.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) };
    BenchRow {
        target,
        lookback,
        d_model,
        repetitions: n,
        median_seconds: median,
        mean_seconds: times.iter().sum::<f64>() / n as f64,
        min_seconds: times[0],
        flops,
        wait_share,
        ratio: None,
    }
}

fn chain_ratios(rows: &mut [BenchRow]) {
    for i in 1..rows.len() {
        rows[i].ratio = Some(rows[i].median_seconds / rows[i - 1].median_seconds);
    }
}

/// Times one model configuration at lookback `run.lookback`.
pub fn time_model<T: Real>(run: &RunConfig, opts: &BenchOptions) -> Result<BenchRow> {
    let run = RunConfig { variant: Variant::Full, dropout: 0.0, ..run.clone() };
    let (params, model) = PrFormer::from_run::<T>(&run, opts.channels, 0)?;
    let x = random_tensor::<T>(&[opts.batch_size, run.lookback, opts.channels], 1);
    let m = measure(opts, || {
        let mut tape = Tape::new();
        let p = match opts.target {
            BenchTarget::Train => params.bind(&mut tape),
            _ => params.bind_frozen(&mut tape),
        };
        let start = tape.len();
        let xv = tape.constant(x.clone());
        match opts.target {
            BenchTarget::Pre => {
                model.embed(&mut tape, &p, xv)?;
            }
            BenchTarget::Forward => {
                model.forward(&mut tape, &p, xv)?;
            }
            BenchTarget::Train => {
                let f = model.forward(&mut tape, &p, xv)?;
                let a = tape.abs(f.output);
                let loss = tape.mean_all(a);
                tape.backward(loss)?;
            }
            BenchTarget::Encoder => return Err(Error::config("use `time_encoder` for the encoder target")),
        }
        Ok(tape.flops_since(start))
    })?;
    Ok(row(opts.target, run.lookback, run.d_model, m))
}

/// Times the encoder stack of `run` on `channels` random tokens per sample.
pub fn time_encoder<T: Real>(run: &RunConfig, opts: &BenchOptions) -> Result<BenchRow> {
    let mut store = ParamStore::<T>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = EncoderSpec {
        e_layers: run.e_layers,
        d_model: run.d_model,
        d_ff: run.d_ff(),
        heads: run.heads,
        dropout: 0.0,
        linear_mixer: false,
    };
    let encoder = Encoder::new(&mut store, "encoder", spec, &mut rng)?;
    let tokens = random_tensor::<T>(&[opts.batch_size, opts.channels, run.d_model], 1);
    let m = measure(opts, || {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let start = tape.len();
        let x = tape.constant(tokens.clone());
        encoder.encode(&mut tape, &p, x)?;
        Ok(tape.flops_since(start))
    })?;
    Ok(row(BenchTarget::Encoder, run.lookback, run.d_model, m))
}

/// One row per lookback, each lookback a multiple of the top window.
pub fn scaling_bench<T: Real>(lookbacks: &[usize], template: &RunConfig, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if lookbacks.len() < 3 {
        return Err(Error::config(format!("scaling needs at least 3 lookbacks, got {}", lookbacks.len())));
    }
    let top = template.pyramidal_windows.iter().copied().max().unwrap_or(1);
    if let Some(bad) = lookbacks.iter().find(|&&l| l == 0 || l % top != 0) {
        return Err(Error::config(format!("lookback {bad} is not a multiple of the top window {top}")));
    }
    let mut rows = Vec::with_capacity(lookbacks.len());
    for &l in lookbacks {
        let run = RunConfig { lookback: l, ..template.clone() };
        rows.push(match opts.target {
            BenchTarget::Encoder => time_encoder::<T>(&run, opts)?,
            _ => time_model::<T>(&run, opts)?,
        });
    }
    chain_ratios(&mut rows);
    Ok(rows)
}

/// Encoder timing at fixed lookback for each `d_model`.
pub fn width_bench<T: Real>(d_models: &[usize], template: &RunConfig, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(d_models.len());
    for &d in d_models {
        let run = RunConfig { d_model: d, d_ff: None, ..template.clone() };
        if d % run.heads != 0 {
            return Err(Error::config(format!("d_model {d} is not divisible by {} heads", run.heads)));
        }
        rows.push(time_encoder::<T>(&run, opts)?);
    }
    chain_ratios(&mut rows);
    Ok(rows)
}

/// Whether a doubling ratio is in the linear regime.
pub fn is_linear_ratio(ratio: f64) -> bool {
    (1.5..=2.5).contains(&ratio)
}

/// One-minute load average per logical CPU, where the host reports it. The
/// calling process counts towards it.
pub fn host_load() -> Option<f64> {
    let text = std::fs::read_to_string("/proc/loadavg").ok()?;
    let one: f64 = text.split_whitespace().next()?.parse().ok()?;
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    Some(one / cpus as f64)
}

pub fn write_bench_csv(writer: impl Write, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
