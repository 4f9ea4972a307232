use std::f64::consts::PI;

use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SeriesTable;
use crate::error::{Error, Result};

/// Three-channel periodic series with lagged cross-channel coupling.
///
/// A shared AR(1) driver `d` enters channel 0 directly, channel 1 delayed by
/// `lag` steps and channel 2 delayed by `2 lag`. Each channel also carries
/// period-24 and period-96 sinusoids and white noise. With `lag` at least the
/// forecast horizon, the future of channels 1 and 2 is already visible in
/// the history of channel 0 but not in their own.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub rows: usize,
    pub noise_std: f64,
    /// AR(1) coefficient of the driver; its stationary variance is 1
    pub phi: f64,
    pub lag: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { rows: 4000, noise_std: 0.1, phi: 0.95, lag: 24, seed: 0 }
    }
}

pub fn synthetic_series(cfg: &SynthConfig) -> Result<SeriesTable> {
    if cfg.rows < 2 || !(0.0..1.0).contains(&cfg.phi.abs()) || cfg.noise_std < 0.0 {
        return Err(Error::config(format!("invalid synthetic series config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let burn = 2 * cfg.lag;
    let innov = (1.0 - cfg.phi * cfg.phi).sqrt();
    let mut d = Vec::with_capacity(cfg.rows + burn);
    let mut x = unit.sample(&mut rng);
    for _ in 0..cfg.rows + burn {
        d.push(x);
        x = cfg.phi * x + innov * unit.sample(&mut rng);
    }
    let w24 = 2.0 * PI / 24.0;
    let w96 = 2.0 * PI / 96.0;
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let mut timestamps = Vec::with_capacity(cfg.rows);
    let mut values = Vec::with_capacity(cfg.rows * 3);
    for t in 0..cfg.rows {
        let tf = t as f64;
        let i = t + burn;
        let mut noise = || cfg.noise_std * unit.sample(&mut rng);
        values.push((w24 * tf).sin() + 0.5 * (w96 * tf).sin() + d[i] + noise());
        values.push(0.8 * (w24 * tf + PI / 3.0).sin() + 0.5 * (w96 * tf).cos() + d[i - cfg.lag] + noise());
        values.push(0.6 * (w24 * tf + PI).sin() + 0.5 * (w96 * tf + PI / 4.0).sin() + 0.7 * d[i - 2 * cfg.lag] + noise());
        timestamps.push((start + Duration::hours(t as i64)).format("%Y-%m-%d %H:%M:%S").to_string());
    }
    SeriesTable::new(timestamps, vec!["driver".into(), "lag1".into(), "lag2".into()], values)
}

/// Noise-free sinusoids of one period; channel `c` is shifted by `c` radians.
pub fn sine_series(rows: usize, period: f64, channels: usize) -> Result<SeriesTable> {
    let ts = (0..rows).map(|t| t.to_string()).collect();
    let names = (0..channels).map(|c| format!("sine{c}")).collect();
    let mut values = Vec::with_capacity(rows * channels);
    for t in 0..rows {
        for c in 0..channels {
            values.push((2.0 * PI * t as f64 / period + c as f64).sin());
        }
    }
    SeriesTable::new(ts, names, values)
}
