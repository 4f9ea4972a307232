//! Reversible instance normalization.
//!
//! Each channel of each lookback window is standardized with its own mean and
//! population standard deviation, then passed through a learnable per-channel
//! affine map. Forecasts are mapped back with the exact inverse using the same
//! window statistics. The statistics are tape values, so gradients flow
//! through them.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const REVIN_EPS: f64 = 1e-5;
/// Smallest admissible `|gamma|`; keeps the affine map invertible.
pub const MIN_GAMMA: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct Revin {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

/// Window statistics returned by [`Revin::normalize`], `[B, 1, C]` each.
#[derive(Clone, Copy, Debug)]
pub struct RevinState {
    pub mean: Var,
    pub std: Var,
    gamma: Var,
    beta: Var,
    unbatched: bool,
}

impl Revin {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("RevIN needs at least one channel"));
        }
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([channels], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels]))?;
        Ok(Revin { gamma, beta, channels })
    }

    /// `x: [B, L, C]` or `[L, C]`.
    pub fn normalize<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, RevinState)> {
        let shape = tape.shape(x).to_vec();
        let (unbatched, b, l, c) = match shape[..] {
            [l, c] => (true, 1, l, c),
            [b, l, c] => (false, b, l, c),
            _ => return Err(Error::shape("revin.normalize", &shape, &[self.channels])),
        };
        if c != self.channels {
            return Err(Error::shape("revin.normalize", &shape, &[self.channels]));
        }
        if l < 2 {
            return Err(Error::invalid(format!("RevIN needs a window of at least 2 steps, got {l}")));
        }
        let x = if unbatched { tape.reshape(x, &[1, l, c])? } else { x };
        let mean = tape.mean(x, 1)?;
        let mean = tape.reshape(mean, &[b, 1, c])?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean(sq, 1)?;
        let var = tape.add_scalar(var, T::from_f64(REVIN_EPS));
        let std = tape.sqrt(var);
        let std = tape.reshape(std, &[b, 1, c])?;
        let z = tape.div(centered, std)?;
        let (gamma, beta) = (p[self.gamma], p[self.beta]);
        let z = tape.mul(z, gamma)?;
        let mut out = tape.add(z, beta)?;
        if unbatched {
            out = tape.reshape(out, &[l, c])?;
        }
        Ok((out, RevinState { mean, std, gamma, beta, unbatched }))
    }

    /// Inverse of [`normalize`](Self::normalize) on `[B, H, C]` (or `[H, C]`).
    pub fn denormalize<T: Real>(&self, tape: &mut Tape<T>, state: &RevinState, y: Var) -> Result<Var> {
        if tape.value(state.gamma).data().iter().any(|g| g.to_f64().abs() < MIN_GAMMA) {
            return Err(Error::Numeric(format!("RevIN gamma below {MIN_GAMMA} is not invertible")));
        }
        let shape = tape.shape(y).to_vec();
        let y = match (state.unbatched, &shape[..]) {
            (true, &[h, c]) => tape.reshape(y, &[1, h, c])?,
            (false, &[_, _, _]) => y,
            _ => return Err(Error::shape("revin.denormalize", &shape, tape.shape(state.mean))),
        };
        let y = tape.sub(y, state.beta)?;
        let y = tape.div(y, state.gamma)?;
        let y = tape.mul(y, state.std)?;
        let out = tape.add(y, state.mean)?;
        if state.unbatched {
            tape.reshape(out, &shape)
        } else {
            Ok(out)
        }
    }

    /// Projects `gamma` away from zero, keeping its sign. Run after every
    /// optimizer step.
    pub fn constrain<T: Real>(&self, store: &mut ParamStore<T>) {
        for g in store.get_mut(self.gamma).data_mut() {
            let v = g.to_f64();
            if v.abs() < MIN_GAMMA {
                *g = T::from_f64(if v < 0.0 { -MIN_GAMMA } else { MIN_GAMMA });
            }
        }
    }
}
