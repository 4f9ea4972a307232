//! Neural building blocks composed from tape primitives.
//!
//! Every block follows the same pattern: a constructor registers its
//! parameters in a [`ParamStore`](crate::params::ParamStore) and keeps the
//! returned ids; `forward` takes the tape plus the [`Bound`](crate::params::Bound)
//! handles for the current pass.
//!
//! Sequence tensors are channels-last: `[batch, length, channels]`.

mod attention;
mod conv;
mod gru;
mod linear;
mod norm;

pub use attention::{Attention, MultiHeadAttention};
pub use conv::{conv1d, conv1d_out_len, Conv1d};
pub use gru::{Gru, GruOutput};
pub use linear::Linear;
pub use norm::{layer_norm, LayerNorm};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Temperature softmax over the last axis: `exp(a_i / T) / sum_j exp(a_j / T)`.
pub fn softmax_temp<T: Real>(tape: &mut Tape<T>, logits: Var, temperature: f64) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::invalid(format!("softmax temperature must be positive, got {temperature}")));
    }
    let scaled = tape.scale(logits, T::from_f64(1.0 / temperature));
    tape.softmax(scaled)
}

/// Source index for each of `target_len` nearest-neighbour positions over `len`.
pub fn repeat_index(len: usize, target_len: usize) -> Vec<usize> {
    (0..target_len).map(|j| j * len / target_len).collect()
}

/// Nearest-neighbour upsampling of `axis` to `target_len`: position `j` reads
/// source `floor(j * len / target_len)`, an exact k-fold repeat when
/// `target_len == k * len`.
pub fn upsample_repeat<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    axis: usize,
    target_len: usize,
) -> Result<Var> {
    let shape = tape.shape(x);
    let len = *shape
        .get(axis)
        .ok_or_else(|| Error::shape("upsample_repeat", shape, &[axis]))?;
    if target_len < len {
        return Err(Error::invalid(format!(
            "upsample target length {target_len} is shorter than the source length {len}"
        )));
    }
    if target_len == len {
        return Ok(x);
    }
    tape.gather(x, axis, &repeat_index(len, target_len))
}
