use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Var};

/// Output length of a stride-equals-kernel convolution without padding.
pub fn conv1d_out_len(length: usize, kernel: usize) -> usize {
    (length - kernel) / kernel + 1
}

/// Non-overlapping 1-D convolution (stride == kernel, no padding).
///
/// Weight is stored `[out_ch, in_ch, kernel]`. Trailing samples that do not
/// fill a whole kernel are dropped.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::invalid("convolution kernel must be at least 1"));
        }
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[out_ch, in_ch, kernel], bound, rng))?;
        let bias = store.add(format!("{name}.bias"), uniform(&[out_ch], bound, rng))?;
        Ok(Conv1d { weight, bias, in_ch, out_ch, kernel })
    }

    /// `x: [.., length, in_ch]` to `[.., length / kernel, out_ch]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        conv_channels_last(tape, x, p[self.weight], p[self.bias], self.kernel)
    }
}

fn conv_channels_last<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    kernel: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let wshape = tape.shape(weight).to_vec();
    if shape.len() < 2 || wshape.len() != 3 || wshape[2] != kernel || wshape[1] != shape[shape.len() - 1] {
        return Err(Error::shape("conv1d", &shape, &wshape));
    }
    let r = shape.len();
    let (length, in_ch) = (shape[r - 2], shape[r - 1]);
    if length < kernel {
        return Err(Error::invalid(format!(
            "conv1d: sequence length {length} is shorter than kernel {kernel}"
        )));
    }
    let out_len = conv1d_out_len(length, kernel);
    let out_ch = wshape[0];
    let used = if out_len * kernel == length {
        x
    } else {
        tape.slice(x, r - 2, 0, out_len * kernel)?
    };
    let mut windows = shape[..r - 2].to_vec();
    windows.extend([out_len, kernel * in_ch]);
    let windows = tape.reshape(used, &windows)?;
    // [out, in, k] -> [k, in, out] so rows follow the (tap, channel) order of a window
    let w = tape.permute(weight, &[2, 1, 0])?;
    let w = tape.reshape(w, &[kernel * in_ch, out_ch])?;
    let y = tape.matmul(windows, w)?;
    tape.add(y, bias)
}

/// Convolution on a single `[channels, length]` sequence, returning
/// `[out_ch, length / kernel]`.
pub fn conv1d<T: Real>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var, kernel: usize) -> Result<Var> {
    let xt = tape.transpose(x)?;
    let y = conv_channels_last(tape, xt, weight, bias, kernel)?;
    tape.transpose(y)
}
