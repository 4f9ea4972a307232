use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Var};

/// Affine map on the last axis: `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[in_dim, out_dim], bound, rng))?;
        let bias = store.add(format!("{name}.bias"), uniform(&[out_dim], bound, rng))?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add(y, p[self.bias])
    }
}
