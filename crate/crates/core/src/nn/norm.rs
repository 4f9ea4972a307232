use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Normalizes the last axis to zero mean and unit population variance, then
/// applies `gain * x + bias`.
pub fn layer_norm<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let dim = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
    if tape.shape(gain) != [dim] || tape.shape(bias) != [dim] {
        return Err(Error::shape("layer_norm", &shape, tape.shape(gain)));
    }
    let mut keep = shape.clone();
    *keep.last_mut().unwrap() = 1;
    let last = shape.len() - 1;

    let mean = tape.mean(x, last)?;
    let mean = tape.reshape(mean, &keep)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean(sq, last)?;
    let var = tape.reshape(var, &keep)?;
    let var = tape.add_scalar(var, T::from_f64(eps));
    let std = tape.sqrt(var);
    let normed = tape.div(centered, std)?;
    let scaled = tape.mul(normed, gain)?;
    tape.add(scaled, bias)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full([dim], T::one()))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([dim]))?;
        Ok(LayerNorm { gain, bias, eps: 1e-5 })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        layer_norm(tape, x, p[self.gain], p[self.bias], self.eps)
    }
}
