use rand_chacha::ChaCha8Rng;

use super::Linear;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Var};

/// Multi-head scaled dot-product self-attention over tokens.
///
/// Per-head query/key/value projections are the column blocks of one
/// `D x D` projection each; heads are concatenated and passed through an
/// output projection. No masking and no positional terms.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

/// Attention result together with the probability rows, `[batch, heads, C, C]`.
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "d_model {d_model} is not divisible by {heads} attention heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, rng)?,
            heads,
            d_model,
        })
    }

    /// `tokens: [batch, C, D]` (or `[C, D]`) to the same shape.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, tokens)?.output)
    }

    pub fn forward_with_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
    ) -> Result<Attention> {
        let shape = tape.shape(tokens).to_vec();
        let unbatched = shape.len() == 2;
        let (batch, c, d) = match shape[..] {
            [c, d] => (1, c, d),
            [b, c, d] => (b, c, d),
            _ => return Err(Error::shape("attention", &shape, &[self.d_model])),
        };
        if d != self.d_model {
            return Err(Error::shape("attention", &shape, &[self.d_model]));
        }
        let x = if unbatched { tape.reshape(tokens, &[1, c, d])? } else { tokens };
        let (h, dk) = (self.heads, d / self.heads);

        let split = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[batch, c, h, dk])?;
            tape.permute(v, &[0, 2, 1, 3])
        };
        let q = self.query.forward(tape, p, x)?;
        let q = split(tape, q)?;
        let k = self.key.forward(tape, p, x)?;
        let k = split(tape, k)?;
        let v = self.value.forward(tape, p, x)?;
        let v = split(tape, v)?;

        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::from_f64(1.0 / (dk as f64).sqrt()));
        let weights = tape.softmax(scores)?;
        let heads = tape.matmul(weights, v)?;
        let heads = tape.permute(heads, &[0, 2, 1, 3])?;
        let merged = tape.reshape(heads, &[batch, c, d])?;
        let out = self.output.forward(tape, p, merged)?;
        let output = if unbatched { tape.reshape(out, &[c, d])? } else { out };
        Ok(Attention { output, weights })
    }
}
