use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Single-layer GRU.
///
/// Gate blocks are packed along the last axis in `[update, reset, candidate]`
/// order:
///
/// ```text
/// z_t = sigmoid(x_t W_z + h_{t-1} U_z + b_z)
/// r_t = sigmoid(x_t W_r + h_{t-1} U_r + b_r)
/// c_t = tanh(x_t W_c + (r_t * h_{t-1}) U_c + b_c)
/// h_t = (1 - z_t) * h_{t-1} + z_t * c_t
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    /// `[in_dim, 3 * hidden]`
    pub w_input: ParamId,
    /// `[hidden, 3 * hidden]`
    pub w_recurrent: ParamId,
    /// `[3 * hidden]`
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

pub struct GruOutput {
    /// `[batch, length, hidden]`, only when requested
    pub all: Option<Var>,
    /// `[batch, hidden]`
    pub last: Var,
}

impl Gru {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if hidden == 0 || in_dim == 0 {
            return Err(Error::invalid("GRU dimensions must be positive"));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = store.add(format!("{name}.w_input"), uniform(&[in_dim, 3 * hidden], bound, rng))?;
        let w_recurrent =
            store.add(format!("{name}.w_recurrent"), uniform(&[hidden, 3 * hidden], bound, rng))?;
        let bias = store.add(format!("{name}.bias"), uniform(&[3 * hidden], bound, rng))?;
        Ok(Gru { w_input, w_recurrent, bias, in_dim, hidden })
    }

    /// Runs the recurrence over `seq: [batch, length, in_dim]` from `h0`
    /// (`[batch, hidden]`, zeros when `None`).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        seq: Var,
        h0: Option<Var>,
        keep_all: bool,
    ) -> Result<GruOutput> {
        let shape = tape.shape(seq).to_vec();
        if shape.len() != 3 || shape[2] != self.in_dim || shape[1] == 0 {
            return Err(Error::shape("gru", &shape, &[self.in_dim, self.hidden]));
        }
        let (batch, length, h) = (shape[0], shape[1], self.hidden);
        let mut state = match h0 {
            Some(v) => {
                if tape.shape(v) != [batch, h] {
                    return Err(Error::shape("gru", tape.shape(v), &[batch, h]));
                }
                v
            }
            None => tape.constant(Tensor::zeros([batch, h])),
        };

        let xw = tape.matmul(seq, p[self.w_input])?;
        let xw = tape.add(xw, p[self.bias])?;
        let u_gates = tape.slice(p[self.w_recurrent], 1, 0, 2 * h)?;
        let u_cand = tape.slice(p[self.w_recurrent], 1, 2 * h, 3 * h)?;

        let mut all = Vec::with_capacity(if keep_all { length } else { 0 });
        for t in 0..length {
            let xt = tape.slice(xw, 1, t, t + 1)?;
            let xt = tape.reshape(xt, &[batch, 3 * h])?;
            let x_gates = tape.slice(xt, 1, 0, 2 * h)?;
            let x_cand = tape.slice(xt, 1, 2 * h, 3 * h)?;

            let h_gates = tape.matmul(state, u_gates)?;
            let gates = tape.add(x_gates, h_gates)?;
            let gates = tape.sigmoid(gates);
            let z = tape.slice(gates, 1, 0, h)?;
            let r = tape.slice(gates, 1, h, 2 * h)?;

            let rh = tape.mul(r, state)?;
            let h_cand = tape.matmul(rh, u_cand)?;
            let cand = tape.add(x_cand, h_cand)?;
            let cand = tape.tanh(cand);

            let delta = tape.sub(cand, state)?;
            let step = tape.mul(z, delta)?;
            state = tape.add(state, step)?;
            if keep_all {
                all.push(tape.reshape(state, &[batch, 1, h])?);
            }
        }
        let all = if keep_all { Some(tape.concat(&all, 1)?) } else { None };
        Ok(GruOutput { all, last: state })
    }
}
