//! Transformer encoder over variate tokens and the channel-wise forecast head.
//!
//! Tokens are whole-channel embeddings `[B, C, D]`; attention mixes channels.
//! No positional encoding is added: the set of variates has no natural order.
//! Layers are post-norm:
//!
//! ```text
//! A  = LN(H + drop(Mix(H)))
//! H' = LN(A + drop(W2 relu(W1 A)))
//! ```
//!
//! where `Mix` is multi-head self-attention, or a per-token linear map in the
//! attention-free ablation.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Var};

/// Token-mixing sublayer.
#[derive(Clone, Debug)]
pub enum Mixer {
    Attention(MultiHeadAttention),
    /// per-token `D -> D` map, no cross-channel interaction
    Linear(Linear),
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub mixer: Mixer,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub d_model: usize,
    pub dropout: f64,
}

/// Encoder geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderSpec {
    pub e_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    /// replace attention with a per-token linear map
    pub linear_mixer: bool,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: EncoderSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if spec.e_layers == 0 {
            return Err(Error::config("e_layers must be at least 1"));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", spec.dropout)));
        }
        let d = spec.d_model;
        let mut layers = Vec::with_capacity(spec.e_layers);
        for i in 0..spec.e_layers {
            let prefix = format!("{name}.layer{i}");
            let mixer = if spec.linear_mixer {
                Mixer::Linear(Linear::new(store, &format!("{prefix}.mix"), d, d, rng)?)
            } else {
                Mixer::Attention(MultiHeadAttention::new(store, &format!("{prefix}.attn"), d, spec.heads, rng)?)
            };
            layers.push(EncoderLayer {
                mixer,
                norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d)?,
                ff_in: Linear::new(store, &format!("{prefix}.ff_in"), d, spec.d_ff, rng)?,
                ff_out: Linear::new(store, &format!("{prefix}.ff_out"), spec.d_ff, d, rng)?,
                norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d)?,
            });
        }
        Ok(Encoder { layers, d_model: d, dropout: spec.dropout })
    }

    /// `[B, C, D]` or `[C, D]` to the same shape.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var) -> Result<Var> {
        self.encode_inner(tape, p, tokens, None)
    }

    /// Like [`encode`](Self::encode), also returning each layer's attention
    /// probabilities `[B, heads, C, C]` (empty for the linear mixer).
    pub fn encode_with_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let mut weights = Vec::new();
        let out = self.encode_inner(tape, p, tokens, Some(&mut weights))?;
        Ok((out, weights))
    }

    fn encode_inner<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
        mut weights: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let shape = tape.shape(tokens);
        if !(2..=3).contains(&shape.len()) || shape[shape.len() - 1] != self.d_model {
            return Err(Error::shape("encode", shape, &[self.d_model]));
        }
        let mut h = tokens;
        for layer in &self.layers {
            let mixed = match &layer.mixer {
                Mixer::Attention(mha) => {
                    let att = mha.forward_with_weights(tape, p, h)?;
                    if let Some(w) = weights.as_deref_mut() {
                        w.push(att.weights);
                    }
                    att.output
                }
                Mixer::Linear(lin) => lin.forward(tape, p, h)?,
            };
            let mixed = tape.dropout(mixed, self.dropout)?;
            let a = tape.add(h, mixed)?;
            let a = layer.norm1.forward(tape, p, a)?;

            let f = layer.ff_in.forward(tape, p, a)?;
            let f = tape.relu(f);
            let f = layer.ff_out.forward(tape, p, f)?;
            let f = tape.dropout(f, self.dropout)?;
            let sum = tape.add(a, f)?;
            h = layer.norm2.forward(tape, p, sum)?;
        }
        Ok(h)
    }
}

/// Channel-wise projection `D -> H`, one weight matrix shared by all channels.
#[derive(Clone, Debug)]
pub struct Head {
    pub linear: Linear,
}

impl Head {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        horizon: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Head { linear: Linear::new(store, name, d_model, horizon, rng)? })
    }

    /// `[.., C, D]` tokens to `[.., C, H]` forecasts (channel-major).
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var) -> Result<Var> {
        self.linear.forward(tape, p, tokens)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::{grad_check_many, Tensor};

    fn spec(layers: usize, linear_mixer: bool) -> EncoderSpec {
        EncoderSpec { e_layers: layers, d_model: 8, d_ff: 16, heads: 2, dropout: 0.0, linear_mixer }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn encoder(layers: usize, linear_mixer: bool) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(&mut store, "enc", spec(layers, linear_mixer), &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn shape_is_preserved() {
        for layers in 1..=3 {
            let (store, enc) = encoder(layers, false);
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            for shape in [vec![5, 8], vec![2, 5, 8], vec![1, 1, 8]] {
                let x = tape.constant(random(&shape, 1));
                let y = enc.encode(&mut tape, &p, x).unwrap();
                assert_eq!(tape.shape(y), &shape[..]);
            }
        }
    }

    #[test]
    fn rejects_bad_configs_and_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Encoder::new(&mut store, "a", spec(0, false), &mut rng).is_err());
        assert!(Encoder::new(&mut store, "b", EncoderSpec { heads: 3, ..spec(1, false) }, &mut rng).is_err());
        let (store, enc) = encoder(1, false);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(random(&[4, 7], 0));
        assert!(enc.encode(&mut tape, &p, x).is_err());
    }

    #[test]
    fn permuting_tokens_permutes_output() {
        let (store, enc) = encoder(2, false);
        let x = random(&[5, 8], 2);
        let perm = [3, 0, 4, 1, 2];
        let mut xp = Vec::new();
        for &r in &perm {
            xp.extend_from_slice(&x.data()[r * 8..(r + 1) * 8]);
        }
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let y = enc.encode(&mut tape, &p, xv).unwrap();
        let xpv = tape.constant(Tensor::new([5, 8], xp).unwrap());
        let yp = enc.encode(&mut tape, &p, xpv).unwrap();
        let (y, yp) = (tape.value(y).data(), tape.value(yp).data());
        // key order changes summation order, so equality is up to roundoff
        for (i, &r) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((yp[i * 8 + j] - y[r * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let (store, enc) = encoder(1, false);
        let Mixer::Attention(mha) = &enc.layers[0].mixer else { unreachable!() };
        let x = random(&[1, 8], 4);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let att = mha.forward_with_weights(&mut tape, &p, xv).unwrap();
        let v = mha.value.forward(&mut tape, &p, xv).unwrap();
        let expected = mha.output.forward(&mut tape, &p, v).unwrap();
        assert!(tape.value(att.output).max_abs_diff(tape.value(expected)) < 1e-12);
        assert!(tape.value(att.weights).data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn attention_rows_sum_to_one_in_every_layer() {
        let (store, enc) = encoder(3, false);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(random(&[2, 6, 8], 5));
        let (_, weights) = enc.encode_with_weights(&mut tape, &p, x).unwrap();
        assert_eq!(weights.len(), 3);
        for w in weights {
            for row in tape.value(w).data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_mixer_has_no_cross_channel_terms() {
        let (store, enc) = encoder(2, true);
        assert!(!store.iter().any(|(n, _)| n.contains("attn")));
        let x = random(&[4, 8], 6);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = enc.encode(&mut tape, &p, xv).unwrap();
        let y = tape.value(y).clone();
        let row = tape.constant(Tensor::new([1, 8], x.data()[8..16].to_vec()).unwrap());
        let yr = enc.encode(&mut tape, &p, row).unwrap();
        let diff = tape.value(yr).data().iter().zip(&y.data()[8..16]).map(|(a, b)| (a - b).abs());
        assert!(diff.fold(0.0, f64::max) < 1e-12);
    }

    #[test]
    fn dropout_only_acts_in_training() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(&mut store, "enc", EncoderSpec { dropout: 0.5, ..spec(1, false) }, &mut rng).unwrap();
        let (zero_store, zero_enc) = encoder(1, false);
        assert_eq!(store, zero_store);
        let x = random(&[3, 8], 1);
        let run = |enc: &Encoder, mut tape: Tape<f64>| {
            let p = store.bind_frozen(&mut tape);
            let xv = tape.constant(x.clone());
            let y = enc.encode(&mut tape, &p, xv).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(&enc, Tape::new()), run(&zero_enc, Tape::new()));
        assert_ne!(run(&enc, Tape::training(1)), run(&zero_enc, Tape::training(1)));
    }

    #[test]
    fn head_examples() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::new(&mut store, "head", 4, 4, &mut rng).unwrap();
        let tokens = Tensor::new([2, 4], vec![0.5, -1., 2., 3., 0.5, -1., 2., 3.]).unwrap();

        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let t = tape.constant(tokens.clone());
        let y = head.project(&mut tape, &p, t).unwrap();
        let y = tape.value(y).data();
        assert_eq!(&y[..4], &y[4..]);

        store.get_mut(head.linear.weight).data_mut().fill(0.0);
        let bias = store.get(head.linear.bias).clone();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let t = tape.constant(tokens.clone());
        let y = head.project(&mut tape, &p, t).unwrap();
        for row in tape.value(y).data().chunks(4) {
            assert_eq!(row, bias.data());
        }

        let w = store.get_mut(head.linear.weight).data_mut();
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        store.get_mut(head.linear.bias).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let t = tape.constant(tokens.clone());
        let y = head.project(&mut tape, &p, t).unwrap();
        assert_eq!(tape.value(y), &tokens);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for linear_mixer in [false, true] {
            let (store, enc) = encoder(1, linear_mixer);
            let mut points = vec![random(&[3, 8], 7)];
            points.extend(store.values().iter().cloned());
            let report = grad_check_many(
                |tape, vars| {
                    let p = Bound::from_vars(vars[1..].to_vec());
                    let y = enc.encode(tape, &p, vars[0])?;
                    let t = tape.tanh(y);
                    let w = tape.mul(t, vars[0])?;
                    Ok(tape.sum_all(w))
                },
                &points,
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
