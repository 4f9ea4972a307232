//! The assembled forecaster and its ablation variants.
//!
//! ```text
//! X [B, L, C] -> RevIN -> per-channel embedding [B, C, D] -> encoder
//!             -> shared head [B, C, H] -> transpose -> RevIN^-1 -> [B, H, C]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Variant};
use crate::encoder::{Encoder, EncoderSpec, Head};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamStore};
use crate::pre::{build_pyramid_config, hidden_sizes, Pre};
use crate::revin::{Revin, RevinState};
use crate::tensor::{Real, Tape, Var};

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub windows: Vec<usize>,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub e_layers: usize,
    pub conv_channels: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub strict_dims: bool,
    pub variant: Variant,
}

impl ModelSpec {
    pub fn from_run(run: &RunConfig, channels: usize) -> Self {
        ModelSpec {
            lookback: run.lookback,
            horizon: run.pred_len,
            channels,
            windows: run.pyramidal_windows.clone(),
            d_model: run.d_model,
            d_ff: run.d_ff(),
            heads: run.heads,
            e_layers: run.e_layers,
            conv_channels: run.conv_channels,
            dropout: run.dropout,
            temperature: run.temperature,
            strict_dims: run.strict_dims,
            variant: run.variant,
        }
    }
}

/// Maps each normalized channel series to a `D`-dim token.
#[derive(Clone, Debug)]
pub enum Embedding {
    Pyramid(Pre),
    Linear(Linear),
}

#[derive(Clone, Debug)]
pub struct PrFormer {
    pub spec: ModelSpec,
    pub revin: Revin,
    pub embedding: Embedding,
    pub encoder: Encoder,
    pub head: Head,
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forecast {
    /// denormalized forecast `[B, H, C]`
    pub output: Var,
    /// forecast before denormalization `[B, H, C]`
    pub normalized: Var,
    pub state: RevinState,
}

impl PrFormer {
    /// Builds the model and initializes its parameters from `seed`.
    pub fn new<T: Real>(spec: ModelSpec, seed: u64) -> Result<(ParamStore<T>, PrFormer)> {
        if spec.channels == 0 || spec.horizon == 0 {
            return Err(Error::config("channels and horizon must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let revin = Revin::new(&mut store, "revin", spec.channels)?;
        let full = build_pyramid_config(&spec.windows, spec.lookback)?;
        let hidden = hidden_sizes(spec.d_model, full.levels(), spec.strict_dims)?;
        let embedding = match spec.variant {
            Variant::V2 => Embedding::Linear(Linear::new(&mut store, "embed", spec.lookback, spec.d_model, &mut rng)?),
            // bottom level only, at the size it has inside the full pyramid
            Variant::V3 => Embedding::Pyramid(Pre::new(
                &mut store,
                "pre",
                full.truncated(1),
                spec.conv_channels,
                &hidden[..1],
                spec.d_model,
                &mut rng,
            )?),
            Variant::Full | Variant::V1 => {
                Embedding::Pyramid(Pre::new(&mut store, "pre", full, spec.conv_channels, &hidden, spec.d_model, &mut rng)?)
            }
        };
        let encoder = Encoder::new(
            &mut store,
            "encoder",
            EncoderSpec {
                e_layers: spec.e_layers,
                d_model: spec.d_model,
                d_ff: spec.d_ff,
                heads: spec.heads,
                dropout: spec.dropout,
                linear_mixer: spec.variant == Variant::V1,
            },
            &mut rng,
        )?;
        let head = Head::new(&mut store, "head", spec.d_model, spec.horizon, &mut rng)?;
        Ok((store, PrFormer { spec, revin, embedding, encoder, head }))
    }

    pub fn from_run<T: Real>(run: &RunConfig, channels: usize, seed: u64) -> Result<(ParamStore<T>, PrFormer)> {
        Self::new(ModelSpec::from_run(run, channels), seed)
    }

    /// Tokens for already-normalized input `[B, L, C]`, shape `[B, C, D]`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, normalized: Var) -> Result<Var> {
        let shape = tape.shape(normalized).to_vec();
        let &[b, l, c] = &shape[..] else {
            return Err(Error::shape("embed", &shape, &[self.spec.lookback, self.spec.channels]));
        };
        let series = tape.permute(normalized, &[0, 2, 1])?;
        let series = tape.reshape(series, &[b * c, l])?;
        let tokens = match &self.embedding {
            Embedding::Pyramid(pre) => pre.embed(tape, p, series, self.spec.temperature)?,
            Embedding::Linear(lin) => lin.forward(tape, p, series)?,
        };
        tape.reshape(tokens, &[b, c, self.spec.d_model])
    }

    /// Raw input windows `[B, L, C]` to the per-channel tokens fed to the
    /// encoder.
    pub fn tokens<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (xn, _) = self.revin.normalize(tape, p, x)?;
        self.embed(tape, p, xn)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Forecast> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.spec.lookback || shape[2] != self.spec.channels {
            return Err(Error::shape("forecast", &shape, &[self.spec.lookback, self.spec.channels]));
        }
        let (xn, state) = self.revin.normalize(tape, p, x)?;
        let tokens = self.embed(tape, p, xn)?;
        let encoded = self.encoder.encode(tape, p, tokens)?;
        let y = self.head.project(tape, p, encoded)?;
        let normalized = tape.permute(y, &[0, 2, 1])?;
        let output = self.revin.denormalize(tape, &state, normalized)?;
        Ok(Forecast { output, normalized, state })
    }

    /// Maps raw targets into the normalized space of `state`.
    pub fn normalize_targets<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, state: &RevinState, y: Var) -> Result<Var> {
        let centered = tape.sub(y, state.mean)?;
        let z = tape.div(centered, state.std)?;
        let z = tape.mul(z, p[self.revin.gamma])?;
        tape.add(z, p[self.revin.beta])
    }

    /// Parameter hygiene after an optimizer step.
    pub fn constrain<T: Real>(&self, store: &mut ParamStore<T>) {
        self.revin.constrain(store);
    }
}
