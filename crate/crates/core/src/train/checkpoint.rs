//! Single-file named-tensor archive.
//!
//! Layout: the 8-byte magic `PRFCKPT1`, a little-endian `u32` manifest
//! length, the JSON manifest, then every tensor's raw little-endian payload
//! at the offset recorded for it (relative to the start of the payload).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::PrFormer;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"PRFCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub run_config: RunConfig,
    pub channels: Vec<String>,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// A trained model: its configuration and parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub run_config: RunConfig,
    pub channels: Vec<String>,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub params: ParamStore<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset: payload.len() as u64,
            });
            for &x in t.data() {
                x.write_le(&mut payload);
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            run_config: self.run_config.clone(),
            channels: self.channels.clone(),
            seed: self.seed,
            best_epoch: self.best_epoch,
            best_val_mae: self.best_val_mae,
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Parses an archive and rebuilds the model it describes. Stored tensors
    /// of either float width are converted to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, PrFormer)> {
        let bad = |msg: String| Error::data(format!("checkpoint: {msg}"));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", manifest.format_version)));
        }
        let payload = &bytes[12 + len..];

        let (mut params, model) = PrFormer::from_run::<T>(&manifest.run_config, manifest.channels.len(), manifest.seed)
            .map_err(|e| bad(format!("cannot rebuild model: {e}")))?;
        if manifest.tensors.len() != params.len() {
            return Err(bad(format!("{} tensors stored, model has {}", manifest.tensors.len(), params.len())));
        }
        for entry in &manifest.tensors {
            let id = params.find(&entry.name).ok_or_else(|| bad(format!("unexpected tensor `{}`", entry.name)))?;
            let expected = params.get(id).shape().to_vec();
            if entry.shape != expected {
                return Err(bad(format!("tensor `{}` has shape {:?}, model expects {expected:?}", entry.name, entry.shape)));
            }
            let values = match entry.dtype.as_str() {
                "f32" => read_values::<f32, T>(payload, entry)?,
                "f64" => read_values::<f64, T>(payload, entry)?,
                other => return Err(bad(format!("tensor `{}` has unknown dtype `{other}`", entry.name))),
            };
            *params.get_mut(id) = Tensor::new(expected, values)?;
        }
        let ckpt = Checkpoint {
            run_config: manifest.run_config,
            channels: manifest.channels,
            seed: manifest.seed,
            best_epoch: manifest.best_epoch,
            best_val_mae: manifest.best_val_mae,
            params,
        };
        Ok((ckpt, model))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PrFormer)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn read_values<S: Real, T: Real>(payload: &[u8], entry: &TensorEntry) -> Result<Vec<T>> {
    let n: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let bytes = payload
        .get(start..start + n * S::BYTES)
        .ok_or_else(|| Error::data(format!("checkpoint: payload of `{}` is truncated", entry.name)))?;
    Ok(bytes.chunks_exact(S::BYTES).map(|b| T::from_f64(S::read_le(b).to_f64())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run() -> RunConfig {
        RunConfig {
            lookback: 16,
            pred_len: 4,
            pyramidal_windows: vec![2, 4],
            e_layers: 1,
            d_model: 8,
            heads: 2,
            conv_channels: 3,
            ..RunConfig::default()
        }
    }

    fn ckpt<T: Real>() -> Checkpoint<T> {
        let (params, _) = PrFormer::from_run::<T>(&tiny_run(), 2, 9).unwrap();
        Checkpoint {
            run_config: tiny_run(),
            channels: vec!["a".into(), "b".into()],
            seed: 9,
            best_epoch: Some(3),
            best_val_mae: Some(0.25),
            params,
        }
    }

    #[test]
    fn round_trip_and_width_conversion() {
        let c = ckpt::<f32>();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"PRFCKPT1");
        let (back, model) = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(model.spec.channels, 2);
        let (wide, _) = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(wide.params, c.params.cast::<f64>());
        assert_eq!(c.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = ckpt::<f64>();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::<f64>::load(&path).unwrap().0, c);
    }

    #[test]
    fn rejects_corrupt_archives() {
        let bytes = ckpt::<f32>().to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(b"garbage!").is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 4]).is_err());

        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        manifest.tensors[3].shape.push(1);
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut forged = b"PRFCKPT1".to_vec();
        forged.extend_from_slice(&(json.len() as u32).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[12 + len..]);
        let err = Checkpoint::<f32>::from_bytes(&forged).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }
}
