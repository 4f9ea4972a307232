//! Run configuration: model geometry, optimization and data plumbing.
//!
//! Serialized as JSON using exactly these field names. Omitted fields take
//! the defaults below, which are the ETTh1 row of the published parameter
//! table plus plumbing defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SplitScheme;
use crate::error::{Error, Result};
use crate::pre::{build_pyramid_config, hidden_sizes};

/// Which model graph to build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Full,
    /// attention replaced by a per-token linear map
    V1,
    /// PRE replaced by one linear projection `L -> D` per channel
    V2,
    /// pyramid cut down to its bottom level
    V3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::V1, Variant::V2, Variant::V3];
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            other => Err(Error::config(format!("unknown variant `{other}` (expected full, v1, v2 or v3)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
        })
    }
}

/// Float width used for training and inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Scale the training loss is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossScale {
    /// denormalized forecasts against raw targets
    #[default]
    Raw,
    /// RevIN-space forecasts against targets normalized with the same window statistics
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lookback: usize,
    pub pred_len: usize,
    pub pyramidal_windows: Vec<usize>,
    pub e_layers: usize,
    pub d_model: usize,
    /// feed-forward width; `2 * d_model` when absent
    pub d_ff: Option<usize>,
    pub heads: usize,
    pub conv_channels: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub variant: Variant,
    pub data: Option<PathBuf>,
    /// chosen from the file name when absent
    pub split: Option<SplitScheme>,
    pub strict_split: bool,
    /// require `d_model` divisible by the number of pyramid levels
    pub strict_dims: bool,
    pub epochs: usize,
    pub patience: usize,
    pub precision: Precision,
    pub loss_scale: LossScale,
    /// global gradient-norm clip, off when absent
    pub clip_grad: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lookback: 720,
            pred_len: 96,
            pyramidal_windows: vec![24, 48, 72, 144],
            e_layers: 5,
            d_model: 720,
            d_ff: None,
            heads: 4,
            conv_channels: 16,
            dropout: 0.1,
            batch_size: 256,
            lr: 1e-3,
            temperature: 1.0,
            seed: None,
            variant: Variant::Full,
            data: None,
            split: None,
            strict_split: false,
            strict_dims: false,
            epochs: 30,
            patience: 10,
            precision: Precision::F32,
            loss_scale: LossScale::Raw,
            clip_grad: None,
        }
    }
}

/// name, windows, e_layers, d_model, batch_size, lr
type Preset = (&'static str, &'static [usize], usize, usize, usize, f64);

/// Published per-dataset settings (lookback 720 and dropout 0.1 throughout).
const PRESETS: [Preset; 7] = [
    ("ETTh1", &[24, 48, 72, 144], 5, 720, 256, 1e-3),
    ("ETTh2", &[24, 48, 72, 144], 5, 720, 256, 2e-4),
    ("ETTm1", &[4, 16, 32, 96], 5, 720, 256, 2e-4),
    ("ETTm2", &[4, 16, 32, 96], 5, 720, 256, 1e-4),
    ("Weather", &[6, 24, 48, 144], 3, 720, 64, 1e-4),
    ("Electricity", &[24, 48, 72, 96, 144], 3, 660, 16, 5e-4),
    ("Traffic", &[24, 48, 72, 144], 4, 520, 8, 1e-3),
];

impl RunConfig {
    /// Settings for one of the benchmark datasets (case-insensitive name).
    pub fn preset(dataset: &str) -> Result<Self> {
        let (_, windows, e_layers, d_model, batch_size, lr) = PRESETS
            .iter()
            .find(|p| p.0.eq_ignore_ascii_case(dataset))
            .ok_or_else(|| Error::config(format!("no preset for dataset `{dataset}`")))?;
        Ok(RunConfig {
            lookback: 720,
            pyramidal_windows: windows.to_vec(),
            e_layers: *e_layers,
            d_model: *d_model,
            dropout: 0.1,
            batch_size: *batch_size,
            lr: *lr,
            ..RunConfig::default()
        })
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|p| p.0)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(2 * self.d_model)
    }

    pub fn split_scheme(&self) -> SplitScheme {
        match (self.split, &self.data) {
            (Some(s), _) => s,
            (None, Some(path)) => SplitScheme::for_path(path),
            (None, None) => SplitScheme::Standard,
        }
    }

    /// Explicit seed, else `PRFORMER_SEED`, else 0.
    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var("PRFORMER_SEED") {
            Ok(v) => v.trim().parse().map_err(|_| Error::config(format!("PRFORMER_SEED `{v}` is not an integer"))),
            Err(_) => Ok(0),
        }
    }

    /// Checks every field; returns pyramid warnings that do not prevent a run.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("lookback", self.lookback),
            ("pred_len", self.pred_len),
            ("e_layers", self.e_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff()),
            ("heads", self.heads),
            ("conv_channels", self.conv_channels),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads {} must divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature {} must be positive", self.temperature)));
        }
        if let Some(c) = self.clip_grad {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config(format!("clip_grad {c} must be positive")));
            }
        }
        if self.lookback < 2 {
            return Err(Error::config("lookback must be at least 2 for instance normalization"));
        }
        let pyramid = build_pyramid_config(&self.pyramidal_windows, self.lookback)?;
        hidden_sizes(self.d_model, pyramid.levels(), self.strict_dims)?;
        Ok(pyramid.warnings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_etth1_row() {
        let c = RunConfig::default();
        assert_eq!(c, RunConfig::preset("etth1").unwrap());
        assert_eq!((c.lookback, c.e_layers, c.d_model, c.batch_size), (720, 5, 720, 256));
        assert_eq!(c.pyramidal_windows, [24, 48, 72, 144]);
        assert_eq!((c.dropout, c.lr), (0.1, 1e-3));
        assert_eq!(c.d_ff(), 1440);
        assert_eq!(c.validate().unwrap().len(), 1);
    }

    #[test]
    fn every_preset_validates() {
        for name in RunConfig::preset_names() {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(RunConfig::preset("solar").is_err());
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = RunConfig { seed: Some(3), variant: Variant::V2, split: Some(SplitScheme::Ett), ..Default::default() };
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);

        let c = RunConfig::from_json(r#"{"lookback": 96, "pyramidal_windows": [4, 8], "variant": "v3", "split": "7:1:2"}"#).unwrap();
        assert_eq!((c.lookback, c.variant, c.split), (96, Variant::V3, Some(SplitScheme::Standard)));
        assert_eq!(c.d_model, 720);
        assert!(RunConfig::from_json(r#"{"lookbak": 96}"#).is_err());
    }

    #[test]
    fn validation_errors() {
        let ok = RunConfig::default();
        for bad in [
            RunConfig { heads: 7, ..ok.clone() },
            RunConfig { lookback: 100, ..ok.clone() },
            RunConfig { pyramidal_windows: vec![48, 24], ..ok.clone() },
            RunConfig { dropout: 1.0, ..ok.clone() },
            RunConfig { lr: 0.0, ..ok.clone() },
            RunConfig { temperature: -1.0, ..ok.clone() },
            RunConfig { batch_size: 0, ..ok.clone() },
            RunConfig { d_model: 722, heads: 2, strict_dims: true, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
        assert!(RunConfig { d_model: 722, heads: 2, ..ok }.validate().is_ok());
    }

    #[test]
    fn split_scheme_follows_file_name() {
        let c = RunConfig { data: Some("x/ETTh2.csv".into()), ..Default::default() };
        assert_eq!(c.split_scheme(), SplitScheme::Ett);
        let c = RunConfig { data: Some("x/weather.csv".into()), ..Default::default() };
        assert_eq!(c.split_scheme(), SplitScheme::Standard);
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("V2".parse::<Variant>().unwrap(), Variant::V2);
        assert!("v4".parse::<Variant>().is_err());
    }
}
