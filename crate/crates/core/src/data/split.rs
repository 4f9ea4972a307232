use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chronological train/val/test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitScheme {
    /// 6:2:2, used for the ETT family
    #[serde(rename = "6:2:2")]
    Ett,
    /// 7:1:2, everything else
    #[serde(rename = "7:1:2")]
    Standard,
}

impl SplitScheme {
    /// Parts out of ten for (train, val).
    fn tenths(self) -> (usize, usize) {
        match self {
            SplitScheme::Ett => (6, 2),
            SplitScheme::Standard => (7, 1),
        }
    }

    /// 6:2:2 for files named `ETT*`, 7:1:2 otherwise.
    pub fn for_path(path: impl AsRef<Path>) -> Self {
        let name = path.as_ref().file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.to_ascii_uppercase().starts_with("ETT") {
            SplitScheme::Ett
        } else {
            SplitScheme::Standard
        }
    }
}

impl FromStr for SplitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "6:2:2" => Ok(SplitScheme::Ett),
            "7:1:2" => Ok(SplitScheme::Standard),
            other => Err(Error::config(format!("unknown split scheme `{other}` (expected 6:2:2 or 7:1:2)"))),
        }
    }
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitScheme::Ett => "6:2:2",
            SplitScheme::Standard => "7:1:2",
        })
    }
}

/// Row counts of the three splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// `train = floor(r_train n)`, `val = floor(r_val n)`, test takes the rest.
pub fn split_sizes(n: usize, scheme: SplitScheme) -> SplitSizes {
    let (tr, va) = scheme.tenths();
    let train = n * tr / 10;
    let val = n * va / 10;
    SplitSizes { train, val, test: n - train - val }
}

/// Row ranges that windows of each split are drawn from.
///
/// A window's target always lies inside its own split. Unless `strict`, the
/// validation and test ranges start `lookback` rows early so their first
/// target begins right at the split border.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub sizes: SplitSizes,
}

pub fn split(n: usize, scheme: SplitScheme, lookback: usize, horizon: usize, strict: bool) -> Result<Splits> {
    let sizes = split_sizes(n, scheme);
    let val_end = sizes.train + sizes.val;
    let back = |border: usize| if strict { border } else { border.saturating_sub(lookback) };
    let splits = Splits {
        train: 0..sizes.train,
        val: back(sizes.train)..val_end,
        test: back(val_end)..n,
        sizes,
    };
    let need = lookback + horizon;
    for (name, r) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if r.len() < need {
            return Err(Error::data(format!(
                "{n} rows split {scheme} leave {} rows for {name}, fewer than lookback + horizon = {need}",
                r.len()
            )));
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_from_dataset_lengths() {
        assert_eq!(split_sizes(17_420, SplitScheme::Ett), SplitSizes { train: 10_452, val: 3_484, test: 3_484 });
        assert_eq!(split_sizes(26_304, SplitScheme::Standard), SplitSizes { train: 18_412, val: 2_630, test: 5_262 });
        assert_eq!(split_sizes(10, SplitScheme::Ett), SplitSizes { train: 6, val: 2, test: 2 });
    }

    #[test]
    fn border_context() {
        let s = split(17_420, SplitScheme::Ett, 720, 96, false).unwrap();
        assert_eq!(s.train, 0..10_452);
        assert_eq!(s.val, 9_732..13_936);
        assert_eq!(s.test, 13_216..17_420);
        let s = split(17_420, SplitScheme::Ett, 720, 96, true).unwrap();
        assert_eq!(s.val, 10_452..13_936);
        assert_eq!(s.test, 13_936..17_420);
    }

    #[test]
    fn too_short_for_a_window() {
        assert!(split(1000, SplitScheme::Ett, 100, 101, true).is_err());
        assert!(split(1000, SplitScheme::Ett, 100, 101, false).is_ok());
        assert!(split(10, SplitScheme::Ett, 1, 1, true).is_ok());
        assert!(split(10, SplitScheme::Ett, 2, 1, true).is_err());
    }

    #[test]
    fn scheme_parsing_and_detection() {
        assert_eq!("6:2:2".parse::<SplitScheme>().unwrap(), SplitScheme::Ett);
        assert_eq!(SplitScheme::Standard.to_string(), "7:1:2");
        assert!("5:5".parse::<SplitScheme>().is_err());
        assert_eq!(SplitScheme::for_path("data/ETTm2.csv"), SplitScheme::Ett);
        assert_eq!(SplitScheme::for_path("data/electricity.csv"), SplitScheme::Standard);
    }
}
