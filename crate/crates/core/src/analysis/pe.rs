//! Dot products of sinusoidal positional encodings.
//!
//! With `PE_t[2k] = sin(w_k t)` and `PE_t[2k+1] = cos(w_k t)`, where
//! `w_k = 10000^(-2k/d)`, the product `PE_t . PE_{t+dt}` collapses to
//! `sum_k cos(w_k dt)` and so does not depend on `t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest disagreement tolerated between the three quantities.
pub const PE_TOLERANCE: f64 = 1e-9;

pub fn frequencies(d_model: usize) -> Vec<f64> {
    (0..d_model / 2).map(|k| 10000f64.powf(-((2 * k) as f64) / d_model as f64)).collect()
}

pub fn positional_encoding(d_model: usize, t: u64) -> Result<Vec<f64>> {
    check_width(d_model)?;
    let t = t as f64;
    Ok(frequencies(d_model).into_iter().flat_map(|w| [(w * t).sin(), (w * t).cos()]).collect())
}

fn check_width(d_model: usize) -> Result<()> {
    if d_model == 0 || d_model % 2 == 1 {
        return Err(Error::invalid(format!("positional encodings need an even, positive d_model, got {d_model}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PeCheck {
    pub dot_t: f64,
    pub dot_s: f64,
    /// `sum_k cos(w_k dt)`
    pub reference: f64,
    pub max_deviation: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Compares `PE_t . PE_{t+dt}`, `PE_s . PE_{s+dt}` and the closed form.
///
/// Fails with a numeric error when they disagree by more than
/// [`PE_TOLERANCE`].
pub fn pe_dot_invariance(d_model: usize, t: u64, s: u64, dt: u64) -> Result<PeCheck> {
    let pe = |p: u64| positional_encoding(d_model, p);
    let dot_t = dot(&pe(t)?, &pe(t + dt)?);
    let dot_s = dot(&pe(s)?, &pe(s + dt)?);
    let reference: f64 = frequencies(d_model).iter().map(|w| (w * dt as f64).cos()).sum();
    let max_deviation = (dot_t - dot_s).abs().max((dot_t - reference).abs()).max((dot_s - reference).abs());
    let check = PeCheck { dot_t, dot_s, reference, max_deviation };
    if max_deviation > PE_TOLERANCE {
        return Err(Error::Numeric(format!(
            "d_model={d_model} t={t} s={s} dt={dt}: deviation {max_deviation:.3e} exceeds {PE_TOLERANCE:e}"
        )));
    }
    Ok(check)
}

#[derive(Clone, Debug, Serialize)]
pub struct PeSummary {
    pub trials: usize,
    pub max_deviation: f64,
    /// the draw with the largest deviation: `(d_model, t, s, dt)`
    pub worst: (usize, u64, u64, u64),
}

/// Random draws of positions and offsets below 10 000. `d_model` is drawn
/// from the even numbers in `2..=512` unless fixed.
pub fn pe_random_trials(trials: usize, d_model: Option<usize>, seed: u64) -> Result<PeSummary> {
    if let Some(d) = d_model {
        check_width(d)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = PeSummary { trials, max_deviation: 0.0, worst: (0, 0, 0, 0) };
    for _ in 0..trials {
        let d = d_model.unwrap_or_else(|| 2 * rng.random_range(1..=256));
        let (t, s, dt) = (rng.random_range(0..10_000), rng.random_range(0..10_000), rng.random_range(0..10_000));
        let check = pe_dot_invariance(d, t, s, dt)?;
        if check.max_deviation >= summary.max_deviation {
            summary.max_deviation = check.max_deviation;
            summary.worst = (d, t, s, dt);
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn zero_offset_gives_half_the_width() {
        for d in [2, 8, 64, 512] {
            for t in [0, 1, 77, 9999] {
                let c = pe_dot_invariance(d, t, 3, 0).unwrap();
                assert!((c.dot_t - d as f64 / 2.0).abs() < 1e-12);
                assert_eq!(c.reference, d as f64 / 2.0);
            }
        }
    }

    #[test]
    fn four_wide_unit_offset() {
        // frequencies 1 and 1/100
        let c = pe_dot_invariance(4, 0, 11, 1).unwrap();
        assert!((c.reference - 1.540_252_306_284_805).abs() < 1e-15);
        assert!((c.dot_s - 1.540_252_306_284_805).abs() < 1e-12);
    }

    #[test]
    fn distant_positions_agree() {
        let c = pe_dot_invariance(64, 5, 300, 7).unwrap();
        assert!((c.dot_t - c.dot_s).abs() < 1e-9);
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(pe_dot_invariance(7, 0, 0, 1).is_err());
        assert!(positional_encoding(0, 1).is_err());
        assert!(pe_random_trials(10, Some(9), 0).is_err());
    }

    #[test]
    fn encoding_layout() {
        let pe = positional_encoding(4, 2).unwrap();
        assert_eq!(pe, vec![2f64.sin(), 2f64.cos(), 0.02f64.sin(), 0.02f64.cos()]);
    }

    #[test]
    fn a_thousand_random_draws() {
        let s = pe_random_trials(1000, None, 42).unwrap();
        assert!(s.max_deviation < PE_TOLERANCE, "{s:?}");
    }

    proptest! {
        #[test]
        fn independent_of_absolute_position(k in 1usize..128, t in 0u64..20_000, s in 0u64..20_000, dt in 0u64..5_000) {
            let c = pe_dot_invariance(2 * k, t, s, dt).unwrap();
            prop_assert!(c.max_deviation < PE_TOLERANCE);
        }
    }
}
