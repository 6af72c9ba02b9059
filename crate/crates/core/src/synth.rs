//! Seeded synthetic datasets.
//!
//! * `cls3` — three classes cycling sine, square and sawtooth waves with a
//!   random period in [8, 24], phase, amplitude in [0.5, 2] and Gaussian
//!   noise (σ = 0.1). Label `i % 3` for series `i`.
//! * `ar2` — AR(2) processes `x_t = a1·x_{t-1} + a2·x_{t-2} + ε_t` with
//!   `a1 ~ U(0.6, 1.0)`, `a2 ~ U(-0.6, -0.4)`, `ε ~ N(0, 1)` after a burn-in
//!   of 100 steps. The target is the next `horizon` values.

use std::f32::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLS3_SERIES: usize = 375;
pub const CLS3_LEN: usize = 64;
pub const AR2_SERIES: usize = 375;
pub const AR2_LEN: usize = 64;
pub const CLASS_NAMES: [&str; 3] = ["sine", "square", "sawtooth"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Cls3,
    Ar2,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls3" => Ok(Self::Cls3),
            "ar2" => Ok(Self::Ar2),
            other => Err(Error::Usage(format!(
                "unknown suite `{other}`, expected cls3 or ar2"
            ))),
        }
    }
}

/// The shipped default size of each suite.
pub fn generate(suite: Suite, seed: u64) -> Result<Vec<TimeSeries>> {
    match suite {
        Suite::Cls3 => cls3(CLS3_SERIES, CLS3_LEN, seed),
        Suite::Ar2 => ar2(AR2_SERIES, AR2_LEN, 1, seed),
    }
}

pub fn cls3(n: usize, len: usize, seed: u64) -> Result<Vec<TimeSeries>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.1).expect("valid sigma");
    (0..n)
        .map(|i| {
            let class = i % 3;
            let period: f32 = rng.random_range(8.0..24.0);
            let phase: f32 = rng.random_range(0.0..1.0);
            let amp: f32 = rng.random_range(0.5..2.0);
            let values = (0..len)
                .map(|t| {
                    let u = (t as f32 / period + phase).fract();
                    let clean = match class {
                        0 => (2.0 * PI * u).sin(),
                        1 => {
                            if u < 0.5 {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                        _ => 2.0 * u - 1.0,
                    };
                    amp * clean + noise.sample(&mut rng)
                })
                .collect();
            TimeSeries::univariate(values, Some(class))
        })
        .collect()
}

pub fn ar2(n: usize, len: usize, horizon: usize, seed: u64) -> Result<Vec<TimeSeries>> {
    if horizon == 0 {
        return Err(Error::Parameter("horizon must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0f32, 1.0).expect("valid sigma");
    const BURN_IN: usize = 100;
    (0..n)
        .map(|_| {
            let a1: f32 = rng.random_range(0.6..1.0);
            let a2: f32 = rng.random_range(-0.6..-0.4);
            let (mut x1, mut x2) = (0.0f32, 0.0f32);
            let mut all = Vec::with_capacity(len + horizon);
            for t in 0..BURN_IN + len + horizon {
                let x = a1 * x1 + a2 * x2 + eps.sample(&mut rng);
                x2 = x1;
                x1 = x;
                if t >= BURN_IN {
                    all.push(x);
                }
            }
            let target = all.split_off(len);
            TimeSeries::new(
                Tensor::new(vec![1, len], all)?,
                None,
                Some(Tensor::new(vec![1, horizon], target)?),
            )
        })
        .collect()
}

/// MSE of repeating each series' last value over its target horizon.
pub fn persistence_mse(series: &[TimeSeries]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in series {
        let target = s
            .target
            .as_ref()
            .ok_or_else(|| Error::Eval("series has no forecasting target".into()))?;
        let t = s.len();
        for ch in 0..s.channels() {
            let last = f64::from(s.values.row(ch)[t - 1]);
            for &y in target.row(ch) {
                sum += (f64::from(y) - last).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Eval("empty dataset".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cls3_shape_and_labels() {
        let ds = cls3(9, 32, 0).unwrap();
        assert_eq!(ds.len(), 9);
        for (i, s) in ds.iter().enumerate() {
            assert_eq!(s.label, Some(i % 3));
            assert_eq!(s.values.dims(), &[1, 32]);
            let peak = s.values.data().iter().fold(0.0f32, |a, &v| a.max(v.abs()));
            assert!(peak < 2.6);
        }
        assert_eq!(cls3(9, 32, 0).unwrap(), ds);
        assert_ne!(cls3(9, 32, 1).unwrap(), ds);
    }

    #[test]
    fn ar2_targets_and_baseline() {
        let ds = ar2(200, 40, 2, 3).unwrap();
        assert_eq!(ds[0].target.as_ref().unwrap().dims(), &[1, 2]);
        let p = persistence_mse(&ds).unwrap();
        // One-step persistence error is ~1.7 for the mid-range coefficients;
        // the two-step error is larger. Loose bounds only.
        assert!((1.0..6.0).contains(&p), "{p}");
    }

    #[test]
    fn persistence_of_constant_series_is_zero() {
        let s = TimeSeries::new(
            Tensor::full(&[1, 5], 2.0),
            None,
            Some(Tensor::full(&[1, 1], 2.0)),
        )
        .unwrap();
        assert_eq!(persistence_mse(&[s]).unwrap(), 0.0);
    }
}
