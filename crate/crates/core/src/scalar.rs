//! Floating-point abstraction shared by every numerical module.
//!
//! All estimation code is written against [`Scalar`], so the same filters,
//! fitters and metrics run in `f32` or `f64`. Sampling always happens in `f64`
//! and is narrowed afterwards, which keeps seeded runs identical across the
//! two precisions up to rounding.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar usable by the estimation code: `f32` or `f64`.
pub trait Scalar:
    RealField
    + Copy
    + FromPrimitive
    + ToPrimitive
    + Serialize
    + DeserializeOwned
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal, saturating to the representable range.
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal not representable")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn of_count(n: usize) -> Self {
        Self::lit(n as f64)
    }

    fn is_finite_value(self) -> bool {
        self.as_f64().is_finite()
    }

    /// Draws from `N(0, 1)`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::lit(rng.sample::<f64, _>(StandardNormal))
    }

    /// Draws from `U[0, 1)`.
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::lit(rng.random::<f64>())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `ln Σ exp(x_i)`; returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<S: Scalar>(values: &[S]) -> S {
    let max = values
        .iter()
        .copied()
        .fold(S::lit(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
    if !max.is_finite_value() {
        return max;
    }
    let sum = values
        .iter()
        .fold(S::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let v = [0.1_f64, -2.0, 3.5];
        let direct: f64 = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-12);
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn lit_round_trips_in_both_precisions() {
        assert_eq!(<f32 as Scalar>::lit(0.5), 0.5_f32);
        assert_eq!(<f64 as Scalar>::lit(0.25).as_f64(), 0.25);
    }
}
