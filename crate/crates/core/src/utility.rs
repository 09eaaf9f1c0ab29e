//! Structural and spatial parameters and per-period flow utilities.

use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Coefficients on own-unit characteristics, in utils.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StructuralParams {
    pub theta_age: f64,
    pub theta_cage1: f64,
    pub theta_cage2: f64,
    pub theta_fail: f64,
    pub theta_replace: f64,
}

/// Coordination coefficients, in utils. Negative values make replacement
/// more attractive when neighbors replaced last period or fail this period.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpatialParams {
    pub gamma_lag: f64,
    pub gamma_fail: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModelParams {
    pub theta: StructuralParams,
    pub gamma: SpatialParams,
}

/// Parameter names in vector order.
pub const PARAM_NAMES: [&str; 7] = [
    "theta_age",
    "theta_cage1",
    "theta_cage2",
    "theta_fail",
    "theta_replace",
    "gamma_lag",
    "gamma_fail",
];

impl ModelParams {
    pub fn new(theta: [f64; 5], gamma: [f64; 2]) -> Self {
        Self::from_slice(&[theta[0], theta[1], theta[2], theta[3], theta[4], gamma[0], gamma[1]])
    }

    /// Reads 5 (baseline, γ = 0) or 7 values in [`PARAM_NAMES`] order.
    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() == 5 || v.len() == 7, "expected 5 or 7 parameters, got {}", v.len());
        let g = |i: usize| v.get(i).copied().unwrap_or(0.0);
        Self {
            theta: StructuralParams {
                theta_age: v[0],
                theta_cage1: v[1],
                theta_cage2: v[2],
                theta_fail: v[3],
                theta_replace: v[4],
            },
            gamma: SpatialParams {
                gamma_lag: g(5),
                gamma_fail: g(6),
            },
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.theta.theta_age,
            self.theta.theta_cage1,
            self.theta.theta_cage2,
            self.theta.theta_fail,
            self.theta.theta_replace,
            self.gamma.gamma_lag,
            self.gamma.gamma_fail,
        ]
    }

    pub fn with_gamma(mut self, gamma: SpatialParams) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in PARAM_NAMES.iter().zip(self.to_vec()) {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name} = {v}")));
            }
        }
        Ok(())
    }

    /// Reads parameter keys from a key-value block. Missing γ keys default
    /// to zero; missing θ keys are an error.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut v = [0.0; 7];
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            v[i] = if i < 5 {
                kv.require(name)?
            } else {
                kv.get_parsed(name)?.unwrap_or(0.0)
            };
        }
        let p = Self::from_slice(&v);
        p.validate()?;
        Ok(p)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        for (name, v) in PARAM_NAMES.iter().zip(self.to_vec()) {
            kv.set(name, v);
        }
    }
}

/// Per-period utility of keeping the current unit.
///
/// `age_years` is the age grid value; `f_cage` may be fractional when the
/// solver passes the expected neighbor failure count.
pub fn flow_utility_keep(
    age_years: f64,
    cage: usize,
    fail: bool,
    n_lag: bool,
    f_cage: f64,
    theta: &StructuralParams,
    gamma: &SpatialParams,
) -> f64 {
    let cage_term = match cage {
        1 => theta.theta_cage1,
        2 => theta.theta_cage2,
        _ => 0.0,
    };
    theta.theta_age * age_years
        + cage_term
        + if fail { theta.theta_fail } else { 0.0 }
        + if n_lag { gamma.gamma_lag } else { 0.0 }
        + gamma.gamma_fail * f_cage
}

/// Per-period utility of replacing; the same in every state.
pub fn flow_utility_replace(theta: &StructuralParams) -> f64 {
    theta.theta_replace
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1_spatial() -> ModelParams {
        ModelParams::new([-0.031, -1.067, -1.463, -8.046, -7.832], [-0.793, -0.265])
    }

    #[test]
    fn zero_parameters_give_zero_utility() {
        let p = ModelParams::default();
        for cage in 0..3 {
            for fail in [false, true] {
                assert_eq!(flow_utility_keep(3.0, cage, fail, true, 4.0, &p.theta, &p.gamma), 0.0);
            }
        }
    }

    #[test]
    fn published_spatial_estimates() {
        let p = table1_spatial();
        let u = flow_utility_keep(2.0, 2, true, true, 2.0, &p.theta, &p.gamma);
        assert!((u - -10.894).abs() < 1e-12, "{u}");
        assert_eq!(flow_utility_replace(&p.theta), -7.832);
    }

    #[test]
    fn cool_cage_and_no_spatial_effect_is_normalized() {
        let p = table1_spatial().with_gamma(SpatialParams::default());
        assert_eq!(flow_utility_keep(0.0, 0, false, true, 3.0, &p.theta, &p.gamma), 0.0);
    }

    #[test]
    fn linear_in_gamma_fail() {
        let p = table1_spatial();
        let base = flow_utility_keep(1.0, 1, false, false, 0.0, &p.theta, &p.gamma);
        let one = flow_utility_keep(1.0, 1, false, false, 3.0, &p.theta, &p.gamma) - base;
        let mut doubled = p;
        doubled.gamma.gamma_fail *= 2.0;
        let two = flow_utility_keep(1.0, 1, false, false, 3.0, &doubled.theta, &doubled.gamma) - base;
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn kv_round_trip_and_defaults() {
        let mut kv = KeyValues::new();
        table1_spatial().write_kv(&mut kv);
        assert_eq!(ModelParams::from_kv(&kv).unwrap(), table1_spatial());

        let base = KeyValues::parse(
            "theta_age=-0.106\ntheta_cage1=-0.782\ntheta_cage2=-2.343\ntheta_fail=-6.972\ntheta_replace=-8.499\n",
        )
        .unwrap();
        let p = ModelParams::from_kv(&base).unwrap();
        assert_eq!(p.gamma, SpatialParams::default());
        assert!(ModelParams::from_kv(&KeyValues::parse("theta_age=1").unwrap()).is_err());
        assert!(ModelParams::from_kv(&KeyValues::parse(&base.to_string().replace("-8.499", "NaN")).unwrap()).is_err());
    }
}
