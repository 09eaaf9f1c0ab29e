//! Fixed model configuration shared by solver, simulator and estimator.

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::state::{AgeMode, NeighborPooling, StateSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Discount factor.
    pub beta: f64,
    /// Weight on the simulated-moment distance in the hybrid objective.
    pub lambda: f64,
    /// Sup-norm tolerance for a stand-alone value function solve.
    pub eps_vfi: f64,
    /// Tolerance used for solves inside the estimation loop, where the
    /// objective must be smooth at the optimizer's tolerance.
    pub eps_vfi_estimation: f64,
    pub max_vfi_iters: usize,
    /// Laplace smoothing for failure transitions.
    pub alpha: f64,
    pub dt_years: f64,
    pub age_mode: AgeMode,
    /// Simulated panels per moment evaluation.
    pub n_sims: usize,
    /// Periods per simulated panel.
    pub horizon: usize,
    pub pooling: NeighborPooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            beta: 0.9,
            lambda: 5.0,
            eps_vfi: 1e-4,
            eps_vfi_estimation: 1e-12,
            max_vfi_iters: 2000,
            alpha: 0.01,
            dt_years: 0.25,
            age_mode: AgeMode::CoarseStochastic,
            n_sims: 50,
            horizon: 13,
            pooling: NeighborPooling::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta < 1.0) {
            return Err(Error::invalid(format!("beta must be in [0, 1), got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eps_vfi > 0.0) || !(self.eps_vfi_estimation > 0.0) {
            return Err(Error::invalid("VFI tolerances must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.n_sims == 0 || self.horizon == 0 {
            return Err(Error::invalid("n_sims and horizon must be at least 1"));
        }
        self.state_spec().validate()
    }

    pub fn state_spec(&self) -> StateSpec {
        StateSpec {
            dt_years: self.dt_years,
            age_mode: self.age_mode,
            ..StateSpec::default()
        }
    }

    /// Overrides fields present in `kv`; unknown keys are ignored so that a
    /// single file can also carry parameters.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($field:expr, $key:literal) => {
                if let Some(v) = kv.get_parsed($key)? {
                    $field = v;
                }
            };
        }
        take!(self.beta, "beta");
        take!(self.lambda, "lambda");
        take!(self.eps_vfi, "eps_vfi");
        take!(self.eps_vfi_estimation, "eps_vfi_estimation");
        take!(self.max_vfi_iters, "max_vfi_iters");
        take!(self.alpha, "alpha");
        take!(self.dt_years, "dt_years");
        take!(self.age_mode, "age_mode");
        take!(self.n_sims, "n_sims");
        take!(self.horizon, "horizon");
        take!(self.pooling.p_nbr_by_cage, "pnbr_by_cage");
        take!(self.pooling.ef_cage_by_cage, "ef_by_cage");
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("beta", self.beta);
        kv.set("lambda", self.lambda);
        kv.set("eps_vfi", self.eps_vfi);
        kv.set("eps_vfi_estimation", self.eps_vfi_estimation);
        kv.set("max_vfi_iters", self.max_vfi_iters);
        kv.set("alpha", self.alpha);
        kv.set("dt_years", self.dt_years);
        kv.set("age_mode", self.age_mode);
        kv.set("n_sims", self.n_sims);
        kv.set("horizon", self.horizon);
        kv.set("pnbr_by_cage", self.pooling.p_nbr_by_cage);
        kv.set("ef_by_cage", self.pooling.ef_cage_by_cage);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let mut cfg = ModelConfig::default();
        assert_eq!(cfg.beta, 0.9);
        assert_eq!(cfg.lambda, 5.0);
        assert_eq!(cfg.max_vfi_iters, 2000);
        cfg.apply_kv(&KeyValues::parse("beta=0.5\nage_mode=fine_grid\ntheta_age=1\n").unwrap())
            .unwrap();
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.state_spec().n_states(), 252);

        let mut kv = KeyValues::new();
        cfg.write_kv(&mut kv);
        let mut back = ModelConfig::default();
        back.apply_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let cfg = ModelConfig {
            beta: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        assert!(cfg.apply_kv(&KeyValues::parse("n_sims=many").unwrap()).is_err());
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }
}
