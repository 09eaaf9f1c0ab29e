//! Panel log-likelihood of observed decisions under a solved policy.
//!
//! Observations are collapsed into cells sharing `(state, f_cage)`; each
//! cell contributes `n_replace·ln P + n_keep·ln(1 − P)`. Cell terms are
//! reduced with pairwise summation in a fixed order, so the result does not
//! depend on thread count or on how the panel was produced.

use std::collections::BTreeMap;

use crate::dp::{PolicyTable, Solver};
use crate::error::{Error, Result};
use crate::panel::EnrichedPanel;
use crate::state::{State, StateSpec};
use crate::utility::ModelParams;

/// Lower clamp on predicted probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Pairwise (cascade) summation; error grows as O(log n) rather than O(n).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Bernoulli log-probability of decision `d` when `P(d = 1) = p`, clamped.
#[inline]
pub fn bernoulli_log_prob(p: f64, d: bool) -> f64 {
    let p = clamp_prob(p);
    if d {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

/// Decision counts for one `(state, f_cage)` combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChoiceCell {
    pub state_index: usize,
    pub state: State,
    pub f_cage: u32,
    pub n_keep: u64,
    pub n_replace: u64,
}

/// The panel's decisions grouped by likelihood-relevant covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceCells {
    spec: StateSpec,
    cells: Vec<ChoiceCell>,
    n_obs: u64,
}

impl ChoiceCells {
    pub fn from_panel(panel: &EnrichedPanel, spec: &StateSpec) -> Result<Self> {
        if panel.is_empty() {
            return Err(Error::EmptySample("log-likelihood of an empty panel".into()));
        }
        let mut map: BTreeMap<(usize, u32), [u64; 2]> = BTreeMap::new();
        for r in panel.records() {
            let state = State {
                age_bin: spec.age_bin_of_quarters(r.age_quarters),
                cage: usize::from(r.cage_pos),
                fail: r.fail,
                n_lag: r.n_lag,
            };
            map.entry((spec.index(&state), r.f_cage)).or_default()[usize::from(r.replace)] += 1;
        }
        let cells = map
            .into_iter()
            .map(|((state_index, f_cage), [n_keep, n_replace])| ChoiceCell {
                state_index,
                state: spec.decode(state_index),
                f_cage,
                n_keep,
                n_replace,
            })
            .collect();
        Ok(Self {
            spec: *spec,
            cells,
            n_obs: panel.len() as u64,
        })
    }

    /// Wraps precomputed cells.
    pub fn from_parts(spec: StateSpec, cells: Vec<ChoiceCell>) -> Self {
        let n_obs = cells.iter().map(|c| c.n_keep + c.n_replace).sum();
        Self { spec, cells, n_obs }
    }

    pub fn cells(&self) -> &[ChoiceCell] {
        &self.cells
    }

    pub fn spec(&self) -> &StateSpec {
        &self.spec
    }

    pub fn n_obs(&self) -> u64 {
        self.n_obs
    }

    pub fn n_replace(&self) -> u64 {
        self.cells.iter().map(|c| c.n_replace).sum()
    }
}

/// Log-likelihood of the grouped decisions under `policy`, using each
/// cell's observed `f_cage`.
pub fn log_likelihood_cells(policy: &PolicyTable, cells: &ChoiceCells) -> f64 {
    let terms: Vec<f64> = cells
        .cells
        .iter()
        .map(|c| {
            let p = clamp_prob(logistic_advantage(policy, c));
            let mut t = 0.0;
            if c.n_replace > 0 {
                t += c.n_replace as f64 * p.ln();
            }
            if c.n_keep > 0 {
                t += c.n_keep as f64 * (1.0 - p).ln();
            }
            t
        })
        .collect();
    pairwise_sum(&terms)
}

#[inline]
fn logistic_advantage(policy: &PolicyTable, c: &ChoiceCell) -> f64 {
    crate::dp::logistic(policy.replace_advantage(&c.state, c.state_index, c.f_cage))
}

/// Log-likelihood of `panel` under a solved policy.
pub fn log_likelihood_with_policy(policy: &PolicyTable, panel: &EnrichedPanel) -> Result<f64> {
    Ok(log_likelihood_cells(policy, &ChoiceCells::from_panel(panel, policy.spec())?))
}

/// Solves the model at `params` and evaluates the log-likelihood of `panel`.
pub fn log_likelihood(params: &ModelParams, panel: &EnrichedPanel, solver: &Solver) -> Result<f64> {
    let policy = solver.solve(params, None)?;
    log_likelihood_with_policy(&policy, panel)
}

/// Constant-probability Bernoulli log-likelihood at the empirical rate.
/// Returns 0 (with a warning) when every decision is the same.
pub fn null_log_likelihood_counts(n_replace: u64, n: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptySample("null log-likelihood of an empty panel".into()));
    }
    let n0 = n - n_replace;
    if n_replace == 0 || n0 == 0 {
        log::warn!("null model is degenerate: all {n} decisions identical");
        return Ok(0.0);
    }
    let p = n_replace as f64 / n as f64;
    Ok(n_replace as f64 * p.ln() + n0 as f64 * (1.0 - p).ln())
}

pub fn null_log_likelihood(panel: &EnrichedPanel) -> Result<f64> {
    let n1 = panel.records().iter().filter(|r| r.replace).count() as u64;
    null_log_likelihood_counts(n1, panel.len() as u64)
}

/// `1 − ll / ll_null`.
pub fn pseudo_r2(ll: f64, ll_null: f64) -> f64 {
    1.0 - ll / ll_null
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitStats {
    pub log_likelihood: f64,
    pub n_obs: u64,
    pub n_params: usize,
    pub ll_null: f64,
    pub pseudo_r2: f64,
}

impl FitStats {
    pub fn new(log_likelihood: f64, ll_null: f64, n_obs: u64, n_params: usize) -> Self {
        Self {
            log_likelihood,
            n_obs,
            n_params,
            ll_null,
            pseudo_r2: pseudo_r2(log_likelihood, ll_null),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::dp::VfiSettings;
    use crate::panel::{enrich, tests::rec, Panel};
    use crate::state::TransitionModel;

    fn toy_panel() -> EnrichedPanel {
        let mut recs = Vec::new();
        for (i, loc) in ["a", "b", "c", "d", "e"].iter().enumerate() {
            for t in 0..2 {
                let fail = (i + t as usize) % 3 == 0;
                let replace = fail && t == 0 || i == 4 && t == 1;
                recs.push(rec(loc, t, 1, (i % 3) as u8, fail, replace));
            }
        }
        enrich(&Panel::from_records(recs).unwrap())
    }

    fn solver() -> Solver {
        let tm = TransitionModel::from_fail_probabilities(
            &StateSpec::default(),
            |a, _, f| if f { 0.5 } else { 0.05 + 0.02 * a as f64 },
            [0.3; 3],
            [0.5; 3],
        )
        .unwrap();
        Solver::new(tm, VfiSettings::from_config(&ModelConfig::default()))
    }

    fn params() -> ModelParams {
        ModelParams::new([-0.031, -1.067, -1.463, -8.046, -7.832], [-0.793, -0.265])
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_inputs() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-10);
        assert_eq!(pairwise_sum(&[]), 0.0);
        let tiny = vec![0.1; 1 << 16];
        assert!((pairwise_sum(&tiny) - 6553.6).abs() < 1e-9);
    }

    #[test]
    fn single_coin_flip() {
        assert!((bernoulli_log_prob(0.5, true) - -0.693147).abs() < 1e-6);
        assert_eq!(bernoulli_log_prob(0.0, true), PROB_FLOOR.ln());
        assert!(bernoulli_log_prob(1.0, true) < 0.0);
    }

    #[test]
    fn matches_per_row_summation() {
        let panel = toy_panel();
        let s = solver();
        let policy = s.solve(&params(), None).unwrap();
        let spec = *policy.spec();
        let direct: f64 = panel
            .records()
            .iter()
            .map(|r| {
                let st = State {
                    age_bin: spec.age_bin_of_quarters(r.age_quarters),
                    cage: r.cage_pos as usize,
                    fail: r.fail,
                    n_lag: r.n_lag,
                };
                bernoulli_log_prob(policy.choice_probability(&st, r.f_cage), r.replace)
            })
            .sum();
        let ll = log_likelihood(&params(), &panel, &s).unwrap();
        assert!(ll < 0.0);
        assert!((ll - direct).abs() < 1e-10, "{ll} vs {direct}");
    }

    #[test]
    fn additive_over_duplicated_observations() {
        let panel = toy_panel();
        let policy = solver().solve(&params(), None).unwrap();
        let one = log_likelihood_with_policy(&policy, &panel).unwrap();
        let mut cells = ChoiceCells::from_panel(&panel, policy.spec()).unwrap();
        for c in &mut cells.cells {
            c.n_keep *= 3;
            c.n_replace *= 3;
        }
        assert!((log_likelihood_cells(&policy, &cells) - 3.0 * one).abs() < 1e-10);
    }

    #[test]
    fn empty_panel_is_an_error() {
        let empty = toy_panel().restrict_window(100, 200);
        assert!(log_likelihood(&params(), &empty, &solver()).is_err());
        assert!(null_log_likelihood(&empty).is_err());
    }

    #[test]
    fn null_model_values() {
        assert!((null_log_likelihood_counts(1, 2).unwrap() - -1.386294).abs() < 1e-6);
        assert!((null_log_likelihood_counts(50, 100).unwrap() + 100.0 * 2f64.ln()).abs() < 1e-9);
        assert_eq!(null_log_likelihood_counts(0, 10).unwrap(), 0.0);
        assert_eq!(null_log_likelihood_counts(10, 10).unwrap(), 0.0);
        // Order of magnitude at the published sample size and rate.
        let n = 147_078u64;
        let n1 = (0.0274 * n as f64).round() as u64;
        let ll0 = null_log_likelihood_counts(n1, n).unwrap();
        assert!((ll0 / -18_492.39 - 1.0).abs() < 0.01, "{ll0}");
    }

    #[test]
    fn pseudo_r2_values() {
        assert!((pseudo_r2(-6123.75, -18492.39) - 0.66885).abs() < 1e-5);
        assert!((pseudo_r2(-6466.44, -18492.39) - 0.65032).abs() < 1e-5);
        assert_eq!(pseudo_r2(-10.0, -10.0), 0.0);
        let fs = FitStats::new(-6123.75, -18492.39, 147_078, 7);
        assert!((fs.pseudo_r2 - 0.669).abs() < 5e-4);
    }
}
