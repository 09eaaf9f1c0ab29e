//! Value function iteration for the infinite-horizon replacement problem and
//! the resulting logit choice probabilities.
//!
//! The Bellman operator integrates the type-I extreme value shocks in closed
//! form:
//!
//! ```text
//! V'(s) = ln[ exp(u_keep(s) + β EV_keep(s)) + exp(u_replace + β EV_replace(s)) ]
//! ```
//!
//! No Euler–Mascheroni constant is added; it would shift `V` uniformly and
//! cancels in every choice probability. The solver evaluates `u_keep` at the
//! expected neighbor failure count, while [`PolicyTable::choice_probability`]
//! substitutes the observed count.

use std::fmt::Write as _;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::state::{enumerate_states, Decision, State, StateSpec, TransitionModel};
use crate::utility::{flow_utility_keep, flow_utility_replace, ModelParams};

/// Overflow-safe `ln(e^a + e^b)`.
pub fn logsumexp2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Numerically stable `1 / (1 + e^{-x})`.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-compressed sparse transition rows.
#[derive(Clone, Debug, PartialEq)]
struct SparseRows {
    start: Vec<usize>,
    col: Vec<usize>,
    prob: Vec<f64>,
}

impl SparseRows {
    fn from_rows(rows: &[Vec<(usize, f64)>]) -> Self {
        let mut start = Vec::with_capacity(rows.len() + 1);
        let mut col = Vec::new();
        let mut prob = Vec::new();
        start.push(0);
        for row in rows {
            for &(j, p) in row {
                col.push(j);
                prob.push(p);
            }
            start.push(col.len());
        }
        Self { start, col, prob }
    }

    #[inline]
    fn dot(&self, row: usize, v: &[f64]) -> f64 {
        let (a, b) = (self.start[row], self.start[row + 1]);
        self.col[a..b]
            .iter()
            .zip(&self.prob[a..b])
            .map(|(&j, &p)| p * v[j])
            .sum()
    }
}

/// Transition structure for both decisions, independent of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionKernel {
    n_states: usize,
    keep: SparseRows,
    replace: SparseRows,
}

impl TransitionKernel {
    pub fn from_model(trans: &TransitionModel) -> Self {
        let states = enumerate_states(trans.spec());
        let keep: Vec<_> = states.iter().map(|s| trans.next_states(s, Decision::Keep)).collect();
        let replace: Vec<_> = states.iter().map(|s| trans.next_states(s, Decision::Replace)).collect();
        Self {
            n_states: states.len(),
            keep: SparseRows::from_rows(&keep),
            replace: SparseRows::from_rows(&replace),
        }
    }

    /// Builds a kernel from explicit `(next_state, probability)` rows.
    /// Every row must be a probability distribution.
    pub fn from_rows(keep: &[Vec<(usize, f64)>], replace: &[Vec<(usize, f64)>]) -> Result<Self> {
        let n = keep.len();
        if replace.len() != n {
            return Err(Error::invalid("keep and replace rows differ in length"));
        }
        for row in keep.iter().chain(replace) {
            let total: f64 = row.iter().map(|&(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-12 || row.iter().any(|&(j, p)| j >= n || p < 0.0) {
                return Err(Error::invalid("transition row is not a distribution over the states"));
            }
        }
        Ok(Self {
            n_states: n,
            keep: SparseRows::from_rows(keep),
            replace: SparseRows::from_rows(replace),
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// `E[V(s') | s, d]`.
    pub fn expected(&self, state: usize, d: Decision, v: &[f64]) -> f64 {
        match d {
            Decision::Keep => self.keep.dot(state, v),
            Decision::Replace => self.replace.dot(state, v),
        }
    }
}

/// Expected continuation value straight from the transition model, mixing
/// `n_lag'` with the neighbor replacement probability.
pub fn continuation_value(s: &State, d: Decision, v: &[f64], trans: &TransitionModel) -> f64 {
    trans.next_states(s, d).iter().map(|&(j, p)| p * v[j]).sum()
}

/// Per-state flow utilities for a parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowUtilities {
    keep: Vec<f64>,
    replace: Vec<f64>,
}

impl FlowUtilities {
    pub fn new(keep: Vec<f64>, replace: Vec<f64>) -> Result<Self> {
        if keep.len() != replace.len() {
            return Err(Error::invalid("keep and replace utilities differ in length"));
        }
        if let Some(bad) = keep.iter().chain(&replace).find(|u| !u.is_finite()) {
            return Err(Error::NonFinite(format!("flow utility {bad}")));
        }
        Ok(Self { keep, replace })
    }

    /// Utilities on the state grid, with `f_cage` at its expected value.
    pub fn from_params(params: &ModelParams, trans: &TransitionModel) -> Result<Self> {
        params.validate()?;
        let spec = trans.spec();
        let states = enumerate_states(spec);
        let keep = states
            .iter()
            .map(|s| {
                flow_utility_keep(
                    spec.age_years(s.age_bin),
                    s.cage,
                    s.fail,
                    s.n_lag,
                    trans.ef_cage[s.cage],
                    &params.theta,
                    &params.gamma,
                )
            })
            .collect();
        let replace = vec![flow_utility_replace(&params.theta); states.len()];
        Self::new(keep, replace)
    }

    pub fn keep(&self) -> &[f64] {
        &self.keep
    }

    pub fn replace(&self) -> &[f64] {
        &self.replace
    }
}

/// One application of the Bellman operator.
pub fn bellman_update(v: &[f64], flows: &FlowUtilities, kernel: &TransitionKernel, beta: f64) -> Vec<f64> {
    (0..kernel.n_states)
        .map(|s| {
            let keep = flows.keep[s] + beta * kernel.keep.dot(s, v);
            let replace = flows.replace[s] + beta * kernel.replace.dot(s, v);
            logsumexp2(keep, replace)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunction {
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm change at the last iteration.
    pub delta: f64,
    pub converged: bool,
    /// Sup-norm change at every iteration.
    pub deltas: Vec<f64>,
}

/// Stopping rule for [`solve_vfi`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VfiSettings {
    pub beta: f64,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl VfiSettings {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            beta: cfg.beta,
            tolerance: cfg.eps_vfi,
            max_iters: cfg.max_vfi_iters,
        }
    }
}

/// Iterates the Bellman operator from `warm_start` (or zeros) until the
/// sup-norm change drops below the tolerance or the iteration cap is hit.
/// Hitting the cap is reported through `converged = false`.
pub fn solve_vfi(
    flows: &FlowUtilities,
    kernel: &TransitionKernel,
    settings: &VfiSettings,
    warm_start: Option<&[f64]>,
) -> Result<ValueFunction> {
    if !(0.0..1.0).contains(&settings.beta) {
        return Err(Error::invalid(format!("beta must be in [0, 1), got {}", settings.beta)));
    }
    let mut v = match warm_start {
        Some(w) if w.len() == kernel.n_states && w.iter().all(|x| x.is_finite()) => w.to_vec(),
        _ => vec![0.0; kernel.n_states],
    };
    let mut deltas = Vec::new();
    let mut converged = false;
    while deltas.len() < settings.max_iters {
        let next = bellman_update(&v, flows, kernel, settings.beta);
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        deltas.push(delta);
        if delta < settings.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "value function iteration stopped after {} iterations (delta {:.3e})",
            deltas.len(),
            deltas.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(ValueFunction {
        iterations: deltas.len(),
        delta: deltas.last().copied().unwrap_or(0.0),
        converged,
        deltas,
        values: v,
    })
}

/// Solved model: value function, choice-specific values and replacement
/// probabilities on the state grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    spec: StateSpec,
    params: ModelParams,
    beta: f64,
    ef_cage: [f64; 3],
    /// `E[V(s') | s, keep]` per state.
    pub ev_keep: Vec<f64>,
    /// `E[V(s') | s, replace]` per state.
    pub ev_replace: Vec<f64>,
    /// Choice-specific values at the expected neighbor failure count.
    pub v_keep: Vec<f64>,
    pub v_replace: Vec<f64>,
    /// `P(replace | s)` at the expected neighbor failure count.
    pub p_replace: Vec<f64>,
    pub value: ValueFunction,
}

impl PolicyTable {
    fn build(
        params: &ModelParams,
        trans: &TransitionModel,
        flows: &FlowUtilities,
        kernel: &TransitionKernel,
        beta: f64,
        value: ValueFunction,
    ) -> Self {
        let n = kernel.n_states;
        let ev_keep: Vec<f64> = (0..n).map(|s| kernel.keep.dot(s, &value.values)).collect();
        let ev_replace: Vec<f64> = (0..n).map(|s| kernel.replace.dot(s, &value.values)).collect();
        let v_keep: Vec<f64> = (0..n).map(|s| flows.keep[s] + beta * ev_keep[s]).collect();
        let v_replace: Vec<f64> = (0..n).map(|s| flows.replace[s] + beta * ev_replace[s]).collect();
        let p_replace = v_keep
            .iter()
            .zip(&v_replace)
            .map(|(k, r)| logistic(r - k))
            .collect();
        Self {
            spec: *trans.spec(),
            params: *params,
            beta,
            ef_cage: trans.ef_cage,
            ev_keep,
            ev_replace,
            v_keep,
            v_replace,
            p_replace,
            value,
        }
    }

    pub fn spec(&self) -> &StateSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Difference `v_replace - v_keep` with `f_cage` at its observed value.
    #[inline]
    pub fn replace_advantage(&self, s: &State, state_index: usize, f_cage_obs: u32) -> f64 {
        let theta = &self.params.theta;
        let u_keep = flow_utility_keep(
            self.spec.age_years(s.age_bin),
            s.cage,
            s.fail,
            s.n_lag,
            f64::from(f_cage_obs),
            theta,
            &self.params.gamma,
        );
        let v0 = u_keep + self.beta * self.ev_keep[state_index];
        let v1 = flow_utility_replace(theta) + self.beta * self.ev_replace[state_index];
        v1 - v0
    }

    /// `P(replace | s, f_cage_obs)` via the logistic of the value difference.
    pub fn choice_probability(&self, s: &State, f_cage_obs: u32) -> f64 {
        logistic(self.replace_advantage(s, self.spec.index(s), f_cage_obs))
    }

    /// Tab-separated table with one row per state.
    pub fn to_table(&self) -> String {
        let mut out = String::from("state\tage_bin\tcage\tfail\tn_lag\tv_keep\tv_replace\tp_replace\n");
        for (i, s) in enumerate_states(&self.spec).iter().enumerate() {
            let _ = writeln!(
                out,
                "{i}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.8}",
                s.age_bin,
                s.cage,
                u8::from(s.fail),
                u8::from(s.n_lag),
                self.v_keep[i],
                self.v_replace[i],
                self.p_replace[i]
            );
        }
        let _ = writeln!(
            out,
            "# iterations={} delta={:.3e} converged={} ef_cage={:?}",
            self.value.iterations, self.value.delta, self.value.converged, self.ef_cage
        );
        out
    }
}

/// Cached solver for repeated solves with one transition model.
#[derive(Clone, Debug)]
pub struct Solver {
    trans: TransitionModel,
    kernel: TransitionKernel,
    settings: VfiSettings,
}

impl Solver {
    pub fn new(trans: TransitionModel, settings: VfiSettings) -> Self {
        let kernel = TransitionKernel::from_model(&trans);
        Self {
            trans,
            kernel,
            settings,
        }
    }

    pub fn transitions(&self) -> &TransitionModel {
        &self.trans
    }

    pub fn settings(&self) -> &VfiSettings {
        &self.settings
    }

    pub fn with_settings(&self, settings: VfiSettings) -> Self {
        Self {
            settings,
            ..self.clone()
        }
    }

    pub fn solve(&self, params: &ModelParams, warm_start: Option<&[f64]>) -> Result<PolicyTable> {
        let flows = FlowUtilities::from_params(params, &self.trans)?;
        let value = solve_vfi(&flows, &self.kernel, &self.settings, warm_start)?;
        Ok(PolicyTable::build(params, &self.trans, &flows, &self.kernel, self.settings.beta, value))
    }
}

/// Solves the model once with the stand-alone tolerance from `cfg`.
pub fn solve_model(
    params: &ModelParams,
    trans: &TransitionModel,
    cfg: &ModelConfig,
    warm_start: Option<&[f64]>,
) -> Result<PolicyTable> {
    Solver::new(trans.clone(), VfiSettings::from_config(cfg)).solve(params, warm_start)
}
