//! Nested fixed-point estimation with a simulated-moment penalty.
//!
//! The objective is `−LL(θ, γ) + λ·D(θ, γ)`, where `D` is the squared
//! distance between data moments and moments averaged over simulated
//! panels. Simulation seeds are fixed for a whole run (common random
//! numbers) and each value-function solve is warm-started from the last
//! converged one.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::dp::{logistic, Solver, VfiSettings};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::likelihood::{log_likelihood_cells, null_log_likelihood_counts, ChoiceCells};
use crate::moments::{average_moments, compute_moments, msm_distance_available, MomentVector};
use crate::optim::{column_std_dev, hessian_step, invert_hessian, nelder_mead, numerical_hessian, NelderMeadOptions};
use crate::panel::{EnrichedPanel, EnrichedRecord, Position};
use crate::rng::Stream;
use crate::simulate::{simulate_moments, InitialCrossSection, SimConfig};
use crate::state::{estimate_failure_transitions, TransitionModel};
use crate::utility::{ModelParams, PARAM_NAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// θ only, γ fixed at zero, pure likelihood.
    Baseline,
    /// θ and γ, hybrid objective.
    Spatial,
}

impl Mode {
    pub fn n_params(self) -> usize {
        match self {
            Mode::Baseline => 5,
            Mode::Spatial => 7,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        &PARAM_NAMES[..self.n_params()]
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Spatial => "spatial",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "spatial" => Ok(Mode::Spatial),
            _ => Err(Error::invalid(format!("unknown mode {s:?} (expected baseline or spatial)"))),
        }
    }
}

/// Everything the objective needs from a prepared panel.
#[derive(Clone, Debug)]
pub struct EstimationData {
    pub panel: EnrichedPanel,
    pub transitions: TransitionModel,
    pub cells: ChoiceCells,
    pub init: InitialCrossSection,
    pub data_moments: MomentVector,
    /// Periods per simulated panel: the length of the panel's window.
    pub horizon: usize,
    pub ll_null: f64,
}

impl EstimationData {
    /// Estimates transitions and data moments from a filtered, enriched
    /// panel. Simulations start from the panel's first period.
    pub fn new(panel: EnrichedPanel, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (t0, t1) = panel
            .period_range()
            .ok_or_else(|| Error::EmptySample("estimation panel is empty".into()))?;
        let spec = cfg.state_spec();
        let transitions = estimate_failure_transitions(&panel, &spec, cfg.alpha, cfg.pooling)?;
        let cells = ChoiceCells::from_panel(&panel, &spec)?;
        let ll_null = null_log_likelihood_counts(cells.n_replace(), cells.n_obs())?;
        Ok(Self {
            init: InitialCrossSection::from_panel(&panel, t0)?,
            data_moments: compute_moments(&panel),
            horizon: (t1 - t0 + 1) as usize,
            transitions,
            cells,
            ll_null,
            panel,
        })
    }

    pub fn n_obs(&self) -> u64 {
        self.cells.n_obs()
    }
}

/// `−LL + λ·D`.
pub fn combine_objective(log_likelihood: f64, distance: f64, lambda: f64) -> f64 {
    -log_likelihood + lambda * distance
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub log_likelihood: f64,
    /// `None` when moments were not simulated (λ = 0 in the search).
    pub distance: Option<f64>,
    pub sim_moments: Option<MomentVector>,
    pub vfi_converged: bool,
}

/// The hybrid objective with its warm-start cache.
pub struct HybridObjective<'a> {
    data: &'a EstimationData,
    solver: Solver,
    lambda: f64,
    sim: SimConfig,
    warm: Option<Vec<f64>>,
    /// Evaluations whose value-function solve hit the iteration cap.
    pub non_converged: usize,
}

impl<'a> HybridObjective<'a> {
    pub fn new(data: &'a EstimationData, cfg: &ModelConfig, lambda: f64, seed: u64) -> Self {
        let settings = VfiSettings {
            beta: cfg.beta,
            tolerance: cfg.eps_vfi_estimation,
            max_iters: cfg.max_vfi_iters,
        };
        Self {
            data,
            solver: Solver::new(data.transitions.clone(), settings),
            lambda,
            sim: SimConfig {
                n_sims: cfg.n_sims,
                horizon: data.horizon,
                seed,
            },
            warm: None,
            non_converged: 0,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Evaluates the objective, simulating moments only when λ > 0.
    pub fn evaluate(&mut self, params: &ModelParams) -> Result<ObjectiveValue> {
        self.evaluate_inner(params, self.lambda > 0.0)
    }

    /// Evaluates the objective and always reports the moment distance.
    pub fn evaluate_full(&mut self, params: &ModelParams) -> Result<ObjectiveValue> {
        self.evaluate_inner(params, true)
    }

    fn evaluate_inner(&mut self, params: &ModelParams, with_moments: bool) -> Result<ObjectiveValue> {
        let policy = self.solver.solve(params, self.warm.as_deref())?;
        let vfi_converged = policy.value.converged;
        if vfi_converged {
            self.warm = Some(policy.value.values.clone());
        } else {
            self.non_converged += 1;
            log::warn!("objective evaluated at an unconverged value function");
        }
        let ll = log_likelihood_cells(&policy, &self.data.cells);
        let (distance, sim_moments) = if with_moments {
            let draws = simulate_moments(&policy, &self.data.transitions, &self.data.init, &self.sim)?;
            let sim = average_moments(&draws);
            (Some(msm_distance_available(&self.data.data_moments, &sim)), Some(sim))
        } else {
            (None, None)
        };
        Ok(ObjectiveValue {
            objective: combine_objective(ll, distance.unwrap_or(0.0), self.lambda),
            log_likelihood: ll,
            distance,
            sim_moments,
            vfi_converged,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationSettings {
    pub mode: Mode,
    /// Master seed for the simulated moments.
    pub seed: u64,
    pub optimizer: NelderMeadOptions,
}

impl EstimationSettings {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            optimizer: NelderMeadOptions::default(),
        }
    }

    /// Baseline fits are pure likelihood regardless of the configured λ.
    pub fn effective_lambda(&self, cfg: &ModelConfig) -> f64 {
        match self.mode {
            Mode::Baseline => 0.0,
            Mode::Spatial => cfg.lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationResult {
    pub mode: Mode,
    pub params: ModelParams,
    pub start: ModelParams,
    /// `−LL + λ·D` at `params`.
    pub objective: f64,
    pub log_likelihood: f64,
    pub distance: f64,
    pub lambda: f64,
    pub ll_null: f64,
    pub n_obs: u64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub elapsed_secs: f64,
    pub data_moments: MomentVector,
    pub sim_moments: MomentVector,
    pub seed: u64,
}

impl EstimationResult {
    pub fn n_params(&self) -> usize {
        self.mode.n_params()
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("mode", self.mode);
        self.params.write_kv(&mut kv);
        kv.set("log_likelihood", self.log_likelihood);
        kv.set("ll_null", self.ll_null);
        kv.set("n_obs", self.n_obs);
        kv.set("n_params", self.n_params());
        kv.set("objective", self.objective);
        kv.set("distance", self.distance);
        kv.set("lambda", self.lambda);
        kv.set("iterations", self.iterations);
        kv.set("evaluations", self.evaluations);
        kv.set("converged", self.converged);
        kv.set("elapsed_secs", format!("{:.3}", self.elapsed_secs));
        kv.set("seed", self.seed);
        for (prefix, m) in [("data", &self.data_moments), ("sim", &self.sim_moments)] {
            for (name, v) in crate::moments::MOMENT_NAMES.iter().zip(m.values()) {
                kv.set(&format!("{prefix}_{name}"), v.map_or(crate::report::MISSING.to_string(), |v| v.to_string()));
            }
        }
        kv
    }
}

/// Default start when the reduced-form logit cannot be used.
pub const FALLBACK_START: [f64; 7] = [-0.1, -0.5, -1.0, -5.0, -7.0, -0.5, -0.2];

#[derive(Clone, Debug, PartialEq)]
pub struct ReducedForm {
    pub start: ModelParams,
    /// Logit coefficients on `[1, age, cage1, cage2, fail, (n_lag, f_cage)]`.
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    /// The logit was unusable and [`FALLBACK_START`] was returned.
    pub fallback: bool,
}

/// Static logit of the replacement decision, fit by iteratively reweighted
/// least squares, mapped to structural starting values: the intercept
/// starts `θ_replace` and negated slopes start the keep-utility
/// coefficients, since `P(replace) = logistic(u_replace − u_keep)`.
pub fn init_from_reduced_form(cells: &ChoiceCells, mode: Mode) -> ReducedForm {
    let spec = *cells.spec();
    let k = mode.n_params();
    let rows: Vec<(Vec<f64>, f64, f64)> = cells
        .cells()
        .iter()
        .map(|c| {
            let s = c.state;
            let mut x = vec![
                1.0,
                spec.age_years(s.age_bin),
                f64::from(u8::from(s.cage == 1)),
                f64::from(u8::from(s.cage == 2)),
                f64::from(u8::from(s.fail)),
            ];
            if mode == Mode::Spatial {
                x.push(f64::from(u8::from(s.n_lag)));
                x.push(f64::from(c.f_cage));
            }
            (x, c.n_replace as f64, (c.n_keep + c.n_replace) as f64)
        })
        .collect();

    let fallback = |coefficients: Vec<f64>, iterations| {
        log::warn!("reduced-form logit unusable; using the default start");
        ReducedForm {
            start: ModelParams::from_slice(&FALLBACK_START[..k]),
            coefficients,
            iterations,
            fallback: true,
        }
    };
    let n1: f64 = rows.iter().map(|r| r.1).sum();
    let n: f64 = rows.iter().map(|r| r.2).sum();
    if n1 == 0.0 || n1 == n {
        return fallback(Vec::new(), 0);
    }

    let loglik = |b: &DVector<f64>| -> f64 {
        rows.iter()
            .map(|(x, y, m)| {
                let eta: f64 = x.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
                // ln p = −ln(1 + e^{−η}), ln(1 − p) = −ln(1 + e^{η})
                -y * softplus(-eta) - (m - y) * softplus(eta)
            })
            .sum()
    };
    let mut b = DVector::<f64>::zeros(k);
    b[0] = (n1 / (n - n1)).ln();
    let mut current = loglik(&b);
    for iter in 1..=100 {
        let mut xtwx = DMatrix::<f64>::zeros(k, k);
        let mut grad = DVector::<f64>::zeros(k);
        for (x, y, m) in &rows {
            let x = DVector::from_column_slice(x);
            let p = logistic(x.dot(&b));
            let w = m * p * (1.0 - p);
            xtwx += &x * x.transpose() * w;
            grad += &x * (y - m * p);
        }
        let Some(chol) = xtwx.cholesky() else {
            return fallback(b.iter().copied().collect(), iter);
        };
        // Newton step, halved until the log-likelihood does not fall.
        let mut step = chol.solve(&grad);
        let mut next = &b + &step;
        let mut value = loglik(&next);
        for _ in 0..40 {
            if value >= current - 1e-12 * current.abs() {
                break;
            }
            step *= 0.5;
            next = &b + &step;
            value = loglik(&next);
        }
        b = next;
        current = value;
        if b.iter().any(|v| !v.is_finite()) {
            return fallback(b.iter().copied().collect(), iter);
        }
        if step.amax() < 1e-8 {
            // Quasi-separation: the fit converges with a runaway coefficient.
            if b.iter().any(|v| v.abs() > 25.0) {
                return fallback(b.iter().copied().collect(), iter);
            }
            // b = [intercept, age, cage1, cage2, fail, (n_lag, f_cage)]
            let mut v: Vec<f64> = b.iter().skip(1).map(|c| -c).collect();
            v.insert(4, b[0]);
            return ReducedForm {
                start: ModelParams::from_slice(&v),
                coefficients: b.iter().copied().collect(),
                iterations: iter,
                fallback: false,
            };
        }
    }
    fallback(b.iter().copied().collect(), 100)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn params_from_search(x: &[f64]) -> ModelParams {
    ModelParams::from_slice(x)
}

/// Minimizes the objective with Nelder–Mead from `start` (or the
/// reduced-form start).
pub fn estimate(
    data: &EstimationData,
    cfg: &ModelConfig,
    settings: &EstimationSettings,
    start: Option<ModelParams>,
) -> Result<EstimationResult> {
    let clock = Instant::now();
    let mode = settings.mode;
    let lambda = settings.effective_lambda(cfg);
    let start = start.unwrap_or_else(|| init_from_reduced_form(&data.cells, mode).start);
    let start = match mode {
        Mode::Baseline => start.with_gamma(Default::default()),
        Mode::Spatial => start,
    };
    start.validate()?;
    let x0 = &start.to_vec()[..mode.n_params()];

    let mut objective = HybridObjective::new(data, cfg, lambda, settings.seed);
    let nm = nelder_mead(
        |x| match objective.evaluate(&params_from_search(x)) {
            Ok(v) => v.objective,
            Err(e) => {
                log::warn!("objective failed at {x:?}: {e}");
                f64::INFINITY
            }
        },
        x0,
        &settings.optimizer,
    );
    if !nm.converged {
        log::warn!("{mode} estimation stopped at the iteration cap ({})", nm.iterations);
    }
    let params = params_from_search(&nm.x);
    let at_optimum = objective.evaluate_full(&params)?;
    let distance = at_optimum.distance.unwrap_or(f64::NAN);
    Ok(EstimationResult {
        mode,
        params,
        start,
        objective: combine_objective(at_optimum.log_likelihood, distance, lambda),
        log_likelihood: at_optimum.log_likelihood,
        distance,
        lambda,
        ll_null: data.ll_null,
        n_obs: data.n_obs(),
        iterations: nm.iterations,
        evaluations: nm.evaluations + 1,
        converged: nm.converged,
        elapsed_secs: clock.elapsed().as_secs_f64(),
        data_moments: data.data_moments,
        sim_moments: at_optimum.sim_moments.unwrap_or_default(),
        seed: settings.seed,
    })
}

/// Negative log-likelihood Hessian and the implied standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianResult {
    pub std_errors: Vec<f64>,
    pub hessian: DMatrix<f64>,
    pub positive_definite: bool,
}

/// Standard errors from central differences of `−LL` (not the hybrid
/// objective) with steps `max(1e-4, 1e-4·|p|)`. Value functions are solved
/// far below the step size so truncation error does not swamp curvature.
pub fn hessian_standard_errors(
    params: &ModelParams,
    mode: Mode,
    data: &EstimationData,
    cfg: &ModelConfig,
) -> Result<HessianResult> {
    let solver = Solver::new(
        data.transitions.clone(),
        VfiSettings {
            beta: cfg.beta,
            tolerance: 1e-13,
            max_iters: cfg.max_vfi_iters.max(20_000),
        },
    );
    let center = solver.solve(params, None)?;
    let warm = center.value.values.clone();
    let x: Vec<f64> = params.to_vec()[..mode.n_params()].to_vec();
    let h: Vec<f64> = x.iter().map(|&p| hessian_step(p)).collect();
    let mut failure = None;
    let hess = numerical_hessian(
        |y| match solver.solve(&ModelParams::from_slice(y), Some(&warm)) {
            Ok(policy) => -log_likelihood_cells(&policy, &data.cells),
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        },
        &x,
        &h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let cov = invert_hessian(&hess);
    Ok(HessianResult {
        std_errors: cov.standard_errors(),
        hessian: hess,
        positive_definite: cov.positive_definite,
    })
}

/// Draws `(cabinet, cage)` clusters with replacement, as many as the
/// panel has. Each drawn copy gets a fresh cabinet id and location ids
/// suffixed `@copy`; derived columns are kept since neighborhoods never
/// cross clusters. A mover's records are split across the clusters it
/// occupied, each part keeping its originally observed `prev_replace`.
pub fn resample_cages(panel: &EnrichedPanel, rng: &mut Stream) -> Result<EnrichedPanel> {
    let clusters: Vec<Position> = panel
        .records()
        .iter()
        .map(EnrichedRecord::position)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if clusters.len() < 2 {
        return Err(Error::NoClusterVariation(clusters.len()));
    }
    let mut members: std::collections::BTreeMap<Position, Vec<&EnrichedRecord>> = Default::default();
    for r in panel.records() {
        members.entry(r.position()).or_default().push(r);
    }
    let mut drawn: Vec<(String, EnrichedRecord)> = Vec::with_capacity(panel.len());
    for copy in 0..clusters.len() {
        let pos = clusters[rng.below(clusters.len() as u64) as usize];
        for r in &members[&pos] {
            let mut rec = **r;
            rec.cabinet = copy as i64 + 1;
            drawn.push((format!("{}@{copy}", panel.location_id(r.location)), rec));
        }
    }
    drawn.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.period.cmp(&b.1.period)));
    let mut ids: Vec<String> = Vec::new();
    let mut records = Vec::with_capacity(drawn.len());
    for (id, mut rec) in drawn {
        if ids.last() != Some(&id) {
            ids.push(id);
        }
        rec.location = (ids.len() - 1) as u32;
        records.push(rec);
    }
    Ok(EnrichedPanel::assemble(ids.into(), records))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapResult {
    pub mode: Mode,
    /// Parameter vectors of the successful replicates.
    pub replicates: Vec<Vec<f64>>,
    /// Replicate index of each row of `replicates`.
    pub replicate_ids: Vec<usize>,
    pub std_errors: Vec<f64>,
    pub requested: usize,
    /// Resampling seed of every requested replicate.
    pub seeds: Vec<u64>,
}

impl BootstrapResult {
    pub fn effective(&self) -> usize {
        self.replicates.len()
    }

    /// Fewer than two replicates: standard errors are zero by definition.
    pub fn degenerate(&self) -> bool {
        self.replicates.len() < 2
    }
}

/// Cage-cluster bootstrap. Replicate `k` resamples with
/// [`Stream::for_draw`]`(seed, k)` and re-estimates from `start`; failed
/// replicates are dropped and logged.
pub fn bootstrap_cages(
    panel: &EnrichedPanel,
    cfg: &ModelConfig,
    settings: &EstimationSettings,
    n_reps: usize,
    seed: u64,
    start: Option<ModelParams>,
) -> Result<BootstrapResult> {
    if n_reps == 0 {
        return Err(Error::invalid("bootstrap needs at least one replicate"));
    }
    // Surface the single-cluster error before spawning work.
    resample_cages(panel, &mut Stream::new(seed))?;
    let outcomes: Vec<(usize, Result<Vec<f64>>)> = (0..n_reps)
        .into_par_iter()
        .map(|k| {
            let run = || -> Result<Vec<f64>> {
                let mut rng = Stream::for_draw(seed, k as u64);
                let sample = resample_cages(panel, &mut rng)?;
                let data = EstimationData::new(sample, cfg)?;
                let fit = estimate(&data, cfg, settings, start)?;
                Ok(fit.params.to_vec()[..settings.mode.n_params()].to_vec())
            };
            (k, run())
        })
        .collect();
    let mut replicates = Vec::new();
    let mut replicate_ids = Vec::new();
    for (k, outcome) in outcomes {
        match outcome {
            Ok(v) => {
                replicates.push(v);
                replicate_ids.push(k);
            }
            Err(e) => log::warn!("bootstrap replicate {k} dropped: {e}"),
        }
    }
    if replicates.len() < 2 {
        log::warn!("bootstrap has {} usable replicate(s); standard errors are degenerate", replicates.len());
    }
    let std_errors = if replicates.is_empty() {
        vec![f64::NAN; settings.mode.n_params()]
    } else {
        column_std_dev(&replicates)
    };
    Ok(BootstrapResult {
        mode: settings.mode,
        replicates,
        replicate_ids,
        std_errors,
        requested: n_reps,
        seeds: (0..n_reps as u64).map(|k| seed ^ k).collect(),
    })
}
