//! Forward simulation of replacement panels and synthetic data generation.
//!
//! Within a period every unit decides against the beginning-of-period
//! failure flags of its cage-mates; `n_lag` and `f_lag` for the next period
//! come from the sampled neighbor outcomes, not from the solver's
//! `p_nbr`/`E[f]` approximation. A replaced unit enters the next period at
//! age zero without a failure.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::dp::{PolicyTable, Solver, VfiSettings};
use crate::error::{Error, Result};
use crate::moments::{MomentCounts, MomentVector};
use crate::panel::{estimate_p_nbr, estimate_p_nbr_by_cage, EnrichedPanel, EnrichedRecord, Panel, Position, N_CAGES};
use crate::rng::Stream;
use crate::state::{State, StateSpec, TransitionModel};
use crate::utility::ModelParams;

/// Anything that maps a state and observed neighbor failures to a
/// replacement probability.
pub trait ReplacementPolicy: Sync {
    fn spec(&self) -> &StateSpec;
    fn replace_probability(&self, s: &State, state_index: usize, f_cage: u32) -> f64;
}

impl ReplacementPolicy for PolicyTable {
    fn spec(&self) -> &StateSpec {
        PolicyTable::spec(self)
    }

    #[inline]
    fn replace_probability(&self, s: &State, state_index: usize, f_cage: u32) -> f64 {
        crate::dp::logistic(self.replace_advantage(s, state_index, f_cage))
    }
}

/// A policy that replaces with the same probability everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPolicy {
    pub spec: StateSpec,
    pub p: f64,
}

impl ReplacementPolicy for ConstantPolicy {
    fn spec(&self) -> &StateSpec {
        &self.spec
    }

    fn replace_probability(&self, _: &State, _: usize, _: u32) -> f64 {
        self.p
    }
}

/// Starting state of one simulated unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitialUnit {
    pub location: u32,
    pub cabinet: i64,
    pub cage_pos: u8,
    pub age_quarters: u32,
    pub fail: bool,
    pub n_lag: bool,
    pub f_lag: u32,
    pub prev_replace: Option<bool>,
}

/// Units and neighborhoods at the first simulated period.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialCrossSection {
    location_ids: Arc<[String]>,
    units: Vec<InitialUnit>,
    period: i64,
}

impl InitialCrossSection {
    /// `units` must be sorted by location index with no duplicates.
    pub fn new(location_ids: Arc<[String]>, units: Vec<InitialUnit>, period: i64) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::EmptySample("initial cross-section has no units".into()));
        }
        if units.windows(2).any(|w| w[0].location >= w[1].location) {
            return Err(Error::invalid("initial units must be sorted by location without duplicates"));
        }
        if units.iter().any(|u| u.location as usize >= location_ids.len() || usize::from(u.cage_pos) >= N_CAGES) {
            return Err(Error::invalid("initial unit refers to an unknown location or cage"));
        }
        Ok(Self {
            location_ids,
            units,
            period,
        })
    }

    /// The records of `panel` observed at `period`, with their lag columns.
    pub fn from_panel(panel: &EnrichedPanel, period: i64) -> Result<Self> {
        let units = panel
            .records()
            .iter()
            .filter(|r| r.period == period)
            .map(|r| InitialUnit {
                location: r.location,
                cabinet: r.cabinet,
                cage_pos: r.cage_pos,
                age_quarters: r.age_quarters,
                fail: r.fail,
                n_lag: r.n_lag,
                f_lag: r.f_lag,
                prev_replace: r.prev_replace,
            })
            .collect();
        Self::new(panel.location_ids().clone(), units, period)
            .map_err(|e| match e {
                Error::EmptySample(_) => Error::EmptySample(format!("no records at period {period}")),
                other => other,
            })
    }

    pub fn units(&self) -> &[InitialUnit] {
        &self.units
    }

    pub fn period(&self) -> i64 {
        self.period
    }

    pub fn location_ids(&self) -> &Arc<[String]> {
        &self.location_ids
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub n_sims: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn from_model(cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            n_sims: cfg.n_sims,
            horizon: cfg.horizon,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sims == 0 || self.horizon == 0 {
            return Err(Error::invalid("simulation needs at least one draw and one period"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimPanel {
    pub draw: usize,
    pub panel: EnrichedPanel,
}

/// Dense ids of the `(cabinet, cage)` positions of `units`, and their count.
fn position_groups(units: &[InitialUnit]) -> (Vec<usize>, usize) {
    let mut group_of: HashMap<Position, usize> = HashMap::new();
    let group = units
        .iter()
        .map(|u| {
            let next = group_of.len();
            *group_of.entry((u.cabinet, u.cage_pos)).or_insert(next)
        })
        .collect();
    (group, group_of.len())
}

/// Runs the dynamics, handing each period's cross-section (in unit order)
/// to `emit`.
fn run_draw<P, F>(
    policy: &P,
    trans: &TransitionModel,
    init: &InitialCrossSection,
    group: &[usize],
    n_groups: usize,
    horizon: usize,
    rng: &mut Stream,
    mut emit: F,
) where
    P: ReplacementPolicy + ?Sized,
    F: FnMut(usize, &[EnrichedRecord]),
{
    let spec = policy.spec();
    let units = &init.units;

    let mut age: Vec<u32> = units.iter().map(|u| u.age_quarters).collect();
    let mut fail: Vec<bool> = units.iter().map(|u| u.fail).collect();
    let mut n_lag: Vec<bool> = units.iter().map(|u| u.n_lag).collect();
    let mut f_lag: Vec<u32> = units.iter().map(|u| u.f_lag).collect();
    let mut prev: Vec<Option<bool>> = units.iter().map(|u| u.prev_replace).collect();
    let mut group_fail = vec![0u32; n_groups];
    let mut group_replace = vec![0u32; n_groups];
    let mut row: Vec<EnrichedRecord> = Vec::with_capacity(units.len());

    for t in 0..horizon {
        let period = init.period + t as i64;
        group_fail.fill(0);
        for (u, &g) in group.iter().enumerate() {
            group_fail[g] += u32::from(fail[u]);
        }
        group_replace.fill(0);
        row.clear();
        for (u, unit) in units.iter().enumerate() {
            let f_cage = group_fail[group[u]] - u32::from(fail[u]);
            let state = State {
                age_bin: spec.age_bin_of_quarters(age[u]),
                cage: usize::from(unit.cage_pos),
                fail: fail[u],
                n_lag: n_lag[u],
            };
            let p = policy.replace_probability(&state, spec.index(&state), f_cage);
            let d = rng.uniform() < p;
            group_replace[group[u]] += u32::from(d);
            row.push(EnrichedRecord {
                location: unit.location,
                period,
                cabinet: unit.cabinet,
                cage_pos: unit.cage_pos,
                age_quarters: age[u],
                fail: fail[u],
                replace: d,
                n_lag: n_lag[u],
                f_cage,
                f_lag: f_lag[u],
                prev_replace: prev[u],
            });
        }
        emit(t, &row);
        for (u, unit) in units.iter().enumerate() {
            let g = group[u];
            let d = row[u].replace;
            n_lag[u] = group_replace[g] - u32::from(d) >= 1;
            f_lag[u] = group_fail[g] - u32::from(fail[u]);
            prev[u] = Some(d);
            let draw = rng.uniform();
            if d {
                age[u] = 0;
                fail[u] = false;
            } else {
                let p = trans.fail_probability(spec.age_bin_of_quarters(age[u]), usize::from(unit.cage_pos), fail[u]);
                fail[u] = draw < p;
                age[u] += 1;
            }
        }
    }
}

/// Simulates one panel of `horizon` periods from `init`.
pub fn simulate_draw<P: ReplacementPolicy + ?Sized>(
    policy: &P,
    trans: &TransitionModel,
    init: &InitialCrossSection,
    horizon: usize,
    rng: &mut Stream,
) -> EnrichedPanel {
    let n = init.units.len();
    let (group, n_groups) = position_groups(&init.units);
    let mut records = Vec::with_capacity(n * horizon);
    let mut by_period: Vec<Vec<EnrichedRecord>> = Vec::with_capacity(horizon);
    run_draw(policy, trans, init, &group, n_groups, horizon, rng, |_, row| by_period.push(row.to_vec()));
    for u in 0..n {
        records.extend(by_period.iter().map(|row| row[u]));
    }
    EnrichedPanel::assemble(init.location_ids.clone(), records)
}

/// Moments of one simulated draw, accumulated while simulating. Equal to
/// `compute_moments(&simulate_draw(..))` for the same stream.
pub fn simulate_draw_moments<P: ReplacementPolicy + ?Sized>(
    policy: &P,
    trans: &TransitionModel,
    init: &InitialCrossSection,
    horizon: usize,
    rng: &mut Stream,
) -> MomentVector {
    let (group, n_groups) = position_groups(&init.units);
    let mut size = vec![0u64; n_groups];
    for &g in &group {
        size[g] += 1;
    }
    let mut counts = MomentCounts::default();
    let mut prev_d: Vec<bool> = Vec::new();
    let mut d_prev = vec![0u64; n_groups];
    let mut d_now = vec![0u64; n_groups];
    let mut both = vec![0u64; n_groups];
    run_draw(policy, trans, init, &group, n_groups, horizon, rng, |t, row| {
        d_now.fill(0);
        both.fill(0);
        for (u, r) in row.iter().enumerate() {
            counts.push_record(r);
            d_now[group[u]] += u64::from(r.replace);
            if t > 0 {
                both[group[u]] += u64::from(r.replace && prev_d[u]);
            }
        }
        if t > 0 {
            for g in 0..n_groups {
                counts.lead_pairs.add_stable_group(size[g], d_prev[g], d_now[g], both[g]);
                counts.lag_pairs.add_stable_group(size[g], d_now[g], d_prev[g], both[g]);
            }
        }
        prev_d.clear();
        prev_d.extend(row.iter().map(|r| r.replace));
        std::mem::swap(&mut d_prev, &mut d_now);
    });
    MomentVector::from_counts(counts)
}

/// Simulates `cfg.n_sims` independent panels. Draw `k` uses
/// [`Stream::for_draw`]`(cfg.seed, k)`; results are in draw order and do
/// not depend on the number of worker threads.
pub fn simulate_panels<P: ReplacementPolicy + ?Sized>(
    policy: &P,
    trans: &TransitionModel,
    init: &InitialCrossSection,
    cfg: &SimConfig,
) -> Result<Vec<SimPanel>> {
    cfg.validate()?;
    Ok((0..cfg.n_sims)
        .into_par_iter()
        .map(|k| {
            let mut rng = Stream::for_draw(cfg.seed, k as u64);
            SimPanel {
                draw: k,
                panel: simulate_draw(policy, trans, init, cfg.horizon, &mut rng),
            }
        })
        .collect())
}

/// Per-draw moment vectors, without keeping the simulated panels.
pub fn simulate_moments<P: ReplacementPolicy + ?Sized>(
    policy: &P,
    trans: &TransitionModel,
    init: &InitialCrossSection,
    cfg: &SimConfig,
) -> Result<Vec<MomentVector>> {
    cfg.validate()?;
    Ok((0..cfg.n_sims)
        .into_par_iter()
        .map(|k| {
            let mut rng = Stream::for_draw(cfg.seed, k as u64);
            simulate_draw_moments(policy, trans, init, cfg.horizon, &mut rng)
        })
        .collect())
}

/// Facility layout: cabinets × 3 cages × slots per cage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Facility {
    pub n_cabinets: usize,
    pub slots_per_cage: usize,
}

impl Facility {
    pub fn n_locations(&self) -> usize {
        self.n_cabinets * N_CAGES * self.slots_per_cage
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cabinets == 0 || self.slots_per_cage == 0 {
            return Err(Error::invalid("facility needs at least one cabinet and one slot"));
        }
        if self.n_cabinets > 9999 || self.slots_per_cage > 99 {
            return Err(Error::invalid("facility larger than the location id format allows"));
        }
        Ok(())
    }

    /// Location id of `(cabinet, cage, slot)`, all zero-based.
    pub fn location_id(cabinet: usize, cage: usize, slot: usize) -> String {
        format!("c{:04}-g{cage}-s{:02}", cabinet + 1, slot + 1)
    }
}

/// Quarterly failure probabilities of the synthetic data-generating
/// process: a cage-specific base rate rising linearly in age, and a fixed
/// persistence for units already failed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FailureProfile {
    pub base: [f64; N_CAGES],
    pub age_slope: f64,
    pub persistence: f64,
}

impl Default for FailureProfile {
    fn default() -> Self {
        Self {
            base: [0.06, 0.08, 0.12],
            age_slope: 0.1,
            persistence: 0.0,
        }
    }
}

impl FailureProfile {
    pub fn probability(&self, age_years: f64, cage: usize, fail: bool) -> f64 {
        if fail {
            self.persistence
        } else {
            (self.base[cage] * (1.0 + self.age_slope * age_years)).min(1.0)
        }
    }

    pub fn transition_model(&self, spec: &StateSpec, p_nbr: [f64; N_CAGES], ef_cage: [f64; N_CAGES]) -> Result<TransitionModel> {
        TransitionModel::from_fail_probabilities(spec, |a, c, f| self.probability(spec.age_years(a), c, f), p_nbr, ef_cage)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub facility: Facility,
    pub profile: FailureProfile,
    pub seed: u64,
    /// Periods simulated before the first emitted window period.
    pub burn_in: usize,
    /// Periods in the estimation window.
    pub periods: usize,
    /// Rounds of re-solving at the neighbor environment of a pilot run.
    pub calibration_rounds: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            facility: Facility {
                n_cabinets: 84,
                slots_per_cage: 8,
            },
            profile: FailureProfile::default(),
            seed: 1,
            burn_in: 8,
            periods: 13,
            calibration_rounds: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    /// Records for periods `0 .. burn_in + periods`.
    pub panel: Panel,
    /// The true failure process with the calibrated neighbor environment.
    pub transitions: TransitionModel,
    pub policy: PolicyTable,
}

/// Generates a panel in the ingestion schema from known parameters.
///
/// Ages are seeded uniformly over the age bins and failures from the
/// profile. The neighbor environment the solver integrates over is
/// calibrated by re-solving at the `p_nbr` and mean `f_cage` of a pilot
/// simulation, so the data are close to a fixed point of the model.
pub fn generate_synthetic(params: &ModelParams, cfg: &SyntheticConfig, model: &ModelConfig) -> Result<SyntheticData> {
    cfg.facility.validate()?;
    params.validate()?;
    model.validate()?;
    let spec = model.state_spec();
    let fac = cfg.facility;

    let mut ids = Vec::with_capacity(fac.n_locations());
    let mut units = Vec::with_capacity(fac.n_locations());
    let mut rng = Stream::new(cfg.seed);
    let max_quarters = (spec.n_age_bins * 4) as u64;
    for cab in 0..fac.n_cabinets {
        for cage in 0..N_CAGES {
            for slot in 0..fac.slots_per_cage {
                let age_quarters = rng.below(max_quarters) as u32;
                let age_years = spec.age_years(spec.age_bin_of_quarters(age_quarters));
                units.push(InitialUnit {
                    location: ids.len() as u32,
                    cabinet: cab as i64 + 1,
                    cage_pos: cage as u8,
                    age_quarters,
                    fail: rng.uniform() < cfg.profile.probability(age_years, cage, false),
                    n_lag: false,
                    f_lag: 0,
                    prev_replace: None,
                });
                ids.push(Facility::location_id(cab, cage, slot));
            }
        }
    }
    let init = InitialCrossSection::new(ids.into(), units, 0)?;
    let horizon = cfg.burn_in + cfg.periods;
    let window = (cfg.burn_in as i64, horizon as i64 - 1);

    let settings = VfiSettings {
        beta: model.beta,
        tolerance: model.eps_vfi_estimation,
        max_iters: model.max_vfi_iters,
    };
    let mean_base = cfg.profile.base.iter().sum::<f64>() / N_CAGES as f64;
    let others = (fac.slots_per_cage - 1) as f64;
    let mut p_nbr = [1.0 - (1.0 - 0.03f64).powf(others); N_CAGES];
    let mut ef = [others * mean_base * 2.0; N_CAGES];

    let solve = |p_nbr, ef| -> Result<(TransitionModel, PolicyTable)> {
        let trans = cfg.profile.transition_model(&spec, p_nbr, ef)?;
        let policy = Solver::new(trans.clone(), settings).solve(params, None)?;
        Ok((trans, policy))
    };
    let (mut trans, mut policy) = solve(p_nbr, ef)?;
    for round in 0..cfg.calibration_rounds {
        let mut stream = Stream::for_draw(cfg.seed, round as u64 + 1);
        let pilot = simulate_draw(&policy, &trans, &init, horizon, &mut stream).restrict_window(window.0, window.1);
        p_nbr = if model.pooling.p_nbr_by_cage {
            estimate_p_nbr_by_cage(&pilot)?
        } else {
            [estimate_p_nbr(&pilot)?; N_CAGES]
        };
        let (all, by) = pilot.mean_f_cage();
        ef = if model.pooling.ef_cage_by_cage { by } else { [all; N_CAGES] };
        (trans, policy) = solve(p_nbr, ef)?;
        log::debug!("calibration round {round}: p_nbr {p_nbr:?}, E[f] {ef:?}");
    }

    let mut stream = Stream::for_draw(cfg.seed, 0);
    let panel = simulate_draw(&policy, &trans, &init, horizon, &mut stream).to_panel();
    Ok(SyntheticData {
        panel,
        transitions: trans,
        policy,
    })
}
