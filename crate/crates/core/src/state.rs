//! The discrete state grid and its Markov transitions.
//!
//! A state is `(age_bin, cage, fail, n_lag)`, indexed densely as
//! `((age_bin * n_cages + cage) * 2 + fail) * 2 + n_lag`. With six yearly age
//! bins and three cages that is 72 states.
//!
//! Ages move on a quarterly clock. Under [`AgeMode::CoarseStochastic`] a kept
//! unit advances one yearly bin with probability `dt_years` per period, so the
//! expected time spent in a bin is one year. [`AgeMode::FineGrid`] instead
//! uses one grid point per period (21 points from 0 to 5 years) and advances
//! deterministically.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::panel::{estimate_p_nbr, estimate_p_nbr_by_cage, EnrichedPanel, N_CAGES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AgeMode {
    #[default]
    CoarseStochastic,
    FineGrid,
}

impl std::str::FromStr for AgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse_stochastic" | "coarse" => Ok(AgeMode::CoarseStochastic),
            "fine_grid" | "fine" => Ok(AgeMode::FineGrid),
            other => Err(Error::invalid(format!(
                "unknown age mode `{other}` (expected coarse_stochastic or fine_grid)"
            ))),
        }
    }
}

impl std::fmt::Display for AgeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AgeMode::CoarseStochastic => "coarse_stochastic",
            AgeMode::FineGrid => "fine_grid",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateSpec {
    /// Yearly age bins; the last bin pools everything older.
    pub n_age_bins: usize,
    pub n_cages: usize,
    /// Length of one model period in years.
    pub dt_years: f64,
    pub age_mode: AgeMode,
}

impl Default for StateSpec {
    fn default() -> Self {
        Self {
            n_age_bins: 6,
            n_cages: N_CAGES,
            dt_years: 0.25,
            age_mode: AgeMode::CoarseStochastic,
        }
    }
}

impl StateSpec {
    pub fn with_age_mode(mut self, mode: AgeMode) -> Self {
        self.age_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_age_bins < 2 {
            return Err(Error::invalid(format!("n_age_bins must be >= 2, got {}", self.n_age_bins)));
        }
        if !(1..=N_CAGES).contains(&self.n_cages) {
            return Err(Error::invalid(format!("n_cages must be in 1..=3, got {}", self.n_cages)));
        }
        if !(self.dt_years > 0.0 && self.dt_years <= 1.0) {
            return Err(Error::invalid(format!("dt_years must be in (0, 1], got {}", self.dt_years)));
        }
        if self.age_mode == AgeMode::FineGrid && self.quarters_per_step() == 0 {
            return Err(Error::invalid("fine_grid needs dt_years of at least one quarter"));
        }
        Ok(())
    }

    /// Number of age grid points the solver iterates over.
    pub fn n_age_points(&self) -> usize {
        match self.age_mode {
            AgeMode::CoarseStochastic => self.n_age_bins,
            AgeMode::FineGrid => ((self.n_age_bins - 1) as f64 / self.dt_years).round() as usize + 1,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_age_points() * self.n_cages * 4
    }

    /// Number of failure-transition cells `(age, cage, fail)`.
    pub fn n_cells(&self) -> usize {
        self.n_age_points() * self.n_cages * 2
    }

    fn quarters_per_step(&self) -> u32 {
        (self.dt_years * 4.0).round() as u32
    }

    /// Maps a raw age in quarters onto the age grid.
    pub fn age_bin_of_quarters(&self, quarters: u32) -> usize {
        let top = self.n_age_points() - 1;
        let bin = match self.age_mode {
            AgeMode::CoarseStochastic => (quarters / 4) as usize,
            AgeMode::FineGrid => (quarters / self.quarters_per_step()) as usize,
        };
        bin.min(top)
    }

    /// Age in years carried into flow utility.
    pub fn age_years(&self, age_bin: usize) -> f64 {
        match self.age_mode {
            AgeMode::CoarseStochastic => age_bin as f64,
            AgeMode::FineGrid => age_bin as f64 * self.dt_years,
        }
    }

    pub fn index(&self, s: &State) -> usize {
        ((s.age_bin * self.n_cages + s.cage) * 2 + usize::from(s.fail)) * 2 + usize::from(s.n_lag)
    }

    pub fn decode(&self, index: usize) -> State {
        let n_lag = index % 2 == 1;
        let rest = index / 2;
        let fail = rest % 2 == 1;
        let rest = rest / 2;
        State {
            age_bin: rest / self.n_cages,
            cage: rest % self.n_cages,
            fail,
            n_lag,
        }
    }

    pub fn cell_index(&self, age_bin: usize, cage: usize, fail: bool) -> usize {
        (age_bin * self.n_cages + cage) * 2 + usize::from(fail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct State {
    pub age_bin: usize,
    pub cage: usize,
    pub fail: bool,
    pub n_lag: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Replace,
}

/// All states in dense-index order.
pub fn enumerate_states(spec: &StateSpec) -> Vec<State> {
    (0..spec.n_states()).map(|i| spec.decode(i)).collect()
}

/// Distribution of next period's age bin as `(bin, probability)` pairs.
pub fn next_age_bin(age_bin: usize, d: Decision, spec: &StateSpec) -> Vec<(usize, f64)> {
    let top = spec.n_age_points() - 1;
    match (d, spec.age_mode) {
        (Decision::Replace, _) => vec![(0, 1.0)],
        (Decision::Keep, _) if age_bin >= top => vec![(top, 1.0)],
        (Decision::Keep, AgeMode::FineGrid) => vec![(age_bin + 1, 1.0)],
        (Decision::Keep, AgeMode::CoarseStochastic) => {
            vec![(age_bin, 1.0 - spec.dt_years), (age_bin + 1, spec.dt_years)]
        }
    }
}

/// How the neighbor-environment statistics are pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NeighborPooling {
    pub p_nbr_by_cage: bool,
    pub ef_cage_by_cage: bool,
}

/// Failure transitions plus the neighbor environment the solver integrates
/// over.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionModel {
    spec: StateSpec,
    alpha: f64,
    /// `[P(fail'=0), P(fail'=1)]` per `(age, cage, fail)` cell under keep.
    fail_probs: Vec<[f64; 2]>,
    /// Observed keep-decision transition counts per cell.
    counts: Vec<[u64; 2]>,
    /// Probability that some neighbor replaces next period, per cage.
    pub p_nbr: [f64; N_CAGES],
    /// Expected neighbor failures used in flow utility, per cage.
    pub ef_cage: [f64; N_CAGES],
}

/// Laplace-smoothed binary transition probability `(n_hit + a) / (n + 2a)`.
pub fn laplace(n_hit: u64, n: u64, alpha: f64) -> f64 {
    (n_hit as f64 + alpha) / (n as f64 + 2.0 * alpha)
}

/// Counts keep-decision failure transitions between consecutive records of
/// the same location, then smooths every cell. Empty cells come out 0.5/0.5.
pub fn estimate_failure_transitions(
    panel: &EnrichedPanel,
    spec: &StateSpec,
    alpha: f64,
    pooling: NeighborPooling,
) -> Result<TransitionModel> {
    spec.validate()?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("smoothing alpha must be positive, got {alpha}")));
    }
    let mut counts = vec![[0u64; 2]; spec.n_cells()];
    for pair in panel.records().windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.location != b.location || b.period != a.period + 1 || a.replace {
            continue;
        }
        let cage = usize::from(a.cage_pos);
        if cage >= spec.n_cages {
            continue;
        }
        let cell = spec.cell_index(spec.age_bin_of_quarters(a.age_quarters), cage, a.fail);
        counts[cell][usize::from(b.fail)] += 1;
    }
    let fail_probs = counts
        .iter()
        .map(|c| {
            let n = c[0] + c[1];
            [laplace(c[0], n, alpha), laplace(c[1], n, alpha)]
        })
        .collect();

    let p_nbr = if pooling.p_nbr_by_cage {
        estimate_p_nbr_by_cage(panel)?
    } else {
        [estimate_p_nbr(panel)?; N_CAGES]
    };
    let (ef_all, ef_by) = panel.mean_f_cage();
    let ef_cage = if pooling.ef_cage_by_cage { ef_by } else { [ef_all; N_CAGES] };

    Ok(TransitionModel {
        spec: *spec,
        alpha,
        fail_probs,
        counts,
        p_nbr,
        ef_cage,
    })
}

impl TransitionModel {
    /// Builds a model from known failure probabilities, e.g. for simulation
    /// from a specified data-generating process.
    pub fn from_fail_probabilities(
        spec: &StateSpec,
        mut p_fail: impl FnMut(usize, usize, bool) -> f64,
        p_nbr: [f64; N_CAGES],
        ef_cage: [f64; N_CAGES],
    ) -> Result<Self> {
        spec.validate()?;
        let mut fail_probs = vec![[0.5; 2]; spec.n_cells()];
        for age in 0..spec.n_age_points() {
            for cage in 0..spec.n_cages {
                for fail in [false, true] {
                    let p = p_fail(age, cage, fail);
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::invalid(format!("failure probability {p} outside [0,1]")));
                    }
                    fail_probs[spec.cell_index(age, cage, fail)] = [1.0 - p, p];
                }
            }
        }
        for p in p_nbr {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("p_nbr {p} outside [0,1]")));
            }
        }
        Ok(Self {
            spec: *spec,
            alpha: 0.0,
            counts: vec![[0; 2]; spec.n_cells()],
            fail_probs,
            p_nbr,
            ef_cage,
        })
    }

    pub fn spec(&self) -> &StateSpec {
        &self.spec
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `P(fail' = 1 | age, cage, fail, keep)`.
    pub fn fail_probability(&self, age_bin: usize, cage: usize, fail: bool) -> f64 {
        self.fail_probs[self.spec.cell_index(age_bin, cage, fail)][1]
    }

    pub fn fail_distribution(&self, age_bin: usize, cage: usize, fail: bool) -> [f64; 2] {
        self.fail_probs[self.spec.cell_index(age_bin, cage, fail)]
    }

    pub fn cell_counts(&self, age_bin: usize, cage: usize, fail: bool) -> [u64; 2] {
        self.counts[self.spec.cell_index(age_bin, cage, fail)]
    }

    /// Distribution over next states as `(dense index, probability)`.
    ///
    /// Cage is fixed; a replacement moves to age 0 and clears the failure
    /// flag; `n_lag'` is 1 with probability `p_nbr` either way.
    pub fn next_states(&self, s: &State, d: Decision) -> Vec<(usize, f64)> {
        let p = self.p_nbr[s.cage];
        let fails = match d {
            Decision::Keep => self.fail_distribution(s.age_bin, s.cage, s.fail),
            Decision::Replace => [1.0, 0.0],
        };
        let mut out = Vec::with_capacity(8);
        for (age, pa) in next_age_bin(s.age_bin, d, &self.spec) {
            for (fail, pf) in [(false, fails[0]), (true, fails[1])] {
                if pf == 0.0 {
                    continue;
                }
                for (n_lag, pn) in [(false, 1.0 - p), (true, p)] {
                    if pn == 0.0 {
                        continue;
                    }
                    let next = State {
                        age_bin: age,
                        cage: s.cage,
                        fail,
                        n_lag,
                    };
                    out.push((self.spec.index(&next), pa * pf * pn));
                }
            }
        }
        out
    }

    /// Tab-separated audit table, one row per failure cell.
    pub fn to_table(&self) -> String {
        let mut out = String::from("age_bin\tcage\tfail\tn_to_0\tn_to_1\tp_fail_next_0\tp_fail_next_1\n");
        for age in 0..self.spec.n_age_points() {
            for cage in 0..self.spec.n_cages {
                for fail in [false, true] {
                    let c = self.cell_counts(age, cage, fail);
                    let p = self.fail_distribution(age, cage, fail);
                    let _ = writeln!(
                        out,
                        "{age}\t{cage}\t{}\t{}\t{}\t{:.6}\t{:.6}",
                        u8::from(fail),
                        c[0],
                        c[1],
                        p[0],
                        p[1]
                    );
                }
            }
        }
        let _ = writeln!(out, "# alpha={}", self.alpha);
        for cage in 0..self.spec.n_cages {
            let _ = writeln!(
                out,
                "# cage={cage} p_nbr={:.6} ef_cage={:.6}",
                self.p_nbr[cage], self.ef_cage[cage]
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{enrich, Panel, PanelRecord};

    #[test]
    fn default_grid_has_72_states() {
        let spec = StateSpec::default();
        assert_eq!(enumerate_states(&spec).len(), 72);
        let small = StateSpec {
            n_age_bins: 2,
            ..Default::default()
        };
        assert_eq!(enumerate_states(&small).len(), 24);
        let fine = StateSpec::default().with_age_mode(AgeMode::FineGrid);
        assert_eq!(fine.n_age_points(), 21);
        assert_eq!(fine.n_states(), 252);
    }

    #[test]
    fn index_round_trips() {
        for spec in [StateSpec::default(), StateSpec::default().with_age_mode(AgeMode::FineGrid)] {
            for (i, s) in enumerate_states(&spec).iter().enumerate() {
                assert_eq!(spec.index(s), i);
                assert_eq!(spec.decode(i), *s);
            }
        }
        let spec = StateSpec::default();
        let s = State {
            age_bin: 2,
            cage: 1,
            fail: true,
            n_lag: false,
        };
        assert_eq!(spec.index(&s), ((2 * 3 + 1) * 2 + 1) * 2);
    }

    #[test]
    fn spec_validation() {
        assert!(StateSpec { n_age_bins: 1, ..Default::default() }.validate().is_err());
        assert!(StateSpec { dt_years: 0.0, ..Default::default() }.validate().is_err());
        assert!(StateSpec { dt_years: 1.5, ..Default::default() }.validate().is_err());
        assert!(StateSpec::default().validate().is_ok());
    }

    #[test]
    fn age_binning() {
        let spec = StateSpec::default();
        assert_eq!(spec.age_bin_of_quarters(0), 0);
        assert_eq!(spec.age_bin_of_quarters(7), 1);
        assert_eq!(spec.age_bin_of_quarters(100), 5);
        let fine = spec.with_age_mode(AgeMode::FineGrid);
        assert_eq!(fine.age_bin_of_quarters(7), 7);
        assert_eq!(fine.age_years(7), 1.75);
        assert_eq!(fine.age_bin_of_quarters(40), 20);
    }

    #[test]
    fn age_transitions() {
        let spec = StateSpec::default();
        for bin in 0..6 {
            assert_eq!(next_age_bin(bin, Decision::Replace, &spec), vec![(0, 1.0)]);
        }
        assert_eq!(next_age_bin(5, Decision::Keep, &spec), vec![(5, 1.0)]);
        assert_eq!(next_age_bin(2, Decision::Keep, &spec), vec![(2, 0.75), (3, 0.25)]);
        let fine = spec.with_age_mode(AgeMode::FineGrid);
        assert_eq!(next_age_bin(7, Decision::Keep, &fine), vec![(8, 1.0)]);
        assert_eq!(next_age_bin(20, Decision::Keep, &fine), vec![(20, 1.0)]);
    }

    #[test]
    fn coarse_ages_track_the_quarterly_clock_in_expectation() {
        // Propagate the coarse chain and compare its mean age in years with
        // the deterministic fine grid, before either hits the cap.
        let coarse = StateSpec::default();
        let fine = coarse.with_age_mode(AgeMode::FineGrid);
        let mut dist = vec![0.0; coarse.n_age_points()];
        dist[0] = 1.0;
        let mut fine_bin = 0;
        for quarter in 1..=5 {
            let mut next = vec![0.0; dist.len()];
            for (bin, &p) in dist.iter().enumerate() {
                for (to, q) in next_age_bin(bin, Decision::Keep, &coarse) {
                    next[to] += p * q;
                }
            }
            dist = next;
            fine_bin = next_age_bin(fine_bin, Decision::Keep, &fine)[0].0;
            let mean: f64 = dist.iter().enumerate().map(|(b, p)| b as f64 * p).sum();
            assert!((mean - fine.age_years(fine_bin)).abs() < 1e-12, "quarter {quarter}");
            assert!((mean - 0.25 * quarter as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn laplace_smoothing_values() {
        assert!((laplace(3, 10, 0.01) - 3.01 / 10.02).abs() < 1e-15);
        assert!((laplace(3, 10, 0.01) - 0.300399).abs() < 1e-6);
        assert_eq!(laplace(0, 0, 0.01), 0.5);
        assert!((laplace(50, 50, 0.01) - 0.9998).abs() < 1e-4);
    }

    fn row(loc: &str, t: i64, cage: u8, age: u32, fail: bool, replace: bool) -> PanelRecord {
        PanelRecord {
            location_id: loc.into(),
            period: t,
            cabinet: 1,
            cage_pos: cage,
            age_quarters: age,
            fail,
            replace,
        }
    }

    #[test]
    fn estimates_from_keep_decisions_only() {
        // Location A: working at t=0..10 with 3 failures following; replaced
        // units never contribute.
        let mut recs = Vec::new();
        let fails = [false, false, true, false, true, false, false, true, false, false, false];
        for (t, &f) in fails.iter().enumerate() {
            recs.push(row("A", t as i64, 0, 8, f, false));
        }
        recs.push(row("B", 0, 0, 8, false, true));
        recs.push(row("B", 1, 0, 0, true, false));
        let e = enrich(&Panel::from_records(recs).unwrap());
        let tm = estimate_failure_transitions(&e, &StateSpec::default(), 0.01, NeighborPooling::default()).unwrap();
        // From fail=0 at age bin 2: transitions 0->0,0->1,0->1,0->0,0->1 ... count them.
        let c = tm.cell_counts(2, 0, false);
        assert_eq!(c, [4, 3]);
        assert_eq!(tm.cell_counts(2, 0, true), [3, 0]);
        assert!((tm.fail_probability(2, 0, false) - 3.01 / 7.02).abs() < 1e-15);
        assert_eq!(tm.fail_probability(0, 0, false), 0.5);
        assert_eq!(tm.cell_counts(0, 0, false), [0, 0]);
    }

    #[test]
    fn every_distribution_sums_to_one() {
        let tm = TransitionModel::from_fail_probabilities(
            &StateSpec::default(),
            |a, c, f| 0.01 * a as f64 + 0.1 * c as f64 + if f { 0.3 } else { 0.0 },
            [0.3; 3],
            [0.5; 3],
        )
        .unwrap();
        for s in enumerate_states(tm.spec()) {
            for d in [Decision::Keep, Decision::Replace] {
                let total: f64 = tm.next_states(&s, d).iter().map(|(_, p)| p).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
            let replace = tm.next_states(&s, Decision::Replace);
            for (j, _) in replace {
                let next = tm.spec().decode(j);
                assert_eq!(next.age_bin, 0);
                assert!(!next.fail);
                assert_eq!(next.cage, s.cage);
            }
        }
    }

    #[test]
    fn table_has_one_row_per_cell() {
        let tm = TransitionModel::from_fail_probabilities(&StateSpec::default(), |_, _, _| 0.1, [0.2; 3], [0.0; 3]).unwrap();
        let rows = tm.to_table().lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(rows, 1 + 36);
    }
}
