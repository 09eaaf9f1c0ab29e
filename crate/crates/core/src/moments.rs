//! Spatial moments of a replacement panel.
//!
//! * `m1`: replacement rate after an own replacement in the previous period.
//! * `m2`: `Corr(d_i,t, d_j,t+1) − Corr(d_i,t, d_j,t−1)` over ordered
//!   neighbor pairs pooled across periods (diagnostic only).
//! * `m3`: among non-failed units, replacement rate with ≥ 1 neighbor
//!   failure at `t − 1` minus the rate with none.
//! * `m4`: the same contrast for neighbor failures at `t`.
//!
//! Every moment is built from integer counts, so results do not depend on
//! record order.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::panel::{EnrichedPanel, EnrichedRecord, N_CAGES};

/// Hits over trials for a conditional replacement rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Rate {
    pub n: u64,
    pub hits: u64,
}

impl Rate {
    #[inline]
    pub fn push(&mut self, d: bool) {
        self.n += 1;
        self.hits += u64::from(d);
    }

    pub fn value(&self) -> Option<f64> {
        (self.n > 0).then(|| self.hits as f64 / self.n as f64)
    }

    fn add(&mut self, other: &Rate) {
        self.n += other.n;
        self.hits += other.hits;
    }
}

/// Sufficient statistics for a Pearson correlation of two binary series.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairSums {
    pub n: u64,
    pub sum_x: u64,
    pub sum_y: u64,
    pub sum_xy: u64,
}

impl PairSums {
    /// Pearson correlation; `None` when either series is constant.
    pub fn correlation(&self) -> Option<f64> {
        let n = self.n as f64;
        let (sx, sy, sxy) = (self.sum_x as f64, self.sum_y as f64, self.sum_xy as f64);
        // For 0/1 data Σx² = Σx.
        let vx = n * sx - sx * sx;
        let vy = n * sy - sy * sy;
        if self.n == 0 || vx <= 0.0 || vy <= 0.0 {
            return None;
        }
        Some((n * sxy - sx * sy) / (vx * vy).sqrt())
    }

    /// Ordered pairs of distinct members of a group whose membership is the
    /// same in both periods: `m` members, `dx`/`dy` replacements in the first
    /// and second period, `both` members replacing in both.
    pub(crate) fn add_stable_group(&mut self, m: u64, dx: u64, dy: u64, both: u64) {
        if m == 0 {
            return;
        }
        self.n += m * (m - 1);
        self.sum_x += dx * (m - 1);
        self.sum_y += dy * (m - 1);
        self.sum_xy += dx * dy - both;
    }

    fn add(&mut self, other: &PairSums) {
        self.n += other.n;
        self.sum_x += other.sum_x;
        self.sum_y += other.sum_y;
        self.sum_xy += other.sum_xy;
    }
}

/// Counts behind each moment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MomentCounts {
    pub m1: Rate,
    /// `(d_i,t, d_j,t+1)` pairs.
    pub lead_pairs: PairSums,
    /// `(d_i,t, d_j,t−1)` pairs.
    pub lag_pairs: PairSums,
    pub m3_treated: Rate,
    pub m3_control: Rate,
    pub m4_treated: Rate,
    pub m4_control: Rate,
}

impl MomentCounts {
    /// Own-history and contrast counts of one record (not the pair sums).
    #[inline]
    pub(crate) fn push_record(&mut self, r: &EnrichedRecord) {
        if r.prev_replace == Some(true) {
            self.m1.push(r.replace);
        }
        if !r.fail {
            if r.f_lag >= 1 {
                self.m3_treated.push(r.replace);
            } else {
                self.m3_control.push(r.replace);
            }
            if r.f_cage >= 1 {
                self.m4_treated.push(r.replace);
            } else {
                self.m4_control.push(r.replace);
            }
        }
    }

    fn add(&mut self, o: &MomentCounts) {
        self.m1.add(&o.m1);
        self.lead_pairs.add(&o.lead_pairs);
        self.lag_pairs.add(&o.lag_pairs);
        self.m3_treated.add(&o.m3_treated);
        self.m3_control.add(&o.m3_control);
        self.m4_treated.add(&o.m4_treated);
        self.m4_control.add(&o.m4_control);
    }
}

/// The four spatial moments; `None` marks a moment whose conditioning cell
/// is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MomentVector {
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub m3: Option<f64>,
    pub m4: Option<f64>,
    pub counts: MomentCounts,
}

pub const MOMENT_NAMES: [&str; 4] = ["m1", "m2", "m3", "m4"];

impl MomentVector {
    pub(crate) fn from_counts(counts: MomentCounts) -> Self {
        let diff = |a: Rate, b: Rate| Some(a.value()? - b.value()?);
        Self {
            m1: counts.m1.value(),
            m2: counts
                .lead_pairs
                .correlation()
                .zip(counts.lag_pairs.correlation())
                .map(|(lead, lag)| lead - lag),
            m3: diff(counts.m3_treated, counts.m3_control),
            m4: diff(counts.m4_treated, counts.m4_control),
            counts,
        }
    }

    pub fn values(&self) -> [Option<f64>; 4] {
        [self.m1, self.m2, self.m3, self.m4]
    }

    /// Names of the moments entering the distance that are missing.
    pub fn missing_targets(&self) -> Vec<&'static str> {
        [("m1", self.m1), ("m3", self.m3), ("m4", self.m4)]
            .into_iter()
            .filter(|(_, v)| v.is_none())
            .map(|(n, _)| n)
            .collect()
    }
}

/// Moments of the whole panel.
pub fn compute_moments(panel: &EnrichedPanel) -> MomentVector {
    MomentVector::from_counts(moment_counts(panel.records().iter()))
}

fn moment_counts<'a>(records: impl Iterator<Item = &'a EnrichedRecord> + Clone) -> MomentCounts {
    let mut c = MomentCounts::default();
    for r in records.clone() {
        c.push_record(r);
    }
    let (lead, lag) = neighbor_pair_sums(records);
    c.lead_pairs = lead;
    c.lag_pairs = lag;
    c
}

/// Members of one position in one period: location → decision.
type Group = HashMap<u32, bool>;

/// Accumulates `(x from group a, y from group b)` over ordered pairs of
/// distinct locations in O(|a| + |b|).
fn cross_pairs(a: &Group, b: &Group, out: &mut PairSums) {
    let (na, nb) = (a.len() as u64, b.len() as u64);
    let da = a.values().filter(|&&d| d).count() as u64;
    let db = b.values().filter(|&&d| d).count() as u64;
    let mut common = 0u64;
    let mut x_in_b = 0u64;
    let mut y_in_a = 0u64;
    let mut xy_self = 0u64;
    for (loc, &x) in a {
        if let Some(&y) = b.get(loc) {
            common += 1;
            x_in_b += u64::from(x);
            y_in_a += u64::from(y);
            xy_self += u64::from(x && y);
        }
    }
    out.n += na * nb - common;
    out.sum_x += da * nb - x_in_b;
    out.sum_y += db * na - y_in_a;
    out.sum_xy += da * db - xy_self;
}

fn neighbor_pair_sums<'a>(records: impl Iterator<Item = &'a EnrichedRecord>) -> (PairSums, PairSums) {
    let mut groups: BTreeMap<(i64, u8, i64), Group> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.cabinet, r.cage_pos, r.period))
            .or_default()
            .insert(r.location, r.replace);
    }
    let mut lead = PairSums::default();
    let mut lag = PairSums::default();
    for (&(cab, cage, t), now) in &groups {
        if let Some(next) = groups.get(&(cab, cage, t + 1)) {
            cross_pairs(now, next, &mut lead);
        }
        if let Some(prev) = groups.get(&(cab, cage, t - 1)) {
            cross_pairs(now, prev, &mut lag);
        }
    }
    (lead, lag)
}

/// Average of per-draw moment vectors. Each moment averages over the draws
/// where it is defined; counts are summed.
pub fn average_moments(draws: &[MomentVector]) -> MomentVector {
    let mut counts = MomentCounts::default();
    for d in draws {
        counts.add(&d.counts);
    }
    let avg = |f: fn(&MomentVector) -> Option<f64>| {
        let vals: Vec<f64> = draws.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    MomentVector {
        m1: avg(|m| m.m1),
        m2: avg(|m| m.m2),
        m3: avg(|m| m.m3),
        m4: avg(|m| m.m4),
        counts,
    }
}

/// Unweighted squared distance over `m1`, `m3`, `m4`. Fails, naming the
/// moments, if any is missing in either vector.
pub fn msm_distance(data: &MomentVector, sim: &MomentVector) -> Result<f64> {
    let mut missing = data.missing_targets();
    for name in sim.missing_targets() {
        if !missing.contains(&name) {
            missing.push(name);
        }
    }
    if !missing.is_empty() {
        missing.sort_unstable();
        return Err(Error::MissingMoments(missing));
    }
    Ok(msm_distance_available(data, sim))
}

/// [`msm_distance`] over the moments present in both vectors; missing
/// ones are skipped with a warning.
pub fn msm_distance_available(data: &MomentVector, sim: &MomentVector) -> f64 {
    let mut total = 0.0;
    for (name, a, b) in [("m1", data.m1, sim.m1), ("m3", data.m3, sim.m3), ("m4", data.m4, sim.m4)] {
        match (a, b) {
            (Some(a), Some(b)) => total += (a - b) * (a - b),
            _ => log::warn!("moment {name} missing; excluded from distance"),
        }
    }
    total
}

/// Geometric mean of the `m3` and `m4` ratios against a baseline stratum.
/// `None` when a baseline moment is zero or the ratios disagree in sign.
pub fn coordination_intensity(m3: f64, m4: f64, m3_base: f64, m4_base: f64) -> Option<f64> {
    if m3_base == 0.0 || m4_base == 0.0 {
        return None;
    }
    let product = (m3 / m3_base) * (m4 / m4_base);
    (product >= 0.0 && product.is_finite()).then(|| product.sqrt())
}

/// Moments within each cage position, with intensity relative to cage 0.
#[derive(Clone, Debug, PartialEq)]
pub struct CageMoments {
    pub n: [u64; N_CAGES],
    pub by_cage: [MomentVector; N_CAGES],
    pub intensity: [Option<f64>; N_CAGES],
}

pub fn moments_by_cage(panel: &EnrichedPanel) -> CageMoments {
    let by_cage: [MomentVector; N_CAGES] = std::array::from_fn(|k| {
        let recs = panel.records().iter().filter(move |r| usize::from(r.cage_pos) == k);
        MomentVector::from_counts(moment_counts(recs))
    });
    let n = std::array::from_fn(|k| panel.records().iter().filter(|r| usize::from(r.cage_pos) == k).count() as u64);
    let intensity = intensities(&by_cage);
    CageMoments { n, by_cage, intensity }
}

fn intensities(by_cage: &[MomentVector; N_CAGES]) -> [Option<f64>; N_CAGES] {
    let base = &by_cage[0];
    std::array::from_fn(|k| {
        let m = &by_cage[k];
        let v = coordination_intensity(m.m3?, m.m4?, base.m3?, base.m4?);
        if v.is_none() {
            log::warn!("coordination intensity for cage {k} undefined");
        }
        v
    })
}

impl CageMoments {
    /// Per-cage averages over simulation draws.
    pub fn average(draws: &[CageMoments]) -> Self {
        let by_cage: [MomentVector; N_CAGES] = std::array::from_fn(|k| {
            average_moments(&draws.iter().map(|d| d.by_cage[k]).collect::<Vec<_>>())
        });
        let n = std::array::from_fn(|k| draws.iter().map(|d| d.n[k]).sum());
        let intensity = intensities(&by_cage);
        Self { n, by_cage, intensity }
    }
}

/// Conditional replacement rates used in the moment-validation table.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConditionalRates {
    pub overall: Rate,
    pub failed: Rate,
    pub not_failed: Rate,
    pub neighbor_replaced_lag: Rate,
    pub no_neighbor_replaced_lag: Rate,
    pub neighbor_failed: Rate,
    pub no_neighbor_failed: Rate,
    pub by_cage: [Rate; N_CAGES],
}

pub const RATE_LABELS: [&str; 10] = [
    "overall",
    "failed",
    "not_failed",
    "neighbor_replaced_lag",
    "no_neighbor_replaced_lag",
    "neighbor_failed",
    "no_neighbor_failed",
    "cage0",
    "cage1",
    "cage2",
];

impl ConditionalRates {
    pub fn of(panel: &EnrichedPanel) -> Self {
        let mut c = Self::default();
        for r in panel.records() {
            let d = r.replace;
            c.overall.push(d);
            if r.fail { c.failed.push(d) } else { c.not_failed.push(d) }
            if r.n_lag {
                c.neighbor_replaced_lag.push(d)
            } else {
                c.no_neighbor_replaced_lag.push(d)
            }
            if r.f_cage >= 1 {
                c.neighbor_failed.push(d)
            } else {
                c.no_neighbor_failed.push(d)
            }
            c.by_cage[usize::from(r.cage_pos)].push(d);
        }
        c
    }

    /// Rates in [`RATE_LABELS`] order.
    pub fn rates(&self) -> [Rate; 10] {
        [
            self.overall,
            self.failed,
            self.not_failed,
            self.neighbor_replaced_lag,
            self.no_neighbor_replaced_lag,
            self.neighbor_failed,
            self.no_neighbor_failed,
            self.by_cage[0],
            self.by_cage[1],
            self.by_cage[2],
        ]
    }

    /// Per-draw average of each rate (draws where it is undefined skipped).
    pub fn average_values(draws: &[ConditionalRates]) -> [Option<f64>; 10] {
        std::array::from_fn(|i| {
            let vals: Vec<f64> = draws.iter().filter_map(|d| d.rates()[i].value()).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{enrich, tests::rec, Panel};

    fn panel(recs: Vec<crate::panel::PanelRecord>) -> EnrichedPanel {
        enrich(&Panel::from_records(recs).unwrap())
    }

    #[test]
    fn toy_m1_conditions_on_own_lag() {
        let p = panel(vec![
            rec("A", 1, 1, 0, false, true),
            rec("A", 2, 1, 0, false, false),
            rec("B", 1, 1, 0, false, false),
            rec("B", 2, 1, 0, false, true),
        ]);
        let m = compute_moments(&p);
        assert_eq!(m.m1, Some(0.0));
        assert_eq!(m.counts.m1, Rate { n: 1, hits: 0 });
        // Lead pairs: (A1,B2)=(1,1), (B1,A2)=(0,0): perfectly correlated.
        assert_eq!(m.counts.lead_pairs, PairSums { n: 2, sum_x: 1, sum_y: 1, sum_xy: 1 });
        assert_eq!(m.counts.lead_pairs.correlation(), Some(1.0));
    }

    #[test]
    fn no_failures_leaves_contrasts_missing() {
        let p = panel(vec![
            rec("A", 1, 1, 0, false, true),
            rec("A", 2, 1, 0, false, false),
            rec("B", 1, 1, 0, false, false),
            rec("B", 2, 1, 0, false, true),
        ]);
        let m = compute_moments(&p);
        assert_eq!((m.m3, m.m4), (None, None));
        assert_eq!(m.missing_targets(), vec!["m3", "m4"]);
        let err = msm_distance(&m, &m).unwrap_err();
        assert!(matches!(err, Error::MissingMoments(ref v) if v == &vec!["m3", "m4"]));
    }

    #[test]
    fn contrasts_ignore_failed_units() {
        let base = vec![
            rec("A", 1, 1, 0, true, false),
            rec("A", 2, 1, 0, false, false),
            rec("B", 1, 1, 0, false, false),
            rec("B", 2, 1, 0, false, true),
            rec("C", 1, 1, 0, false, false),
            rec("C", 2, 1, 0, false, false),
        ];
        let m = compute_moments(&panel(base.clone()));
        // B and C at t=2 saw A fail at t=1; B and C at t=1 see A fail now.
        assert_eq!(m.counts.m3_treated, Rate { n: 2, hits: 1 });
        assert_eq!(m.counts.m3_control, Rate { n: 3, hits: 0 });
        assert_eq!(m.m3, Some(0.5));
        assert_eq!(m.counts.m4_treated, Rate { n: 2, hits: 0 });
        assert_eq!(m.counts.m4_control, Rate { n: 3, hits: 1 });
        // Failed rows in another cage do not move the own-cage contrasts.
        let mut more = base;
        more.push(rec("Z", 1, 2, 0, true, true));
        more.push(rec("Z", 2, 2, 0, true, true));
        let m2 = compute_moments(&panel(more));
        assert_eq!(m2.counts.m3_treated, m.counts.m3_treated);
        assert_eq!(m2.counts.m4_control, m.counts.m4_control);
    }

    #[test]
    fn distance_arithmetic() {
        let a = MomentVector { m1: Some(0.5), m3: Some(0.02), m4: Some(0.01), ..Default::default() };
        let b = MomentVector { m1: Some(0.51), m3: Some(0.03), m4: Some(0.01), m2: Some(0.7), ..Default::default() };
        assert_eq!(msm_distance(&a, &a).unwrap(), 0.0);
        let d = msm_distance(&a, &b).unwrap();
        assert!((d - 0.0002).abs() < 1e-15);
        assert_eq!(d, msm_distance(&b, &a).unwrap());
    }

    #[test]
    fn published_intensities() {
        let one = coordination_intensity(0.0087, 0.0056, 0.0048, 0.0029).unwrap();
        assert!((one - 1.871).abs() < 1e-3);
        let two = coordination_intensity(0.0370, 0.0407, 0.0048, 0.0029).unwrap();
        assert!((two - 10.40).abs() < 1e-2);
        assert_eq!(coordination_intensity(0.01, 0.02, 0.01, 0.02), Some(1.0));
        assert_eq!(coordination_intensity(0.01, 0.02, 0.0, 0.02), None);
    }

    #[test]
    fn averages_skip_undefined_draws() {
        let a = MomentVector { m1: Some(0.2), m3: None, ..Default::default() };
        let b = MomentVector { m1: Some(0.4), m3: Some(0.1), ..Default::default() };
        let avg = average_moments(&[a, b]);
        assert!((avg.m1.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(avg.m3, Some(0.1));
        assert_eq!(avg.m4, None);
    }

    #[test]
    fn identical_cages_have_unit_intensity() {
        let mut recs = Vec::new();
        for cage in 0..3u8 {
            for (loc, fails, reps) in [("a", [true, false], [false, false]), ("b", [false, false], [true, true]), ("c", [false, false], [false, false])] {
                for t in 0..2 {
                    recs.push(rec(&format!("{loc}{cage}"), t as i64, 1, cage, fails[t], reps[t]));
                }
            }
        }
        let cm = moments_by_cage(&panel(recs));
        for k in 0..3 {
            assert!((cm.by_cage[k].m3.unwrap() - 1.0 / 6.0).abs() < 1e-15);
            assert!((cm.by_cage[k].m4.unwrap() - 1.0 / 6.0).abs() < 1e-15);
        }
        assert_eq!(cm.intensity, [Some(1.0); 3]);
        assert_eq!(cm.n, [6, 6, 6]);
    }

    #[test]
    fn conditional_rates_count_every_record() {
        let p = panel(vec![
            rec("A", 1, 1, 0, true, true),
            rec("A", 2, 1, 0, false, false),
            rec("B", 1, 1, 1, false, false),
            rec("B", 2, 1, 1, false, false),
        ]);
        let c = ConditionalRates::of(&p);
        assert_eq!(c.overall, Rate { n: 4, hits: 1 });
        assert_eq!(c.failed.value(), Some(1.0));
        assert_eq!(c.by_cage[2].value(), None);
    }
}
