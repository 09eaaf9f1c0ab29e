//! Model comparison statistics and the tables written by the command line.
//!
//! Every table is tab-separated with a header row. Floats in machine tables
//! use the shortest round-trip representation; the validation table prints
//! percentages with two decimals. Missing cells are written as [`MISSING`].

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::estimate::{BootstrapResult, Mode};
use crate::kv::KeyValues;
use crate::likelihood::FitStats;
use crate::moments::{CageMoments, ConditionalRates, MomentVector, MOMENT_NAMES, RATE_LABELS};
use crate::panel::{EnrichedPanel, N_CAGES};
use crate::state::StateSpec;

/// Marker for an unavailable cell.
pub const MISSING: &str = "n/a";

/// χ²(2) critical values at the 5%, 1% and 0.1% levels.
pub const CHI2_DF2_CRITICAL: [(f64, f64); 3] = [(0.05, 5.991), (0.01, 9.210), (0.001, 13.816)];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |v| v.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrTest {
    pub statistic: f64,
    pub df: usize,
}

/// `−2(ll_restricted − ll_unrestricted)`. A negative statistic is returned
/// as is, with a warning: the models are then not nested as claimed or the
/// unrestricted fit stopped early.
pub fn lr_test(ll_restricted: f64, ll_unrestricted: f64, df: usize) -> Result<LrTest> {
    if df == 0 {
        return Err(Error::invalid("likelihood-ratio test needs df >= 1"));
    }
    let statistic = -2.0 * (ll_restricted - ll_unrestricted);
    if statistic < 0.0 {
        log::warn!("negative LR statistic {statistic}: unrestricted fit is worse than the restricted one");
    }
    Ok(LrTest { statistic, df })
}

/// `(AIC, BIC) = (2k − 2ll, k·ln n − 2ll)`.
pub fn information_criteria(ll: f64, k: usize, n: u64) -> Result<(f64, f64)> {
    if k == 0 || n == 0 {
        return Err(Error::invalid("information criteria need k >= 1 and n >= 1"));
    }
    let k = k as f64;
    Ok((2.0 * k - 2.0 * ll, k * (n as f64).ln() - 2.0 * ll))
}

/// Share of the baseline's unexplained variation picked up by the spatial
/// model: `(R²_s − R²_b) / (1 − R²_b)`.
pub fn unexplained_share(pr2_base: f64, pr2_spatial: f64) -> Result<f64> {
    if pr2_base >= 1.0 {
        return Err(Error::invalid("baseline pseudo-R² must be below 1"));
    }
    Ok((pr2_spatial - pr2_base) / (1.0 - pr2_base))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFit {
    pub label: String,
    pub stats: FitStats,
    pub aic: f64,
    pub bic: f64,
}

impl ModelFit {
    pub fn new(label: impl Into<String>, log_likelihood: f64, ll_null: f64, n_obs: u64, n_params: usize) -> Result<Self> {
        let (aic, bic) = information_criteria(log_likelihood, n_params, n_obs)?;
        Ok(Self {
            label: label.into(),
            stats: FitStats::new(log_likelihood, ll_null, n_obs, n_params),
            aic,
            bic,
        })
    }

    /// Reads the stored log-likelihoods and counts of an estimation run;
    /// derived statistics are always recomputed.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mode: Mode = kv.require("mode")?;
        Self::new(
            mode.to_string(),
            kv.require("log_likelihood")?,
            kv.require("ll_null")?,
            kv.require("n_obs")?,
            kv.require("n_params")?,
        )
    }
}

/// Baseline versus spatial fit on the same sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub baseline: ModelFit,
    pub spatial: ModelFit,
    pub lr: LrTest,
    /// Spatial minus baseline.
    pub delta_aic: f64,
    pub delta_bic: f64,
    pub unexplained_share: f64,
}

impl ComparisonReport {
    pub fn new(baseline: ModelFit, spatial: ModelFit) -> Result<Self> {
        if baseline.stats.n_obs != spatial.stats.n_obs {
            return Err(Error::invalid(format!(
                "fits use different samples: {} vs {} observations",
                baseline.stats.n_obs, spatial.stats.n_obs
            )));
        }
        if spatial.stats.n_params <= baseline.stats.n_params {
            return Err(Error::invalid("spatial model must have more parameters than the baseline"));
        }
        if baseline.stats.ll_null != spatial.stats.ll_null {
            log::warn!(
                "null log-likelihoods differ ({} vs {}); pseudo-R² values are not comparable",
                baseline.stats.ll_null,
                spatial.stats.ll_null
            );
        }
        let lr = lr_test(
            baseline.stats.log_likelihood,
            spatial.stats.log_likelihood,
            spatial.stats.n_params - baseline.stats.n_params,
        )?;
        Ok(Self {
            delta_aic: spatial.aic - baseline.aic,
            delta_bic: spatial.bic - baseline.bic,
            unexplained_share: unexplained_share(baseline.stats.pseudo_r2, spatial.stats.pseudo_r2)?,
            lr,
            baseline,
            spatial,
        })
    }

    /// `comparison.txt`: `key = value` lines followed by a per-model table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr_statistic = {:.2}", self.lr.statistic);
        let _ = writeln!(s, "lr_df = {}", self.lr.df);
        if self.lr.df == 2 {
            for (level, crit) in CHI2_DF2_CRITICAL {
                let _ = writeln!(s, "lr_reject_at_{level} = {}", self.lr.statistic > crit);
            }
        }
        let _ = writeln!(s, "delta_aic = {:.2}", self.delta_aic);
        let _ = writeln!(s, "delta_bic = {:.2}", self.delta_bic);
        let _ = writeln!(s, "unexplained_share = {:.4}", self.unexplained_share);
        let _ = writeln!(s);
        let _ = writeln!(s, "model\tlog_likelihood\tn_params\tn_obs\tll_null\tpseudo_r2\taic\tbic");
        for m in [&self.baseline, &self.spatial] {
            let _ = writeln!(
                s,
                "{}\t{:.2}\t{}\t{}\t{:.2}\t{:.4}\t{:.2}\t{:.2}",
                m.label, m.stats.log_likelihood, m.stats.n_params, m.stats.n_obs, m.stats.ll_null, m.stats.pseudo_r2, m.aic, m.bic
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationRow {
    pub label: &'static str,
    pub data: Option<f64>,
    pub baseline: Option<f64>,
    pub spatial: Option<f64>,
}

/// Conditional replacement rates of the data next to the simulated rates of
/// both models, in [`RATE_LABELS`] order.
pub fn moment_validation_table(
    data: &ConditionalRates,
    baseline: &[Option<f64>; 10],
    spatial: &[Option<f64>; 10],
) -> Vec<ValidationRow> {
    data.rates()
        .iter()
        .enumerate()
        .map(|(i, r)| ValidationRow {
            label: RATE_LABELS[i],
            data: r.value(),
            baseline: baseline[i],
            spatial: spatial[i],
        })
        .collect()
}

/// `validation.tsv`, rates in percent.
pub fn render_validation_table(rows: &[ValidationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| MISSING.to_string(), |v| format!("{:.2}", 100.0 * v));
    let mut s = String::from("moment\tdata_pct\tbaseline_pct\tspatial_pct\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.label, pct(r.data), pct(r.baseline), pct(r.spatial));
    }
    s
}

/// `moments.tsv`: data moments next to simulated ones.
pub fn render_moments(data: &MomentVector, simulated: Option<&MomentVector>) -> String {
    let mut s = String::from("moment\tdata\tsimulated\tdifference\n");
    let sim = simulated.map(|m| m.values()).unwrap_or([None; 4]);
    for ((name, d), m) in MOMENT_NAMES.iter().zip(data.values()).zip(sim) {
        let diff = d.zip(m).map(|(d, m)| m - d);
        let _ = writeln!(s, "{name}\t{}\t{}\t{}", cell(d), cell(m), cell(diff));
    }
    s
}

/// `thermal.tsv`: neighbor-failure contrasts and coordination intensity by
/// cage.
pub fn render_thermal(c: &CageMoments) -> String {
    let mut s = String::from("cage\tn\tm3\tm4\tintensity\n");
    for k in 0..N_CAGES {
        let m = &c.by_cage[k];
        let _ = writeln!(s, "{k}\t{}\t{}\t{}\t{}", c.n[k], cell(m.m3), cell(m.m4), cell(c.intensity[k]));
    }
    s
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Tally {
    n: u64,
    replace: u64,
    fail: u64,
}

impl Tally {
    fn push(&mut self, replace: bool, fail: bool) {
        self.n += 1;
        self.replace += u64::from(replace);
        self.fail += u64::from(fail);
    }

    fn row(&self) -> String {
        let rate = |k: u64| cell((self.n > 0).then(|| k as f64 / self.n as f64));
        format!("{}\t{}\t{}", self.n, rate(self.replace), rate(self.fail))
    }
}

/// `plot_age.tsv`: replacement and failure rates by cage and age bin.
pub fn plot_rates_by_age(panel: &EnrichedPanel, spec: &StateSpec) -> String {
    let mut t = vec![[Tally::default(); N_CAGES]; spec.n_age_points()];
    for r in panel.records() {
        t[spec.age_bin_of_quarters(r.age_quarters)][usize::from(r.cage_pos)].push(r.replace, r.fail);
    }
    let mut s = String::from("cage\tage_bin\tn\treplace_rate\tfail_rate\n");
    for cage in 0..N_CAGES {
        for (bin, row) in t.iter().enumerate() {
            let _ = writeln!(s, "{cage}\t{bin}\t{}", row[cage].row());
        }
    }
    s
}

/// `plot_period.tsv`: replacement and failure rates by period and cage.
pub fn plot_rates_by_period(panel: &EnrichedPanel) -> String {
    let mut s = String::from("period\tcage\tn\treplace_rate\tfail_rate\n");
    let Some((t0, t1)) = panel.period_range() else {
        return s;
    };
    let mut t = vec![[Tally::default(); N_CAGES]; (t1 - t0 + 1) as usize];
    for r in panel.records() {
        t[(r.period - t0) as usize][usize::from(r.cage_pos)].push(r.replace, r.fail);
    }
    for (i, row) in t.iter().enumerate() {
        for (cage, tally) in row.iter().enumerate() {
            let _ = writeln!(s, "{}\t{cage}\t{}", t0 + i as i64, tally.row());
        }
    }
    s
}

/// `bootstrap.tsv`: one row per parameter.
pub fn render_bootstrap(b: &BootstrapResult, estimate: Option<&[f64]>) -> String {
    let mut s = String::from("parameter\testimate\tstd_error\treplicates\trequested\n");
    for (i, name) in b.mode.param_names().iter().enumerate() {
        let est = estimate.and_then(|e| e.get(i).copied());
        let _ = writeln!(s, "{name}\t{}\t{}\t{}\t{}", cell(est), b.std_errors[i], b.effective(), b.requested);
    }
    s
}

/// `bootstrap_replicates.tsv`: the parameter vector of every successful
/// replicate with its resampling seed.
pub fn render_bootstrap_replicates(b: &BootstrapResult) -> String {
    let mut s = String::from("replicate\tseed");
    for name in b.mode.param_names() {
        let _ = write!(s, "\t{name}");
    }
    s.push('\n');
    for (id, row) in b.replicate_ids.iter().zip(&b.replicates) {
        let _ = write!(s, "{id}\t{}", b.seeds[*id]);
        for v in row {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::Rate;

    #[test]
    fn published_comparison() {
        let lr = lr_test(-6466.44, -6123.75, 2).unwrap();
        assert!((lr.statistic - 685.38).abs() < 0.01);
        assert_eq!(lr_test(-10.0, -10.0, 2).unwrap().statistic, 0.0);
        assert!((lr_test(-100.0, -99.0, 1).unwrap().statistic - 2.0).abs() < 1e-12);
        assert!(lr_test(-99.0, -100.0, 1).unwrap().statistic < 0.0);
        assert!(lr_test(-1.0, -1.0, 0).is_err());

        let (aic, bic) = information_criteria(-6123.75, 7, 147_078).unwrap();
        assert!((aic - 12261.50).abs() < 0.01 && (bic - 12330.79).abs() < 0.01, "{aic} {bic}");
        let (aic, bic) = information_criteria(-6466.44, 5, 147_078).unwrap();
        assert!((aic - 12942.87).abs() < 0.01 && (bic - 12992.37).abs() < 0.01, "{aic} {bic}");
        let (aic, bic) = information_criteria(0.0, 1, 1).unwrap();
        assert_eq!((aic, bic), (2.0, 0.0));
        let (_, bic) = information_criteria(0.0, 1, 3).unwrap();
        assert!((bic - 3f64.ln()).abs() < 1e-15);
        assert!(information_criteria(0.0, 0, 10).is_err());
    }

    #[test]
    fn unexplained_share_values() {
        assert!((unexplained_share(0.650, 0.669).unwrap() - 0.0543).abs() < 1e-4);
        assert_eq!(unexplained_share(0.3, 0.3).unwrap(), 0.0);
        assert_eq!(unexplained_share(0.0, 0.5).unwrap(), 0.5);
        assert!(unexplained_share(1.0, 0.5).is_err());
    }

    #[test]
    fn comparison_report_renders_deterministically() {
        let b = ModelFit::new("baseline", -6466.44, -18492.39, 147_078, 5).unwrap();
        let s = ModelFit::new("spatial", -6123.75, -18492.39, 147_078, 7).unwrap();
        let r = ComparisonReport::new(b.clone(), s.clone()).unwrap();
        assert_eq!(r.lr.df, 2);
        assert!((r.delta_aic - (12261.50 - 12942.87)).abs() < 0.02);
        let text = r.render();
        assert!(text.starts_with("lr_statistic = 685.38\nlr_df = 2\n"), "{text}");
        assert!(text.contains("lr_reject_at_0.001 = true"));
        assert!(text.contains("\nspatial\t-6123.75\t7\t147078\t-18492.39\t0.6689\t12261.50\t12330.79\n"), "{text}");
        assert_eq!(text, ComparisonReport::new(b.clone(), s.clone()).unwrap().render());
        assert!(ComparisonReport::new(s, b).is_err());
    }

    #[test]
    fn fit_from_stored_values() {
        let mut kv = KeyValues::new();
        kv.set("mode", "spatial");
        kv.set("log_likelihood", -6123.75);
        kv.set("ll_null", -18492.39);
        kv.set("n_obs", 147_078);
        kv.set("n_params", 7);
        // Cached statistics are ignored.
        kv.set("aic", 1.0);
        let fit = ModelFit::from_kv(&kv).unwrap();
        assert!((fit.aic - 12261.50).abs() < 0.01);
        assert_eq!(fit.label, "spatial");
    }

    #[test]
    fn empty_strata_are_marked() {
        let mut data = ConditionalRates::default();
        data.overall = Rate { n: 1000, hits: 27 };
        data.by_cage[0] = Rate { n: 1000, hits: 27 };
        let mut sim = [None; 10];
        sim[0] = Some(0.0281);
        let rows = moment_validation_table(&data, &sim, &sim);
        assert_eq!(rows.len(), 10);
        let text = render_validation_table(&rows);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("moment\tdata_pct\tbaseline_pct\tspatial_pct"));
        assert_eq!(lines.next(), Some("overall\t2.70\t2.81\t2.81"));
        assert!(text.contains("cage2\tn/a\tn/a\tn/a"));
    }

    #[test]
    fn moments_table_shape() {
        let data = MomentVector {
            m1: Some(0.25),
            ..Default::default()
        };
        let sim = MomentVector {
            m1: Some(0.5),
            m3: Some(0.1),
            ..Default::default()
        };
        let text = render_moments(&data, Some(&sim));
        assert_eq!(
            text,
            "moment\tdata\tsimulated\tdifference\nm1\t0.25\t0.5\t0.25\nm2\tn/a\tn/a\tn/a\nm3\tn/a\t0.1\tn/a\nm4\tn/a\tn/a\tn/a\n"
        );
    }
}
